#pragma once

// Plain-text configuration: `key = value` lines with `#` comments, and the
// mapping between those files and ModelConfig.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctsan/models.hpp"

namespace ctsan {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Duplicate keys and lines without '=' raise InputError.
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& kv);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);

bool parse_bool(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
std::uint64_t parse_uint(const std::string& key, const std::string& value);
// "f32" or "f64".
Precision parse_precision(const std::string& value);
std::string precision_name(Precision p);

// Applies recognised keys to `config` and returns the rest untouched.
KeyValues apply_model_keys(const KeyValues& kv, ModelConfig& config);
// Every ModelConfig field, in a fixed order.
KeyValues model_keys(const ModelConfig& config);

}  // namespace ctsan

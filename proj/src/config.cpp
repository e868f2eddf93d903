#include "ctsan/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "ctsan/errors.hpp"

namespace ctsan {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

template <typename T>
Field size_field(const std::string& key, T ModelConfig::*member) {
  return {key, [member](const ModelConfig& c) { return std::to_string(c.*member); },
          [member, key](ModelConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_uint(key, v)); }};
}

Field double_field(const std::string& key, double ModelConfig::*member) {
  return {key, [member](const ModelConfig& c) { return format_double(c.*member); },
          [member, key](ModelConfig& c, const std::string& v) { c.*member = parse_double(key, v); }};
}

Field bool_field(const std::string& key, bool ModelConfig::*member) {
  return {key, [member](const ModelConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member, key](ModelConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

template <typename T>
Field det_size(const std::string& key, T DetectorConfig::*member) {
  return {key, [member](const ModelConfig& c) { return std::to_string(c.detector.*member); },
          [member, key](ModelConfig& c, const std::string& v) {
            c.detector.*member = static_cast<T>(parse_uint(key, v));
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"task", [](const ModelConfig& c) { return task_name(c.task); },
       [](ModelConfig& c, const std::string& v) { c.task = parse_task(v); }},
      size_field("vocab_size", &ModelConfig::vocab_size),
      size_field("word_dim", &ModelConfig::word_dim),
      size_field("hidden", &ModelConfig::hidden),
      size_field("depth", &ModelConfig::depth),
      size_field("top_k", &ModelConfig::top_k),
      bool_field("layer_norm", &ModelConfig::layer_norm),
      double_field("forget_bias", &ModelConfig::forget_bias),
      double_field("dropout", &ModelConfig::dropout),
      bool_field("input_attention", &ModelConfig::input_attention),
      bool_field("output_attention", &ModelConfig::output_attention),
      bool_field("finetune_detector", &ModelConfig::finetune_detector),
      double_field("lambda1", &ModelConfig::lambda1),
      double_field("lambda2", &ModelConfig::lambda2),
      double_field("mc_margin", &ModelConfig::mc_margin),
      double_field("ret_margin", &ModelConfig::ret_margin),
      size_field("sketch_dim", &ModelConfig::sketch_dim),
      size_field("maxout_dim", &ModelConfig::maxout_dim),
      size_field("maxout_pieces", &ModelConfig::maxout_pieces),
      double_field("ret_dropout", &ModelConfig::ret_dropout),
      size_field("sketch_seed", &ModelConfig::sketch_seed),
      size_field("max_len", &ModelConfig::max_len),
      det_size("detector.raw_channels", &DetectorConfig::raw_channels),
      det_size("detector.feature_dim", &DetectorConfig::feature_dim),
      det_size("detector.hidden", &DetectorConfig::hidden),
      det_size("detector.candidates", &DetectorConfig::candidates),
      det_size("detector.grid", &DetectorConfig::grid),
      det_size("detector.attn_channels", &DetectorConfig::attn_channels),
      det_size("detector.depth", &DetectorConfig::depth),
      {"detector.layer_norm", [](const ModelConfig& c) { return std::string(c.detector.layer_norm ? "true" : "false"); },
       [](ModelConfig& c, const std::string& v) { c.detector.layer_norm = parse_bool("detector.layer_norm", v); }},
      {"detector.forget_bias", [](const ModelConfig& c) { return format_double(c.detector.forget_bias); },
       [](ModelConfig& c, const std::string& v) { c.detector.forget_bias = parse_double("detector.forget_bias", v); }},
      {"detector.seed_traces", [](const ModelConfig& c) { return std::string(c.detector.seed_traces ? "true" : "false"); },
       [](ModelConfig& c, const std::string& v) { c.detector.seed_traces = parse_bool("detector.seed_traces", v); }},
  };
  return table;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw InputError("line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw InputError("line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) throw InputError("line " + std::to_string(line_no) + ": duplicate key " + key);
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw InputError("write failed for " + path);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw InputError(key + ": expected true or false, got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw InputError(key + ": expected a number, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw InputError(key + ": expected a nonnegative integer, got '" + value + "'");
  }
  return v;
}

Precision parse_precision(const std::string& value) {
  if (value == "f32") return Precision::kF32;
  if (value == "f64") return Precision::kF64;
  throw InputError("precision: expected f32 or f64, got '" + value + "'");
}

std::string precision_name(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

KeyValues apply_model_keys(const KeyValues& kv, ModelConfig& config) {
  KeyValues rest;
  for (const auto& [k, v] : kv) {
    bool used = false;
    for (const Field& f : fields()) {
      if (f.key == k) {
        f.set(config, v);
        used = true;
        break;
      }
    }
    if (!used) rest.emplace_back(k, v);
  }
  return rest;
}

KeyValues model_keys(const ModelConfig& config) {
  KeyValues out;
  for (const Field& f : fields()) out.emplace_back(f.key, f.get(config));
  return out;
}

}  // namespace ctsan

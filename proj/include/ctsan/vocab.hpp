#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace ctsan {

// Reserved ids. <bos> feeds the caption decoder at its first step.
inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kUnk = 2;
inline constexpr int kBlank = 3;
inline constexpr int kBos = 4;
inline constexpr int kReservedCount = 5;
inline constexpr std::array<const char*, kReservedCount> kReservedWords = {"<pad>", "<eos>", "<unk>", "<blank>",
                                                                         "<bos>"};

class Vocabulary {
 public:
  Vocabulary();

  // Appends a word; returns its id. Existing words keep their id.
  int add(const std::string& word, std::size_t frequency = 0);
  int id(const std::string& word) const;  // kUnk when absent
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  const std::string& word(int id) const;
  std::size_t frequency(int id) const { return freq_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  static bool is_reserved(int id) { return id >= 0 && id < kReservedCount; }

 private:
  std::vector<std::string> words_;
  std::vector<std::size_t> freq_;
  std::map<std::string, int> ids_;
};

}  // namespace ctsan

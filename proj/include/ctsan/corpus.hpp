#pragma once

// Vocabulary construction, caption encoding, the CTFV feature file codec and
// the synthetic planted-concept corpus.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ctsan/feature_clip.hpp"
#include "ctsan/vocab.hpp"

namespace ctsan {

// Lowercase, strip punctuation, split on whitespace. Reserved token spellings
// such as <blank> survive intact.
std::vector<std::string> tokenize(std::string_view text);

// Words occurring more than `min_count` times; ids follow descending
// frequency, then lexicographic order, after the reserved tokens.
inline constexpr std::size_t kVocabMinCount = 3;
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& captions,
                       std::size_t min_count = kVocabMinCount);

struct CandidateSelection {
  std::vector<std::string> words;
  std::size_t missing = 0;  // how many short of the requested count
};

// The `count` most frequent words of `tagged` (ties lexicographic). Words
// absent from `frequencies` count as zero.
CandidateSelection select_candidates(const std::vector<std::string>& tagged,
                                     const std::map<std::string, std::size_t>& frequencies, std::size_t count);

// Word ids with <unk> substitution, <eos> appended, then padded or truncated
// to max_len. Truncation keeps the trailing <eos>.
std::vector<int> encode_caption(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                std::size_t max_len);
// Word ids only, no <eos> and no padding.
std::vector<int> caption_ids(const std::vector<std::string>& tokens, const Vocabulary& vocab);
// Words up to the first <eos>, skipping <pad>, joined by single spaces.
std::string decode_caption(const std::vector<int>& ids, const Vocabulary& vocab);

void save_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);
void save_word_list(const std::vector<std::string>& words, const std::string& path);
std::vector<std::string> load_word_list(const std::string& path);

// CTFV feature files: "CTFV", u32 version, u32 N, H, W, C, then N*H*W*C f32
// values, frame-major and row-major. Little-endian throughout.
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kMaxFrames = 40;

void write_features(const FeatureClip& clip, const std::string& path);
// Clips longer than max_frames keep frames floor(i * N / max_frames).
FeatureClip load_features(const std::string& path, std::size_t max_frames = kMaxFrames);
std::vector<std::size_t> subsample_indices(std::size_t frames, std::size_t max_frames);

struct SyntheticSpec {
  std::size_t grid = 4;
  std::size_t channels = 8;  // D'
  std::size_t frames = 6;
  std::size_t concepts = 12;  // V_c
  std::size_t min_planted = 1;
  std::size_t max_planted = 3;
  std::size_t top_k = 3;
  double noise = 0.1;
  std::uint64_t seed = 1;
  std::size_t train_clips = 200;
  std::size_t val_clips = 40;
  std::size_t test_clips = 100;
  std::vector<std::string> concept_words;  // empty: the built-in lexicon

  void validate() const;
};

// key=value lines; unknown keys raise InputError.
SyntheticSpec parse_synthetic_spec(const std::string& text);
std::string format_synthetic_spec(const SyntheticSpec& spec);

// Concept words available when the spec names none.
const std::vector<std::string>& builtin_lexicon();

struct SyntheticItem {
  std::string id;
  std::string split;
  FeatureClip clip;
  std::vector<std::size_t> planted;                // concept indices, ascending
  std::vector<std::vector<std::size_t>> cells;     // per frame, the cell of each planted concept
  std::string caption;
  std::string fib_sentence;
  std::string fib_answer;
  std::vector<std::string> mc_choices;
  std::size_t mc_answer = 0;
};

struct SyntheticCorpus {
  SyntheticSpec spec;
  std::vector<std::string> concept_words;
  std::vector<std::vector<double>> signatures;  // unit norm, pairwise distance >= 1
  std::vector<SyntheticItem> items;
};

// One caption template per planted count; words appear in concept order.
std::string realize_caption(const std::vector<std::string>& words);

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

// Writes clips/*.ctfv, manifest.jsonl, vocab.txt, candidates.txt and spec.txt.
void write_dataset(const SyntheticCorpus& corpus, const std::string& dir);

struct Example {
  std::string id;
  std::string clip_path;  // relative to the dataset root
  std::string caption;
  std::vector<std::string> planted;
  std::string split;
  std::string fib_sentence;
  std::string fib_answer;
  std::vector<std::string> mc_choices;
  int mc_answer = -1;
};

struct Dataset {
  std::string root;
  std::vector<Example> examples;
  Vocabulary vocab;
  std::vector<std::string> candidates;

  std::vector<const Example*> split(const std::string& name) const;
  FeatureClip load_clip(const Example& example, std::size_t max_frames = kMaxFrames) const;
  // Vocabulary id of every candidate word.
  std::vector<int> candidate_ids() const;
  // 1 for each candidate among the planted words, else 0.
  std::vector<double> concept_targets(const Example& example) const;
};

// Reads manifest.jsonl plus vocab.txt and candidates.txt. Without vocab.txt
// the vocabulary is built from the training captions; without
// candidates.txt the planted words serve as the tagged list.
Dataset load_dataset(const std::string& dir, std::size_t candidate_count = 0);

}  // namespace ctsan

#include "ctsan/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "ctsan/config.hpp"
#include "ctsan/errors.hpp"
#include "ctsan/nn.hpp"

namespace ctsan {

namespace fs = std::filesystem;

Vocabulary::Vocabulary() {
  for (const char* w : kReservedWords) add(w);
}

int Vocabulary::add(const std::string& word, std::size_t frequency) {
  if (auto it = ids_.find(word); it != ids_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  freq_.push_back(frequency);
  ids_.emplace(word, id);
  return id;
}

int Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw UsageError("word id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

namespace {

bool is_reserved_spelling(const std::string& token) {
  return std::any_of(kReservedWords.begin(), kReservedWords.end(), [&](const char* w) { return token == w; });
}

std::vector<std::pair<std::string, std::size_t>> by_frequency(const std::map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> v(counts.begin(), counts.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return v;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (in >> raw) {
    std::string lower;
    for (char c : raw) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (is_reserved_spelling(lower)) {
      out.push_back(lower);
      continue;
    }
    std::string word;
    for (char c : lower)
      if (!std::ispunct(static_cast<unsigned char>(c))) word += c;
    if (!word.empty()) out.push_back(word);
  }
  return out;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& captions, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : captions)
    for (const auto& w : caption)
      if (!is_reserved_spelling(w)) ++counts[w];
  if (counts.empty()) throw UsageError("build_vocab: empty caption corpus");
  Vocabulary vocab;
  // std::map iterates lexicographically, so the stable sort breaks ties that way.
  for (const auto& [word, n] : by_frequency(counts))
    if (n > min_count) vocab.add(word, n);
  return vocab;
}

CandidateSelection select_candidates(const std::vector<std::string>& tagged,
                                     const std::map<std::string, std::size_t>& frequencies, std::size_t count) {
  std::map<std::string, std::size_t> pool;
  for (const auto& w : tagged) {
    auto it = frequencies.find(w);
    pool[w] = it == frequencies.end() ? 0 : it->second;
  }
  CandidateSelection out;
  for (const auto& [word, n] : by_frequency(pool)) {
    if (out.words.size() == count) break;
    out.words.push_back(word);
  }
  out.missing = count - out.words.size();
  return out;
}

std::vector<int> caption_ids(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

std::vector<int> encode_caption(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                std::size_t max_len) {
  if (max_len == 0) return {};
  std::vector<int> ids = caption_ids(tokens, vocab);
  if (ids.size() > max_len - 1) ids.resize(max_len - 1);
  ids.push_back(kEos);
  ids.resize(max_len, kPad);
  return ids;
}

std::string decode_caption(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad) continue;
    words.push_back(vocab.word(id));
  }
  return join(words);
}

void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::string text;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    text += vocab.words()[i] + "\t" + std::to_string(vocab.frequency(static_cast<int>(i))) + "\n";
  write_text_file(path, text);
}

Vocabulary load_vocab(const std::string& path) {
  std::istringstream in(read_text_file(path));
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string word = line.substr(0, tab);
    const std::size_t freq = tab == std::string::npos ? 0 : parse_uint(path, line.substr(tab + 1));
    if (line_no <= static_cast<std::size_t>(kReservedCount)) {
      if (word != kReservedWords[line_no - 1]) {
        throw InputError(path + ": line " + std::to_string(line_no) + " must be " + kReservedWords[line_no - 1]);
      }
      continue;
    }
    if (vocab.contains(word)) throw InputError(path + ": duplicate word " + word);
    vocab.add(word, freq);
  }
  return vocab;
}

void save_word_list(const std::vector<std::string>& words, const std::string& path) {
  std::string text;
  for (const auto& w : words) text += w + "\n";
  write_text_file(path, text);
}

std::vector<std::string> load_word_list(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return words;
}

void write_features(const FeatureClip& clip, const std::string& path) {
  if (clip.frames.empty()) throw UsageError("write_features: clip " + clip.id + " has no frames");
  const Shape shape = clip.frames.front().shape();
  if (shape.size() != 3) throw DimensionError("write_features: frames must be [H,W,C], got " + shape_string(shape));
  io::Writer w;
  w.bytes("CTFV");
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(clip.frames.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (const Tensor& f : clip.frames) {
    if (f.shape() != shape) {
      throw DimensionError("write_features: frame " + shape_string(f.shape()) + " differs from " +
                           shape_string(shape));
    }
    for (double v : f.data()) w.f32(static_cast<float>(v));
  }
  w.write_file(path);
}

std::vector<std::size_t> subsample_indices(std::size_t frames, std::size_t max_frames) {
  if (max_frames == 0) throw UsageError("max_frames must be positive");
  std::vector<std::size_t> idx;
  if (frames <= max_frames) {
    idx.resize(frames);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  for (std::size_t i = 0; i < max_frames; ++i) idx.push_back(i * frames / max_frames);
  return idx;
}

FeatureClip load_features(const std::string& path, std::size_t max_frames) {
  io::Reader r(path);
  if (r.remaining() < 4 || r.bytes(4) != "CTFV") throw FormatError(path + ": bad magic, expected CTFV", 0);
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version), version_at);
  }
  const std::uint64_t dims_at = r.offset();
  const std::uint64_t n = r.u32(), h = r.u32(), w = r.u32(), c = r.u32();
  if (n == 0 || h == 0 || w == 0 || c == 0) throw FormatError(path + ": zero extent in header", dims_at);
  const std::uint64_t per_frame = h * w * c;
  // Check the full payload up front so no partial clip is ever built.
  r.need(n * per_frame * 4);
  const auto keep = subsample_indices(static_cast<std::size_t>(n), max_frames);
  FeatureClip clip;
  clip.id = fs::path(path).stem().string();
  std::size_t next = 0;
  for (std::uint64_t f = 0; f < n; ++f) {
    std::vector<double> values(per_frame);
    for (auto& v : values) v = static_cast<double>(r.f32());
    if (next < keep.size() && keep[next] == f) {
      clip.frames.push_back(Tensor::from({h, w, c}, std::move(values)));
      ++next;
    }
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after frame data", r.offset());
  return clip;
}

const std::vector<std::string>& builtin_lexicon() {
  static const std::vector<std::string> words = {
      "apple", "bag",    "ball",   "bed",    "bike",   "boat",   "book",  "bottle", "box",    "bus",
      "car",   "cat",    "chair",  "clock",  "coat",   "cup",    "desk",  "dog",    "door",   "flower",
      "glass", "guitar", "hat",    "horse",  "key",    "knife",  "lamp",  "letter", "mirror", "phone",
      "piano", "plate",  "radio",  "ring",   "shoe",   "sofa",   "table", "train",  "tree",   "truck",
      "wall",  "watch",  "window", "camera", "candle", "basket", "drum",  "kite"};
  return words;
}

void SyntheticSpec::validate() const {
  if (grid == 0 || channels == 0 || frames == 0) throw UsageError("synthetic grid, channels and frames must be positive");
  if (min_planted == 0 || min_planted > max_planted || max_planted > 3) {
    throw UsageError("planted concepts per clip must satisfy 1 <= min <= max <= 3");
  }
  const std::size_t vocab_size = concept_words.empty() ? builtin_lexicon().size() : concept_words.size();
  if (concepts > vocab_size) {
    throw UsageError("synthetic spec asks for " + std::to_string(concepts) + " concepts but only " +
                     std::to_string(vocab_size) + " words are available");
  }
  if (max_planted > concepts) {
    throw UsageError("concepts per clip (" + std::to_string(max_planted) + ") exceed the " +
                     std::to_string(concepts) + " candidate concepts");
  }
  if (top_k < max_planted || top_k > concepts) {
    throw UsageError("synthetic spec needs concepts per clip <= K <= V_c");
  }
  if (concepts < 2 * max_planted) throw UsageError("distractor captions need at least 2 * max_planted concepts");
  if (max_planted > grid * grid) throw UsageError("more planted concepts than grid cells");
  if (noise < 0.0) throw UsageError("noise must be nonnegative");
}

SyntheticSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSpec s;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (k == "grid") s.grid = parse_uint(k, v);
    else if (k == "channels") s.channels = parse_uint(k, v);
    else if (k == "frames") s.frames = parse_uint(k, v);
    else if (k == "concepts") s.concepts = parse_uint(k, v);
    else if (k == "min_planted") s.min_planted = parse_uint(k, v);
    else if (k == "max_planted") s.max_planted = parse_uint(k, v);
    else if (k == "top_k") s.top_k = parse_uint(k, v);
    else if (k == "noise") s.noise = parse_double(k, v);
    else if (k == "seed") s.seed = parse_uint(k, v);
    else if (k == "train_clips") s.train_clips = parse_uint(k, v);
    else if (k == "val_clips") s.val_clips = parse_uint(k, v);
    else if (k == "test_clips") s.test_clips = parse_uint(k, v);
    else if (k == "concept_words") {
      s.concept_words.clear();
      std::istringstream in(v);
      std::string w;
      while (std::getline(in, w, ','))
        if (!w.empty()) s.concept_words.push_back(w);
    } else {
      throw InputError("unknown synthetic spec key '" + k + "'");
    }
  }
  return s;
}

std::string format_synthetic_spec(const SyntheticSpec& s) {
  char noise[32];
  std::snprintf(noise, sizeof noise, "%.17g", s.noise);
  KeyValues kv = {{"grid", std::to_string(s.grid)},
                  {"channels", std::to_string(s.channels)},
                  {"frames", std::to_string(s.frames)},
                  {"concepts", std::to_string(s.concepts)},
                  {"min_planted", std::to_string(s.min_planted)},
                  {"max_planted", std::to_string(s.max_planted)},
                  {"top_k", std::to_string(s.top_k)},
                  {"noise", noise},
                  {"seed", std::to_string(s.seed)},
                  {"train_clips", std::to_string(s.train_clips)},
                  {"val_clips", std::to_string(s.val_clips)},
                  {"test_clips", std::to_string(s.test_clips)}};
  if (!s.concept_words.empty()) {
    std::string words;
    for (const auto& w : s.concept_words) words += (words.empty() ? "" : ",") + w;
    kv.emplace_back("concept_words", words);
  }
  return format_key_values(kv);
}

std::string realize_caption(const std::vector<std::string>& words) {
  switch (words.size()) {
    case 1: return "someone sees the " + words[0];
    case 2: return "the " + words[0] + " is near the " + words[1];
    case 3: return "the " + words[0] + " and the " + words[1] + " follow the " + words[2];
    default: throw UsageError("captions mention one to three concepts, got " + std::to_string(words.size()));
  }
}

namespace {

std::vector<std::vector<double>> make_signatures(std::size_t count, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> sigs;
  std::size_t attempts = 0;
  while (sigs.size() < count) {
    if (++attempts > 100000) {
      throw UsageError("cannot place " + std::to_string(count) + " unit signatures at distance >= 1 in " +
                       std::to_string(dim) + " dimensions");
    }
    std::vector<double> v(dim);
    double norm = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-9) continue;
    for (auto& x : v) x /= norm;
    bool ok = true;
    for (const auto& s : sigs) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (s[k] - v[k]) * (s[k] - v[k]);
      if (d2 < 1.0) {
        ok = false;
        break;
      }
    }
    if (ok) sigs.push_back(std::move(v));
  }
  return sigs;
}

std::vector<std::size_t> sample_set(std::size_t n, std::size_t count, const std::vector<std::size_t>& exclude, Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) pool.push_back(i);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::size_t uniform_index(std::size_t lo, std::size_t hi, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::string> words_of(const std::vector<std::size_t>& idx, const std::vector<std::string>& words) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(words[i]);
  return out;
}

SyntheticItem make_item(const SyntheticCorpus& corpus, const std::string& split, std::size_t index, Rng& rng) {
  const SyntheticSpec& spec = corpus.spec;
  const std::size_t g = spec.grid, cells = g * g, D = spec.channels;
  SyntheticItem item;
  char id[64];
  std::snprintf(id, sizeof id, "%s_%04zu", split.c_str(), index);
  item.id = id;
  item.split = split;
  item.clip.id = id;
  const std::size_t count = uniform_index(spec.min_planted, spec.max_planted, rng);
  item.planted = sample_set(spec.concepts, count, {}, rng);

  // Grid walks: distinct start cells, then one step per frame to a free
  // neighbouring cell (or stay).
  std::vector<std::size_t> pos = sample_set(cells, count, {}, rng);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    if (f > 0) {
      for (std::size_t p = 0; p < count; ++p) {
        const std::size_t r = pos[p] / g, c = pos[p] % g;
        std::vector<std::size_t> options = {pos[p]};
        if (r > 0) options.push_back(pos[p] - g);
        if (r + 1 < g) options.push_back(pos[p] + g);
        if (c > 0) options.push_back(pos[p] - 1);
        if (c + 1 < g) options.push_back(pos[p] + 1);
        const std::size_t pick = options[uniform_index(0, options.size() - 1, rng)];
        const bool taken = std::find(pos.begin(), pos.end(), pick) != pos.end() && pick != pos[p];
        if (!taken) pos[p] = pick;
      }
    }
    std::vector<double> values(cells * D);
    for (auto& v : values) v = spec.noise * noise(rng);
    for (std::size_t p = 0; p < count; ++p)
      for (std::size_t k = 0; k < D; ++k) values[pos[p] * D + k] += corpus.signatures[item.planted[p]][k];
    for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
    item.clip.frames.push_back(Tensor::from({g, g, D}, std::move(values)));
    item.cells.push_back(pos);
  }

  const auto planted_words = words_of(item.planted, corpus.concept_words);
  item.caption = realize_caption(planted_words);

  const std::size_t blank = uniform_index(0, count - 1, rng);
  auto fib_words = planted_words;
  item.fib_answer = fib_words[blank];
  fib_words[blank] = kReservedWords[kBlank];
  item.fib_sentence = realize_caption(fib_words);

  std::set<std::string> used = {item.caption};
  std::vector<std::string> distractors;
  for (std::size_t attempt = 0; distractors.size() < 4; ++attempt) {
    if (attempt == 1000) throw UsageError("too few concepts to draw four distinct distractor captions");
    const std::size_t n = uniform_index(spec.min_planted, spec.max_planted, rng);
    std::string caption = realize_caption(words_of(sample_set(spec.concepts, n, item.planted, rng), corpus.concept_words));
    if (used.insert(caption).second) distractors.push_back(caption);
  }
  item.mc_answer = uniform_index(0, 4, rng);
  for (std::size_t i = 0, d = 0; i < 5; ++i)
    item.mc_choices.push_back(i == item.mc_answer ? item.caption : distractors[d++]);
  return item;
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus corpus;
  corpus.spec = spec;
  const auto& lexicon = spec.concept_words.empty() ? builtin_lexicon() : spec.concept_words;
  corpus.concept_words.assign(lexicon.begin(), lexicon.begin() + static_cast<std::ptrdiff_t>(spec.concepts));
  Rng rng(spec.seed);
  corpus.signatures = make_signatures(spec.concepts, spec.channels, rng);
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", spec.train_clips}, {"val", spec.val_clips}, {"test", spec.test_clips}};
  for (const auto& [name, n] : splits)
    for (std::size_t i = 0; i < n; ++i) corpus.items.push_back(make_item(corpus, name, i, rng));
  return corpus;
}

void write_dataset(const SyntheticCorpus& corpus, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "clips");
  std::string manifest;
  std::vector<std::vector<std::string>> train_captions;
  std::map<std::string, std::size_t> freq;
  for (const auto& item : corpus.items) {
    const std::string rel = "clips/" + item.id + ".ctfv";
    write_features(item.clip, (fs::path(dir) / rel).string());
    nlohmann::ordered_json j;
    j["id"] = item.id;
    j["clip"] = rel;
    j["caption"] = item.caption;
    j["planted"] = words_of(item.planted, corpus.concept_words);
    j["split"] = item.split;
    j["fib"] = {{"sentence", item.fib_sentence}, {"answer", item.fib_answer}};
    j["mc"] = {{"choices", item.mc_choices}, {"answer", item.mc_answer}};
    manifest += j.dump() + "\n";
    if (item.split == "train") {
      train_captions.push_back(tokenize(item.caption));
      for (const auto& w : train_captions.back()) ++freq[w];
    }
  }
  write_text_file((fs::path(dir) / "manifest.jsonl").string(), manifest);
  if (!train_captions.empty()) save_vocab(build_vocab(train_captions), (fs::path(dir) / "vocab.txt").string());
  save_word_list(select_candidates(corpus.concept_words, freq, corpus.spec.concepts).words,
                 (fs::path(dir) / "candidates.txt").string());
  write_text_file((fs::path(dir) / "spec.txt").string(), format_synthetic_spec(corpus.spec));
}

std::vector<const Example*> Dataset::split(const std::string& name) const {
  std::vector<const Example*> out;
  for (const auto& e : examples)
    if (e.split == name) out.push_back(&e);
  return out;
}

FeatureClip Dataset::load_clip(const Example& example, std::size_t max_frames) const {
  FeatureClip clip = load_features((fs::path(root) / example.clip_path).string(), max_frames);
  clip.id = example.id;
  return clip;
}

std::vector<int> Dataset::candidate_ids() const {
  std::vector<int> ids;
  for (const auto& w : candidates) ids.push_back(vocab.id(w));
  return ids;
}

std::vector<double> Dataset::concept_targets(const Example& example) const {
  std::vector<double> t(candidates.size(), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (std::find(example.planted.begin(), example.planted.end(), candidates[i]) != example.planted.end()) t[i] = 1.0;
  return t;
}

Dataset load_dataset(const std::string& dir, std::size_t candidate_count) {
  Dataset ds;
  ds.root = dir;
  const std::string manifest_path = (fs::path(dir) / "manifest.jsonl").string();
  std::istringstream in(read_text_file(manifest_path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
    try {
      Example ex;
      ex.clip_path = j.at("clip").get<std::string>();
      ex.id = j.contains("id") ? j["id"].get<std::string>() : fs::path(ex.clip_path).stem().string();
      ex.caption = j.at("caption").get<std::string>();
      ex.planted = j.value("planted", std::vector<std::string>{});
      ex.split = j.at("split").get<std::string>();
      if (j.contains("fib")) {
        ex.fib_sentence = j["fib"].at("sentence").get<std::string>();
        ex.fib_answer = j["fib"].at("answer").get<std::string>();
      }
      if (j.contains("mc")) {
        ex.mc_choices = j["mc"].at("choices").get<std::vector<std::string>>();
        ex.mc_answer = j["mc"].at("answer").get<int>();
        if (ex.mc_answer < 0 || static_cast<std::size_t>(ex.mc_answer) >= ex.mc_choices.size()) {
          throw InputError(where + ": multiple-choice answer out of range");
        }
      }
      ds.examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  if (ds.examples.empty()) throw InputError(manifest_path + ": no examples");

  std::vector<std::vector<std::string>> train;
  std::map<std::string, std::size_t> freq;
  for (const auto* e : ds.split("train")) {
    train.push_back(tokenize(e->caption));
    for (const auto& w : train.back()) ++freq[w];
  }
  const fs::path vocab_path = fs::path(dir) / "vocab.txt";
  if (fs::exists(vocab_path)) {
    ds.vocab = load_vocab(vocab_path.string());
  } else {
    if (train.empty()) throw InputError(dir + ": no vocab.txt and no training captions to build one");
    ds.vocab = build_vocab(train);
  }
  const fs::path cand_path = fs::path(dir) / "candidates.txt";
  if (fs::exists(cand_path)) {
    ds.candidates = load_word_list(cand_path.string());
    if (candidate_count > 0 && candidate_count < ds.candidates.size()) ds.candidates.resize(candidate_count);
  } else {
    std::set<std::string> tagged;
    for (const auto& e : ds.examples) tagged.insert(e.planted.begin(), e.planted.end());
    const std::size_t want = candidate_count > 0 ? candidate_count : tagged.size();
    ds.candidates = select_candidates({tagged.begin(), tagged.end()}, freq, want).words;
  }
  return ds;
}

}  // namespace ctsan

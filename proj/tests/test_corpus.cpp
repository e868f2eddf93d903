#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "ctsan/config.hpp"
#include "ctsan/corpus.hpp"
#include "test_util.hpp"

namespace ctsan {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ctsan_corpus_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::vector<std::string> repeat(const std::string& w, int n) { return std::vector<std::string>(n, w); }

TEST(VocabularyTest, ReservedIdsAreFixed) {
  Vocabulary v;
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.id("<pad>"), kPad);
  EXPECT_EQ(v.id("<eos>"), kEos);
  EXPECT_EQ(v.id("<unk>"), kUnk);
  EXPECT_EQ(v.id("<blank>"), kBlank);
  EXPECT_EQ(v.id("<bos>"), kBos);
  EXPECT_EQ(v.id("never"), kUnk);
  EXPECT_THROW(v.word(5), UsageError);
}

TEST(VocabularyTest, ThresholdBoundary) {
  Vocabulary four = build_vocab({repeat("dog", 4)});
  ASSERT_EQ(four.size(), 6u);
  EXPECT_EQ(four.word(5), "dog");
  EXPECT_EQ(four.frequency(5), 4u);
  Vocabulary three = build_vocab({repeat("dog", 3)});
  EXPECT_EQ(three.size(), 5u);
  EXPECT_THROW(build_vocab({}), UsageError);
  EXPECT_THROW(build_vocab({{}, {}}), UsageError);
}

TEST(VocabularyTest, OrderedByFrequencyThenWord) {
  std::vector<std::vector<std::string>> corpus = {repeat("zebra", 6), repeat("cat", 5), repeat("ant", 5),
                                                  repeat("bee", 9), {"<blank>", "<blank>", "<blank>", "<blank>"}};
  Vocabulary v = build_vocab(corpus);
  EXPECT_EQ(v.words(), (std::vector<std::string>{"<pad>", "<eos>", "<unk>", "<blank>", "<bos>", "bee", "zebra",
                                                 "ant", "cat"}));
  // Ids form a bijection with words.
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.word(static_cast<int>(i))), static_cast<int>(i));
}

TEST(VocabularyTest, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("vocab");
  Vocabulary v = build_vocab({repeat("bee", 9), repeat("ant", 5)});
  save_vocab(v, (dir / "vocab.txt").string());
  Vocabulary back = load_vocab((dir / "vocab.txt").string());
  EXPECT_EQ(back.words(), v.words());
  EXPECT_EQ(back.frequency(5), 9u);
  write_bytes(dir / "bad.txt", "<eos>\t0\n");
  EXPECT_THROW(load_vocab((dir / "bad.txt").string()), InputError);
  fs::remove_all(dir);
}

TEST(CandidatesTest, TopByFrequencyWithLexicographicTies) {
  const std::map<std::string, std::size_t> freq = {{"dog", 10}, {"cat", 7}, {"bat", 7}, {"run", 2}};
  auto sel = select_candidates({"run", "cat", "dog", "bat"}, freq, 3);
  EXPECT_EQ(sel.words, (std::vector<std::string>{"dog", "bat", "cat"}));
  EXPECT_EQ(sel.missing, 0u);
  auto all = select_candidates({"run", "cat", "dog", "bat", "new"}, freq, 9);
  EXPECT_EQ(all.words, (std::vector<std::string>{"dog", "bat", "cat", "run", "new"}));
  EXPECT_EQ(all.missing, 4u);
}

TEST(CaptionTest, Tokenize) {
  EXPECT_EQ(tokenize("  The DOG, runs!  "), (std::vector<std::string>{"the", "dog", "runs"}));
  EXPECT_EQ(tokenize("a <BLANK> b"), (std::vector<std::string>{"a", "<blank>", "b"}));
  EXPECT_EQ(tokenize("... !"), std::vector<std::string>{});
}

TEST(CaptionTest, EncodeExamples) {
  Vocabulary v = build_vocab({repeat("dog", 4), repeat("cat", 4)});
  EXPECT_EQ(encode_caption({}, v, 4), (std::vector<int>{kEos, kPad, kPad, kPad}));
  EXPECT_EQ(encode_caption({"x", "y"}, v, 4), (std::vector<int>{kUnk, kUnk, kEos, kPad}));
  EXPECT_EQ(encode_caption({"dog", "cat", "dog", "cat"}, v, 3), (std::vector<int>{6, 5, kEos}));
  EXPECT_EQ(decode_caption({5, 6, kEos, 5}, v), "cat dog");
}

TEST(CaptionTest, RoundTripOverRandomSentences) {
  std::vector<std::vector<std::string>> corpus;
  const std::vector<std::string> words = {"a", "man", "opens", "the", "door", "slowly", "and", "leaves"};
  for (const auto& w : words) corpus.push_back(repeat(w, 5));
  Vocabulary v = build_vocab(corpus);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> sentence(std::uniform_int_distribution<std::size_t>(0, 10)(rng));
    for (auto& w : sentence) w = words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
    std::string text;
    for (const auto& w : sentence) text += (text.empty() ? "" : " ") + w;
    EXPECT_EQ(decode_caption(encode_caption(tokenize(text), v, 12), v), text);
  }
}

FeatureClip random_clip(std::size_t frames, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  FeatureClip clip;
  for (std::size_t n = 0; n < frames; ++n) {
    std::vector<double> values(h * w * c);
    for (auto& v : values) v = static_cast<float>(std::uniform_real_distribution<double>(-3, 3)(rng));
    clip.frames.push_back(Tensor::from({h, w, c}, std::move(values)));
  }
  return clip;
}

TEST(FeatureFileTest, RoundTripIsBitExact) {
  const fs::path dir = temp_dir("ctfv");
  Rng rng(2);
  FeatureClip clip = random_clip(8, 7, 5, 3, rng);
  const std::string path = (dir / "a.ctfv").string();
  write_features(clip, path);
  FeatureClip back = load_features(path);
  EXPECT_EQ(back.id, "a");
  ASSERT_EQ(back.frames.size(), 8u);
  for (std::size_t n = 0; n < 8; ++n) {
    ASSERT_EQ(back.frames[n].shape(), (Shape{7, 5, 3}));
    EXPECT_EQ(std::memcmp(back.frames[n].data().data(), clip.frames[n].data().data(), 105 * sizeof(double)), 0);
  }
  const std::string bytes = file_bytes(path);
  EXPECT_EQ(bytes.size(), 24u + 8 * 105 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "CTFV");
  const unsigned char header[] = {1, 0, 0, 0, 8, 0, 0, 0, 7, 0, 0, 0, 5, 0, 0, 0, 3, 0, 0, 0};
  EXPECT_EQ(std::memcmp(bytes.data() + 4, header, sizeof header), 0);
  float first;
  std::memcpy(&first, bytes.data() + 24, 4);
  EXPECT_EQ(static_cast<double>(first), clip.frames[0][0]);
  fs::remove_all(dir);
}

TEST(FeatureFileTest, CorruptFilesReportOffsets) {
  const fs::path dir = temp_dir("ctfv_bad");
  Rng rng(3);
  const std::string good = (dir / "good.ctfv").string();
  write_features(random_clip(2, 4, 4, 2, rng), good);
  const std::string bytes = file_bytes(good);
  auto offset_of = [&](const std::string& content) -> std::int64_t {
    write_bytes(dir / "x.ctfv", content);
    try {
      load_features((dir / "x.ctfv").string());
    } catch (const FormatError& e) {
      return static_cast<std::int64_t>(e.offset());
    }
    return -1;
  };
  EXPECT_EQ(offset_of("CTFX" + bytes.substr(4)), 0);
  std::string version = bytes;
  version[4] = 2;
  EXPECT_EQ(offset_of(version), 4);
  EXPECT_EQ(offset_of(bytes.substr(0, 10)), 8);
  EXPECT_EQ(offset_of(bytes.substr(0, bytes.size() - 1)), 24);
  EXPECT_EQ(offset_of(bytes + "z"), static_cast<std::int64_t>(bytes.size()));
  std::string zero = bytes;
  zero[8] = 0;
  EXPECT_EQ(offset_of(zero), 8);
  EXPECT_THROW(load_features((dir / "missing.ctfv").string()), InputError);
  fs::remove_all(dir);
}

TEST(FeatureFileTest, LongClipsAreSubsampled) {
  EXPECT_EQ(subsample_indices(3, 40), (std::vector<std::size_t>{0, 1, 2}));
  const auto idx = subsample_indices(100, 40);
  ASSERT_EQ(idx.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(idx[i], i * 100 / 40);
  EXPECT_THROW(subsample_indices(3, 0), UsageError);

  const fs::path dir = temp_dir("ctfv_long");
  FeatureClip clip;
  for (int n = 0; n < 100; ++n) clip.frames.push_back(Tensor::full({1, 1, 1}, n));
  write_features(clip, (dir / "long.ctfv").string());
  FeatureClip back = load_features((dir / "long.ctfv").string());
  ASSERT_EQ(back.frames.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(back.frames[i][0], static_cast<double>(i * 100 / 40));
  fs::remove_all(dir);
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_clips = 30;
  s.val_clips = 5;
  s.test_clips = 5;
  return s;
}

std::size_t nearest_signature(const SyntheticCorpus& c, std::span<const double> cell) {
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t i = 0; i < c.signatures.size(); ++i) {
    double d = 0.0;
    for (std::size_t k = 0; k < cell.size(); ++k) d += (cell[k] - c.signatures[i][k]) * (cell[k] - c.signatures[i][k]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

TEST(SyntheticTest, SignaturesAreUnitAndSeparated) {
  SyntheticCorpus c = generate_synthetic(small_spec());
  ASSERT_EQ(c.signatures.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    double n = 0.0;
    for (double v : c.signatures[i]) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < 8; ++k) d += (c.signatures[i][k] - c.signatures[j][k]) * (c.signatures[i][k] - c.signatures[j][k]);
      EXPECT_GE(d, 1.0);
    }
  }
}

TEST(SyntheticTest, NoiselessPlantedCellsEqualSignatures) {
  SyntheticSpec s = small_spec();
  s.noise = 0.0;
  SyntheticCorpus c = generate_synthetic(s);
  for (const auto& item : c.items) {
    for (std::size_t f = 0; f < item.clip.frames.size(); ++f) {
      const auto values = item.clip.frames[f].data();
      for (std::size_t cell = 0; cell < 16; ++cell) {
        const auto it = std::find(item.cells[f].begin(), item.cells[f].end(), cell);
        for (std::size_t k = 0; k < 8; ++k) {
          const double expected =
              it == item.cells[f].end()
                  ? 0.0
                  : static_cast<float>(c.signatures[item.planted[static_cast<std::size_t>(it - item.cells[f].begin())]][k]);
          EXPECT_EQ(values[cell * 8 + k], expected);
        }
      }
    }
  }
}

TEST(SyntheticTest, NearestSignatureOracleIsPerfect) {
  SyntheticSpec s = small_spec();
  s.train_clips = 200;
  SyntheticCorpus c = generate_synthetic(s);
  std::size_t cells = 0, correct = 0;
  for (const auto& item : c.items)
    for (std::size_t f = 0; f < item.clip.frames.size(); ++f) {
      const auto values = item.clip.frames[f].data();
      for (std::size_t p = 0; p < item.planted.size(); ++p) {
        ++cells;
        correct += nearest_signature(c, values.subspan(item.cells[f][p] * 8, 8)) == item.planted[p];
      }
    }
  EXPECT_GE(cells, 1000u);
  EXPECT_EQ(correct, cells);
}

TEST(SyntheticTest, WalksStayOnGridAndApart) {
  SyntheticCorpus c = generate_synthetic(small_spec());
  for (const auto& item : c.items) {
    ASSERT_EQ(item.cells.size(), 6u);
    for (std::size_t f = 0; f < 6; ++f) {
      std::set<std::size_t> distinct(item.cells[f].begin(), item.cells[f].end());
      EXPECT_EQ(distinct.size(), item.planted.size());
      for (std::size_t p = 0; p < item.planted.size(); ++p) {
        EXPECT_LT(item.cells[f][p], 16u);
        if (f == 0) continue;
        const auto a = item.cells[f - 1][p], b = item.cells[f][p];
        const auto dr = std::abs(static_cast<int>(a / 4) - static_cast<int>(b / 4));
        const auto dc = std::abs(static_cast<int>(a % 4) - static_cast<int>(b % 4));
        EXPECT_LE(dr + dc, 1);
      }
    }
  }
}

TEST(SyntheticTest, TaskVariantsMatchPlantedWords) {
  SyntheticCorpus c = generate_synthetic(small_spec());
  for (const auto& item : c.items) {
    std::set<std::string> planted;
    for (std::size_t i : item.planted) planted.insert(c.concept_words[i]);
    std::set<std::string> mentioned;
    for (const auto& w : tokenize(item.caption))
      if (std::find(c.concept_words.begin(), c.concept_words.end(), w) != c.concept_words.end()) mentioned.insert(w);
    EXPECT_EQ(mentioned, planted) << item.caption;

    const auto fib = tokenize(item.fib_sentence);
    EXPECT_EQ(std::count(fib.begin(), fib.end(), "<blank>"), 1);
    EXPECT_TRUE(planted.count(item.fib_answer));

    ASSERT_EQ(item.mc_choices.size(), 5u);
    EXPECT_EQ(item.mc_choices[item.mc_answer], item.caption);
    for (std::size_t i = 0; i < 5; ++i) {
      if (i == item.mc_answer) continue;
      for (const auto& w : tokenize(item.mc_choices[i])) EXPECT_FALSE(planted.count(w)) << item.mc_choices[i];
    }
    EXPECT_EQ(std::set<std::string>(item.mc_choices.begin(), item.mc_choices.end()).size(), 5u);
  }
}

TEST(SyntheticTest, SpecValidation) {
  SyntheticSpec s = small_spec();
  s.max_planted = 4;
  EXPECT_THROW(generate_synthetic(s), UsageError);
  s = small_spec();
  s.concepts = 2;
  s.top_k = 2;
  EXPECT_THROW(generate_synthetic(s), UsageError);
  s = small_spec();
  s.concept_words = {"a", "b", "c"};
  EXPECT_THROW(generate_synthetic(s), UsageError);
  s = small_spec();
  s.top_k = 2;
  EXPECT_THROW(generate_synthetic(s), UsageError);
}

TEST(SyntheticTest, SpecTextRoundTrip) {
  SyntheticSpec s = small_spec();
  s.noise = 0.125;
  s.concept_words = {"x", "y"};
  SyntheticSpec back = parse_synthetic_spec(format_synthetic_spec(s));
  EXPECT_EQ(format_synthetic_spec(back), format_synthetic_spec(s));
  EXPECT_EQ(back.concept_words, s.concept_words);
  EXPECT_THROW(parse_synthetic_spec("colour = red"), InputError);
}

TEST(SyntheticTest, SameSeedGivesIdenticalBytes) {
  const fs::path a = temp_dir("gen_a"), b = temp_dir("gen_b");
  write_dataset(generate_synthetic(small_spec()), a.string());
  write_dataset(generate_synthetic(small_spec()), b.string());
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const fs::path other = b / fs::relative(entry.path(), a);
    EXPECT_EQ(file_bytes(entry.path()), file_bytes(other)) << entry.path();
  }
  EXPECT_EQ(files, 44u);  // 40 clips plus manifest, vocab, candidates and spec
  SyntheticSpec other = small_spec();
  other.seed = 2;
  write_dataset(generate_synthetic(other), b.string());
  EXPECT_NE(file_bytes(a / "manifest.jsonl"), file_bytes(b / "manifest.jsonl"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DatasetTest, LoadsWhatWasWritten) {
  const fs::path dir = temp_dir("dataset");
  SyntheticCorpus c = generate_synthetic(small_spec());
  write_dataset(c, dir.string());
  Dataset ds = load_dataset(dir.string());
  ASSERT_EQ(ds.examples.size(), 40u);
  EXPECT_EQ(ds.split("train").size(), 30u);
  EXPECT_EQ(ds.split("test").size(), 5u);
  EXPECT_EQ(ds.candidates.size(), 12u);
  const auto ids = ds.candidate_ids();
  for (std::size_t i = 0; i < ids.size(); ++i)
    EXPECT_EQ(ids[i], ds.vocab.contains(ds.candidates[i]) ? ds.vocab.id(ds.candidates[i]) : kUnk);
  const Example& ex = ds.examples[3];
  EXPECT_EQ(ex.caption, c.items[3].caption);
  EXPECT_EQ(ex.mc_answer, static_cast<int>(c.items[3].mc_answer));
  const auto targets = ds.concept_targets(ex);
  EXPECT_EQ(std::count(targets.begin(), targets.end(), 1.0), static_cast<std::ptrdiff_t>(ex.planted.size()));
  FeatureClip clip = ds.load_clip(ex);
  EXPECT_EQ(clip.id, ex.id);
  ASSERT_EQ(clip.frames.size(), 6u);
  EXPECT_EQ(clip.frames[2].data()[5], c.items[3].clip.frames[2].data()[5]);

  // Without the word lists the loader rebuilds them from the manifest.
  fs::remove(dir / "vocab.txt");
  fs::remove(dir / "candidates.txt");
  Dataset rebuilt = load_dataset(dir.string());
  EXPECT_EQ(rebuilt.vocab.words(), ds.vocab.words());
  EXPECT_EQ(std::set<std::string>(rebuilt.candidates.begin(), rebuilt.candidates.end()),
            std::set<std::string>(ds.candidates.begin(), ds.candidates.end()));

  write_bytes(dir / "manifest.jsonl", "{\"clip\": \"x.ctfv\"}\n");
  EXPECT_THROW(load_dataset(dir.string()), InputError);
  write_bytes(dir / "manifest.jsonl", "not json\n");
  EXPECT_THROW(load_dataset(dir.string()), InputError);
  fs::remove_all(dir);
}

TEST(ConfigTest, KeyValueParsing) {
  const KeyValues kv = parse_key_values("# comment\n a = 1 \n\nb=two # trailing\n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"a", "1"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"b", "two"}));
  EXPECT_THROW(parse_key_values("a = 1\na = 2"), InputError);
  EXPECT_THROW(parse_key_values("novalue"), InputError);
}

TEST(ConfigTest, ModelKeysRoundTrip) {
  ModelConfig c;
  c.task = Task::kRetrieval;
  c.lambda1 = 0.1 + 0.2;
  c.detector.seed_traces = false;
  c.sketch_seed = 99;
  ModelConfig back;
  const KeyValues rest = apply_model_keys(parse_key_values(format_key_values(model_keys(c))), back);
  EXPECT_TRUE(rest.empty());
  EXPECT_EQ(model_keys(back), model_keys(c));
  EXPECT_EQ(back.lambda1, c.lambda1);
  EXPECT_EQ(back.task, Task::kRetrieval);
  EXPECT_FALSE(back.detector.seed_traces);
  ModelConfig other;
  EXPECT_EQ(apply_model_keys({{"lr", "0.1"}}, other).size(), 1u);
  EXPECT_THROW(apply_model_keys({{"hidden", "-3"}}, other), InputError);
  EXPECT_THROW(apply_model_keys({{"layer_norm", "maybe"}}, other), InputError);
}

TEST(ConfigTest, FnvKnownValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

}  // namespace
}  // namespace ctsan

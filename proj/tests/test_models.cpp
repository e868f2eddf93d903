#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ctsan/models.hpp"
#include "ctsan/ops.hpp"
#include "test_util.hpp"

namespace ctsan {
namespace {

using testing::random_tensor;

constexpr std::size_t kCandidates = 10;

ModelConfig tiny(Task task) {
  ModelConfig c;
  c.task = task;
  c.detector.raw_channels = 4;
  c.detector.feature_dim = 8;
  c.detector.hidden = 8;
  c.detector.candidates = kCandidates;
  c.detector.attn_channels = 4;
  c.vocab_size = 20;
  c.word_dim = 6;
  c.hidden = 8;
  c.depth = 2;
  c.top_k = 3;
  c.dropout = 0.0;
  c.sketch_dim = 16;
  c.maxout_dim = 5;
  return c;
}

std::vector<int> candidate_words() {
  std::vector<int> w(kCandidates);
  std::iota(w.begin(), w.end(), kReservedCount);
  return w;
}

// Spreads the confidence biases so the top-K set is stable under the small
// perturbations of a gradient check.
TaskModel make_model(const ModelConfig& c, std::uint64_t seed = 1) {
  TaskModel m = TaskModel::create(c, candidate_words(), seed);
  auto b = m.detector.confidence.bias.mutable_data();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 3.0 - 0.7 * static_cast<double>(i);
  return m;
}

FeatureClip random_clip(std::size_t frames, Rng& rng, const std::string& id = "clip") {
  FeatureClip clip;
  clip.id = id;
  for (std::size_t n = 0; n < frames; ++n) clip.frames.push_back(random_tensor({4, 4, 4}, rng, -1, 1, false));
  return clip;
}

std::vector<double> targets_for(std::initializer_list<std::size_t> on) {
  std::vector<double> t(kCandidates, 0.0);
  for (std::size_t i : on) t[i] = 1.0;
  return t;
}

double oracle_regularizer(const Tensor& a) {
  const std::size_t T = a.dim(0), K = a.dim(1);
  double col = 0.0, row = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) s += a.at(t, i);
    col += s * s;
  }
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < K; ++i) s += a.at(t, i);
    row += std::sqrt(s);
  }
  return std::sqrt(col) + row * row;
}

double oracle_concept_loss(const Tensor& p, const std::vector<double>& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * std::log(p[i]) + (1 - t[i]) * std::log(1 - p[i]);
  return -s / static_cast<double>(t.size());
}

class ModelsTest : public ::testing::Test {
 protected:
  PrecisionScope precision_{Precision::kF64};
};

TEST_F(ModelsTest, TaskNamesRoundTrip) {
  for (Task t : {Task::kConcept, Task::kDescription, Task::kFib, Task::kMultipleChoice, Task::kRetrieval})
    EXPECT_EQ(parse_task(task_name(t)), t);
  EXPECT_THROW(parse_task("caption"), UsageError);
}

TEST_F(ModelsTest, CreateValidatesConfiguration) {
  ModelConfig c = tiny(Task::kDescription);
  EXPECT_THROW(TaskModel::create(c, {1, 2}, 1), DimensionError);
  std::vector<int> outside = candidate_words();
  outside[0] = 20;
  EXPECT_THROW(TaskModel::create(c, outside, 1), DimensionError);
  c.top_k = 11;
  EXPECT_THROW(TaskModel::create(c, candidate_words(), 1), UsageError);
  c = tiny(Task::kDescription);
  c.vocab_size = 5;
  EXPECT_THROW(TaskModel::create(c, candidate_words(), 1), UsageError);
  c = tiny(Task::kRetrieval);
  c.maxout_pieces = 1;
  EXPECT_THROW(TaskModel::create(c, candidate_words(), 1), UsageError);
}

TEST_F(ModelsTest, ConceptTaskHoldsOnlyTheDetector) {
  TaskModel m = TaskModel::create(tiny(Task::kConcept), {}, 1);
  for (const auto& [name, t] : m.store.entries()) EXPECT_EQ(name.rfind("detector.", 0), 0u) << name;
}

TEST_F(ModelsTest, FrozenDetectorIsNotTrainable) {
  ModelConfig c = tiny(Task::kDescription);
  c.finetune_detector = false;
  TaskModel m = make_model(c);
  for (const auto& [name, t] : m.trainable()) EXPECT_NE(name.rfind("detector.", 0), 0u) << name;
  EXPECT_LT(m.trainable().size(), m.store.size());

  Rng rng(2);
  FeatureClip clip = random_clip(2, rng);
  const int caption[] = {6, 7};
  const int gold[] = {6, 7, kEos};
  Tape tape;
  {
    TapeScope scope(tape);
    ClipContext ctx = prepare_clip(m, clip, RunMode{});
    DecoderOutput out = teacher_forced(m, ctx, caption, RunMode{});
    Tensor loss = description_loss(out.log_probs, gold, out.beta, out.gamma, Tensor(), {}, 1e-3, 1.0);
    tape.backward(loss);
  }
  for (const auto& [name, t] : m.store.with_prefix("detector.")) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) EXPECT_EQ(g, 0.0) << name;
  }
  EXPECT_TRUE(std::any_of(m.embedding.grad().begin(), m.embedding.grad().end(), [](double g) { return g != 0; }));
}

TEST_F(ModelsTest, EncodesSingleFrameClip) {
  TaskModel m = make_model(tiny(Task::kDescription));
  Rng rng(3);
  ClipContext ctx = prepare_clip(m, random_clip(1, rng), RunMode{});
  ASSERT_EQ(ctx.video.states.size(), 1u);
  EXPECT_EQ(ctx.video.states[0].shape(), (Shape{1, 8}));
  EXPECT_TRUE(ctx.video.final.top().same_as(ctx.video.states[0]));
  EXPECT_EQ(ctx.concepts.shape(), (Shape{3, 6}));
  EXPECT_EQ(ctx.detection.concepts.words, (std::vector<int>{5, 6, 7}));
}

TEST_F(ModelsTest, ConstantClipEncodesDeterministically) {
  TaskModel m = make_model(tiny(Task::kDescription));
  Rng rng(4);
  FeatureClip one = random_clip(1, rng);
  FeatureClip clip;
  for (int n = 0; n < 40; ++n) clip.frames.push_back(one.frames[0]);
  ClipContext ctx = prepare_clip(m, clip, RunMode{});
  ASSERT_EQ(ctx.video.states.size(), 40u);
  for (std::size_t n = 1; n < 40; ++n) EXPECT_EQ(ctx.detection.pooled[n].data()[0], ctx.detection.pooled[0].data()[0]);
  ClipContext again = prepare_clip(m, clip, RunMode{});
  for (std::size_t n = 0; n < 40; ++n) {
    const Tensor a = ctx.video.states[n], b = again.video.states[n];
    for (std::size_t k = 0; k < a.numel(); ++k) {
      EXPECT_EQ(a[k], b[k]);
      EXPECT_LT(std::abs(a[k]), 1.0);
    }
  }
}

TEST_F(ModelsTest, DescribeRespectsMaxLen) {
  TaskModel m = make_model(tiny(Task::kDescription));
  for (double& v : m.output.bias.mutable_data()) v = 0.0;
  m.output.bias.mutable_data()[kEos] = -50.0;
  Rng rng(5);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  Description d = describe(m, ctx, 1);
  ASSERT_EQ(d.tokens.size(), 1u);
  EXPECT_EQ(d.steps.size(), 1u);
  EXPECT_FALSE(Vocabulary::is_reserved(d.tokens[0]));
  EXPECT_EQ(describe(m, ctx, 7).tokens.size(), 7u);
  EXPECT_THROW(describe(m, ctx, 0), UsageError);
}

TEST_F(ModelsTest, DescribeStopsAtEos) {
  TaskModel m = make_model(tiny(Task::kDescription));
  for (double& v : m.output.weight.mutable_data()) v = 0.0;
  for (double& v : m.output.bias.mutable_data()) v = 0.0;
  m.output.bias.mutable_data()[kEos] = 10.0;
  Rng rng(6);
  Description d = describe(m, prepare_clip(m, random_clip(2, rng), RunMode{}), 20);
  EXPECT_EQ(d.tokens, (std::vector<int>{kEos}));
  EXPECT_TRUE(d.words().empty());
  double s = 0.0;
  for (double p : d.steps[0]) s += p;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST_F(ModelsTest, DescribeNeverEmitsPaddingBlankOrBos) {
  TaskModel m = make_model(tiny(Task::kDescription));
  for (double& v : m.output.weight.mutable_data()) v = 0.0;
  auto b = m.output.bias.mutable_data();
  b[kPad] = b[kBlank] = b[kBos] = 10.0;
  b[9] = 5.0;
  Rng rng(7);
  Description d = describe(m, prepare_clip(m, random_clip(2, rng), RunMode{}), 3);
  EXPECT_EQ(d.tokens, (std::vector<int>{9, 9, 9}));
}

TEST_F(ModelsTest, TeacherForcedRowsAreDistributions) {
  TaskModel m = make_model(tiny(Task::kDescription));
  Rng rng(8);
  ClipContext ctx = prepare_clip(m, random_clip(3, rng), RunMode{});
  const int caption[] = {6, 9, 12, 7};
  DecoderOutput out = teacher_forced(m, ctx, caption, RunMode{});
  ASSERT_EQ(out.log_probs.shape(), (Shape{5, 20}));
  EXPECT_EQ(out.beta.shape(), (Shape{5, 3}));
  EXPECT_EQ(out.gamma.shape(), (Shape{5, 3}));
  for (std::size_t t = 0; t < 5; ++t) {
    double s = 0.0;
    for (std::size_t v = 0; v < 20; ++v) s += std::exp(out.log_probs.at(t, v));
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST_F(ModelsTest, TeacherForcedMatchesGreedySteps) {
  TaskModel m = make_model(tiny(Task::kDescription));
  Rng rng(9);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  Description d = describe(m, ctx, 4);
  std::vector<int> prefix = d.tokens;
  if (prefix.back() == kEos) prefix.pop_back();
  DecoderOutput out = teacher_forced(m, ctx, prefix, RunMode{});
  for (std::size_t t = 0; t < d.steps.size(); ++t)
    for (std::size_t v = 0; v < 20; ++v) EXPECT_NEAR(std::exp(out.log_probs.at(t, v)), d.steps[t][v], 1e-12);
}

TEST_F(ModelsTest, DescriptionLossMatchesComponentOracle) {
  TaskModel m = make_model(tiny(Task::kDescription));
  Rng rng(10);
  ClipContext ctx = prepare_clip(m, random_clip(3, rng), RunMode{});
  const int caption[] = {6, 9, 12};
  const int gold[] = {6, 9, 12, kEos};
  const auto targets = targets_for({1, 4});
  DecoderOutput out = teacher_forced(m, ctx, caption, RunMode{});
  const double l1 = 0.37, l2 = 0.8;
  double nll = 0.0;
  for (std::size_t t = 0; t < 4; ++t) nll -= out.log_probs.at(t, static_cast<std::size_t>(gold[t]));
  const double expected = nll + l1 * (oracle_regularizer(out.beta) + oracle_regularizer(out.gamma)) +
                          l2 * oracle_concept_loss(ctx.detection.confidence, targets);
  const double got = description_loss(out.log_probs, gold, out.beta, out.gamma, ctx.detection.confidence,
                                      targets, l1, l2)
                         .item();
  EXPECT_NEAR(got, expected, 1e-8);
  const int short_gold[] = {6, kEos};
  EXPECT_THROW(description_loss(out.log_probs, short_gold, out.beta, out.gamma, Tensor(), {}, l1, l2),
               DimensionError);
}

TEST_F(ModelsTest, PerfectPredictionWithoutPenaltiesCostsNothing) {
  std::vector<double> logits(3 * 20, 0.0);
  const int gold[] = {7, 11, kEos};
  for (std::size_t t = 0; t < 3; ++t) logits[t * 20 + static_cast<std::size_t>(gold[t])] = 60.0;
  Tensor lp = log_softmax_rows(Tensor::from({3, 20}, logits));
  Tensor beta = Tensor::full({3, 2}, 0.5);
  EXPECT_NEAR(description_loss(lp, gold, beta, beta, Tensor(), {}, 0.0, 0.0).item(), 0.0, 1e-20);
}

TEST_F(ModelsTest, UniformFibOutputCostsLogVocabulary) {
  ModelConfig c = tiny(Task::kFib);
  c.vocab_size = 50;
  TaskModel m = make_model(c);
  for (double& v : m.output.weight.mutable_data()) v = 0.0;
  for (double& v : m.output.bias.mutable_data()) v = 0.0;
  Rng rng(11);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  const int sentence[] = {6, kBlank, 8};
  FibOutput out = fib_forward(m, ctx, sentence, RunMode{});
  EXPECT_EQ(out.blank_index, 1u);
  EXPECT_NEAR(fib_loss(out.log_probs, 30, out.beta, out.gamma, Tensor(), {}, 0.0, 0.0).item(), std::log(50.0),
              1e-12);
  const auto dist = fib_predict(m, ctx, sentence);
  for (double p : dist) EXPECT_NEAR(p, 1.0 / 50.0, 1e-12);
}

TEST_F(ModelsTest, FibRequiresExactlyOneBlank) {
  TaskModel m = make_model(tiny(Task::kFib));
  Rng rng(12);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  const int none[] = {6, 7, 8};
  const int two[] = {kBlank, 7, kBlank};
  EXPECT_THROW(fib_forward(m, ctx, none, RunMode{}), InputError);
  EXPECT_THROW(fib_forward(m, ctx, two, RunMode{}), InputError);
  EXPECT_THROW(fib_forward(m, ctx, std::span<const int>{}, RunMode{}), InputError);
}

TEST_F(ModelsTest, FibAnswerSkipsReservedTokens) {
  TaskModel m = make_model(tiny(Task::kFib));
  for (double& v : m.output.weight.mutable_data()) v = 0.0;
  auto b = m.output.bias.mutable_data();
  for (int r = 0; r < kReservedCount; ++r) b[static_cast<std::size_t>(r)] = 20.0;
  b[13] = 1.0;
  Rng rng(13);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  const int sentence[] = {kBlank, 7};
  EXPECT_EQ(fib_answer(fib_forward(m, ctx, sentence, RunMode{}).log_probs), 13);
}

TEST_F(ModelsTest, FibPredictionDependsOnClipAndContext) {
  TaskModel m = make_model(tiny(Task::kFib));
  Rng rng(14);
  ClipContext a = prepare_clip(m, random_clip(2, rng), RunMode{});
  ClipContext b = prepare_clip(m, random_clip(2, rng), RunMode{});
  const int s1[] = {6, kBlank, 8};
  const int s2[] = {9, kBlank, 8};
  const auto pa = fib_predict(m, a, s1), pb = fib_predict(m, b, s1), pc = fib_predict(m, a, s2);
  double dab = 0.0, dac = 0.0;
  for (std::size_t v = 0; v < pa.size(); ++v) {
    dab += std::abs(pa[v] - pb[v]);
    dac += std::abs(pa[v] - pc[v]);
  }
  EXPECT_GT(dab, 1e-6);
  EXPECT_GT(dac, 1e-6);
}

TEST_F(ModelsTest, MovingTheBlankChangesPredictions) {
  Rng rng(19);
  int differing = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TaskModel m = make_model(tiny(Task::kFib), seed);
    ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
    const int early[] = {6, kBlank, 8, 9, 10};
    const int late[] = {6, 7, 8, kBlank, 10};
    NoTapeScope off;
    const int a = fib_answer(fib_forward(m, ctx, early, RunMode{}).log_probs);
    const int b = fib_answer(fib_forward(m, ctx, late, RunMode{}).log_probs);
    differing += a != b;
  }
  EXPECT_GT(differing, 0);
}

TEST_F(ModelsTest, ZeroScoreWeightGivesZeroScores) {
  TaskModel m = make_model(tiny(Task::kMultipleChoice));
  for (double& v : m.score_weight.mutable_data()) v = 0.0;
  Rng rng(15);
  ClipContext ctx = prepare_clip(m, random_clip(2, rng), RunMode{});
  std::vector<Tensor> scores;
  for (int w = 6; w < 11; ++w) {
    const int sentence[] = {w, 7, 8};
    scores.push_back(mc_score(m, ctx, sentence, RunMode{}).score);
    EXPECT_EQ(scores.back().item(), 0.0);
  }
  EXPECT_DOUBLE_EQ(mc_loss(scores, 2, 1.0, {}, Tensor(), {}, 0.0, 0.0).item(), 4.0);
  EXPECT_DOUBLE_EQ(mc_loss(scores, 0, 0.5, {}, Tensor(), {}, 0.0, 0.0).item(), 2.0);
}

TEST_F(ModelsTest, MarginHingeExamples) {
  auto s = [](double v) { return Tensor::from({1}, {v}); };
  const std::vector<Tensor> scores = {s(2.0), s(0.5), s(1.5), s(-3.0)};
  // Positive 0: 0 + 0.5 + 0 = 0.5 with margin 1.
  EXPECT_DOUBLE_EQ(margin_hinge(scores, 0, 1.0).item(), 0.5);
  // Positive 3: 6 + 4.5 + 5.5.
  EXPECT_DOUBLE_EQ(margin_hinge(scores, 3, 1.0).item(), 16.0);
  EXPECT_THROW(margin_hinge(scores, 4, 1.0), UsageError);
  EXPECT_THROW(margin_hinge({scores.begin(), 1}, 0, 1.0), UsageError);
}

TEST_F(ModelsTest, RetrievalLossExamples) {
  auto s = [](double v) { return Tensor::from({1}, {v}); };
  RetrievalBatch separated;
  separated.scores = {{s(5), s(1)}, {s(0), s(4)}};
  EXPECT_DOUBLE_EQ(retrieval_loss(separated, 3.0, 0.0, 0.0).item(), 0.0);
  RetrievalBatch close;
  close.scores = {{s(1), s(1)}, {s(2), s(1)}};
  EXPECT_DOUBLE_EQ(retrieval_loss(close, 3.0, 0.0, 0.0).item(), 7.0);
  RetrievalBatch single;
  single.scores = {{s(1)}};
  EXPECT_THROW(retrieval_loss(single, 3.0, 0.0, 0.0), UsageError);
  RetrievalBatch ragged;
  ragged.scores = {{s(1), s(2)}, {s(1)}};
  EXPECT_THROW(retrieval_loss(ragged, 3.0, 0.0, 0.0), DimensionError);
}

TEST_F(ModelsTest, RetrievalScoreDependsOnBothSides) {
  TaskModel m = make_model(tiny(Task::kRetrieval));
  Rng rng(16);
  ClipContext a = prepare_clip(m, random_clip(2, rng), RunMode{});
  ClipContext b = prepare_clip(m, random_clip(2, rng), RunMode{});
  const int q1[] = {6, 7}, q2[] = {11, 12, 13};
  const double s_a1 = retrieval_score(m, a, q1, RunMode{}).score.item();
  EXPECT_NE(s_a1, retrieval_score(m, b, q1, RunMode{}).score.item());
  EXPECT_NE(s_a1, retrieval_score(m, a, q2, RunMode{}).score.item());
  EXPECT_EQ(s_a1, retrieval_score(m, a, q1, RunMode{}).score.item());
}

TEST_F(ModelsTest, SimilarityMatrixEntriesArePairwise) {
  TaskModel m = make_model(tiny(Task::kRetrieval));
  Rng rng(17);
  std::vector<ClipContext> clips;
  std::vector<std::string> col_ids;
  for (int i = 0; i < 4; ++i) {
    clips.push_back(prepare_clip(m, random_clip(2, rng), RunMode{}));
    col_ids.push_back("clip" + std::to_string(i));
  }
  const std::vector<std::vector<int>> queries = {{6, 7}, {8}, {9, 10, 11}};
  auto scorer = [&](std::size_t r, std::size_t c) {
    return retrieval_score(m, clips[c], queries[r], RunMode{}).score.item();
  };
  SimilarityMatrix one = similarity_matrix({"q0", "q1", "q2"}, col_ids, scorer, 1);
  SimilarityMatrix many = similarity_matrix({"q0", "q1", "q2"}, col_ids, scorer, 3);
  ASSERT_EQ(one.rows(), 3u);
  ASSERT_EQ(one.cols(), 4u);
  EXPECT_EQ(one.scores, many.scores);
  // Each entry equals the pair scored in isolation.
  EXPECT_EQ(one.at(2, 1), retrieval_score(m, clips[1], queries[2], RunMode{}).score.item());
  EXPECT_EQ(one.at(0, 3), retrieval_score(m, clips[3], queries[0], RunMode{}).score.item());
}

TEST_F(ModelsTest, SimilarityMatrixWithConstantScorer) {
  SimilarityMatrix m = similarity_matrix({"a", "b"}, {"x", "y", "z"}, [](auto, auto) { return 2.5; }, 4);
  EXPECT_EQ(m.scores, std::vector<double>(6, 2.5));
  SimilarityMatrix index =
      similarity_matrix({"a", "b"}, {"x", "y", "z"}, [](auto r, auto c) { return 10.0 * r + c; }, 2);
  EXPECT_EQ(index.at(1, 2), 12.0);
  EXPECT_THROW(similarity_matrix({"a"}, {"x"}, [](auto, auto) -> double { throw InputError("bad"); }, 2),
               InputError);
}

TEST_F(ModelsTest, WorkersInheritPrecision) {
  PrecisionScope f32(Precision::kF32);
  std::vector<int> seen(8, -1);
  parallel_for(8, 4, [&](std::size_t i) { seen[i] = current_precision() == Precision::kF32 ? 1 : 0; });
  EXPECT_EQ(seen, std::vector<int>(8, 1));
}

TEST_F(ModelsTest, LossesAreNonnegative) {
  Rng rng(18);
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    FeatureClip clip = random_clip(2, rng);
    const auto targets = targets_for({seed % kCandidates});
    {
      TaskModel m = make_model(tiny(Task::kDescription), seed);
      ClipContext ctx = prepare_clip(m, clip, RunMode{});
      const int caption[] = {6, 8}, gold[] = {6, 8, kEos};
      DecoderOutput o = teacher_forced(m, ctx, caption, RunMode{});
      EXPECT_GE(description_loss(o.log_probs, gold, o.beta, o.gamma, ctx.detection.confidence, targets, 1e-3, 1.0)
                    .item(),
                0.0);
    }
    {
      TaskModel m = make_model(tiny(Task::kFib), seed);
      ClipContext ctx = prepare_clip(m, clip, RunMode{});
      const int sentence[] = {6, kBlank};
      FibOutput o = fib_forward(m, ctx, sentence, RunMode{});
      EXPECT_GE(fib_loss(o.log_probs, 9, o.beta, o.gamma, ctx.detection.confidence, targets, 1e-3, 1.0).item(),
                0.0);
    }
    {
      TaskModel m = make_model(tiny(Task::kMultipleChoice), seed);
      ClipContext ctx = prepare_clip(m, clip, RunMode{});
      std::vector<Tensor> scores, gammas;
      for (int w = 6; w < 9; ++w) {
        const int sentence[] = {w, 10};
        PairScore p = mc_score(m, ctx, sentence, RunMode{});
        scores.push_back(p.score);
        gammas.push_back(p.gamma);
      }
      EXPECT_GE(mc_loss(scores, 1, 1.0, gammas, ctx.detection.confidence, targets, 1e-3, 1.0).item(), 0.0);
    }
  }
}

// Gradient checks through the whole stack, detector included.
class ModelsGradTest : public ModelsTest {
 protected:
  Rng rng_{42};
  FeatureClip clip_a_ = random_clip(2, rng_, "a");
  FeatureClip clip_b_ = random_clip(2, rng_, "b");
  std::vector<double> targets_ = targets_for({0, 5});

  static void expect_passes(const TaskModel& m, const std::function<Tensor()>& loss) {
    auto report = grad_check(loss, m.store.entries());
    EXPECT_TRUE(report.passed) << report.max_rel_error;
    for (const auto& p : report.params) EXPECT_LT(p.max_rel_error, report.tolerance) << p.name;
  }
};

TEST_F(ModelsGradTest, DescriptionLoss) {
  TaskModel m = make_model(tiny(Task::kDescription), 5);
  const int caption[] = {6, 9}, gold[] = {6, 9, kEos};
  expect_passes(m, [&] {
    ClipContext ctx = prepare_clip(m, clip_a_, RunMode{});
    DecoderOutput o = teacher_forced(m, ctx, caption, RunMode{});
    return description_loss(o.log_probs, gold, o.beta, o.gamma, ctx.detection.confidence, targets_, 0.1, 1.0);
  });
}

TEST_F(ModelsGradTest, FibLoss) {
  TaskModel m = make_model(tiny(Task::kFib), 6);
  const int sentence[] = {6, kBlank, 8};
  expect_passes(m, [&] {
    ClipContext ctx = prepare_clip(m, clip_a_, RunMode{});
    FibOutput o = fib_forward(m, ctx, sentence, RunMode{});
    return fib_loss(o.log_probs, 11, o.beta, o.gamma, ctx.detection.confidence, targets_, 0.1, 1.0);
  });
}

TEST_F(ModelsGradTest, MultipleChoiceLoss) {
  TaskModel m = make_model(tiny(Task::kMultipleChoice), 7);
  const std::vector<std::vector<int>> choices = {{6, 7}, {8, 9}, {10}};
  expect_passes(m, [&] {
    ClipContext ctx = prepare_clip(m, clip_a_, RunMode{});
    std::vector<Tensor> scores, gammas;
    for (const auto& c : choices) {
      PairScore p = mc_score(m, ctx, c, RunMode{});
      scores.push_back(p.score);
      gammas.push_back(p.gamma);
    }
    // A large margin keeps every hinge active, away from its kink.
    return mc_loss(scores, 1, 10.0, gammas, ctx.detection.confidence, targets_, 0.1, 1.0);
  });
}

TEST_F(ModelsGradTest, RetrievalLoss) {
  TaskModel m = make_model(tiny(Task::kRetrieval), 8);
  const std::vector<std::vector<int>> queries = {{6, 7}, {8, 9, 10}};
  expect_passes(m, [&] {
    std::vector<ClipContext> ctx = {prepare_clip(m, clip_a_, RunMode{}), prepare_clip(m, clip_b_, RunMode{})};
    RetrievalBatch batch;
    batch.scores.resize(2);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t l = 0; l < 2; ++l) {
        PairScore p = retrieval_score(m, ctx[l], queries[k], RunMode{});
        batch.scores[k].push_back(p.score);
        batch.gammas.push_back(p.gamma);
      }
    for (const auto& c : ctx) {
      batch.confidences.push_back(c.detection.confidence);
      batch.targets.push_back(targets_);
    }
    return retrieval_loss(batch, 10.0, 0.1, 1.0);
  });
}

}  // namespace
}  // namespace ctsan

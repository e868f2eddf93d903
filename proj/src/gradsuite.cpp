#include "ctsan/gradsuite.hpp"

#include <numeric>
#include <random>

namespace ctsan {

namespace {

constexpr std::size_t kCandidates = 10;

FeatureClip random_clip(Rng& rng, const std::string& id) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  FeatureClip clip;
  clip.id = id;
  for (int n = 0; n < 3; ++n) {
    std::vector<double> v(4 * 4 * 4);
    for (double& x : v) x = u(rng);
    clip.frames.push_back(Tensor::from({4, 4, 4}, std::move(v)));
  }
  return clip;
}

}  // namespace

ModelConfig tiny_config(Task task) {
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
  c.top_k = 3;
  c.dropout = 0.0;
  c.ret_dropout = 0.0;
  c.sketch_dim = 16;
  c.maxout_dim = 5;
  return c;
}

GradCheckReport check_task_gradients(Task task, std::uint64_t seed) {
  PrecisionScope f64(Precision::kF64);
  std::vector<int> words(kCandidates);
  std::iota(words.begin(), words.end(), kReservedCount);
  const TaskModel m = TaskModel::create(tiny_config(task), words, seed);
  // Separated confidence biases keep the top-K set fixed under the probe steps.
  auto bias = m.detector.confidence.bias.mutable_data();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 3.0 - 0.7 * static_cast<double>(i);
  // The trace attention's ReLU inputs are products of small activations and
  // sit close to zero; alternating channel offsets keep them off the kink.
  auto attn = m.detector.attn_bias.mutable_data();
  for (std::size_t i = 0; i < attn.size(); ++i) attn[i] = i % 2 ? -0.5 : 0.5;

  Rng rng(seed + 41);
  const FeatureClip a = random_clip(rng, "a"), b = random_clip(rng, "b");
  std::vector<double> targets(kCandidates, 0.0);
  targets[0] = targets[5] = 1.0;
  const double l1 = 0.1, l2 = 1.0;

  std::function<Tensor()> loss;
  switch (task) {
    case Task::kConcept:
      loss = [&] { return concept_loss(run_detection(m, a).confidence, targets); };
      break;
    case Task::kDescription:
      loss = [&] {
        const int caption[] = {6, 9}, gold[] = {6, 9, kEos};
        const ClipContext ctx = prepare_clip(m, a, {});
        const DecoderOutput o = teacher_forced(m, ctx, caption, {});
        return description_loss(o.log_probs, gold, o.beta, o.gamma, ctx.detection.confidence, targets, l1, l2);
      };
      break;
    case Task::kFib:
      loss = [&] {
        const int sentence[] = {6, kBlank, 8};
        const ClipContext ctx = prepare_clip(m, a, {});
        const FibOutput o = fib_forward(m, ctx, sentence, {});
        return fib_loss(o.log_probs, 11, o.beta, o.gamma, ctx.detection.confidence, targets, l1, l2);
      };
      break;
    case Task::kMultipleChoice:
      loss = [&] {
        const std::vector<std::vector<int>> choices = {{6, 7}, {8, 9}, {10}, {11, 6}, {12}};
        const ClipContext ctx = prepare_clip(m, a, {});
        std::vector<Tensor> scores, gammas;
        for (const auto& c : choices) {
          const PairScore p = mc_score(m, ctx, c, {});
          scores.push_back(p.score);
          gammas.push_back(p.gamma);
        }
        // Scores of the untrained model are near zero, so every hinge stays active.
        return mc_loss(scores, 1, m.config.mc_margin, gammas, ctx.detection.confidence, targets, l1, l2);
      };
      break;
    case Task::kRetrieval:
      loss = [&] {
        const std::vector<std::vector<int>> queries = {{6, 7}, {8, 9, 10}};
        const std::vector<ClipContext> ctx = {prepare_clip(m, a, {}), prepare_clip(m, b, {})};
        RetrievalBatch batch;
        batch.scores.resize(2);
        for (std::size_t k = 0; k < 2; ++k)
          for (std::size_t l = 0; l < 2; ++l) {
            const PairScore p = retrieval_score(m, ctx[l], queries[k], {});
            batch.scores[k].push_back(p.score);
            batch.gammas.push_back(p.gamma);
          }
        for (const auto& c : ctx) {
          batch.confidences.push_back(c.detection.confidence);
          batch.targets.push_back(targets);
        }
        return retrieval_loss(batch, m.config.ret_margin, l1, l2);
      };
      break;
  }
  return grad_check(loss, m.store.entries());
}

}  // namespace ctsan

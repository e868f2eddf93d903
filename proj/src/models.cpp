#include "ctsan/models.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>

#include "ctsan/errors.hpp"
#include "ctsan/ops.hpp"

namespace ctsan {

namespace {

Tensor scalar_score(const Tensor& features, const Tensor& w_s) {
  return reshape(matmul_nt(features, w_s), {1});
}

std::vector<Tensor> rows_of(const Tensor& x) {
  std::vector<Tensor> out;
  out.reserve(x.dim(0));
  for (std::size_t t = 0; t < x.dim(0); ++t) out.push_back(slice_rows(x, t, 1));
  return out;
}

struct SentenceInput {
  Tensor x;      // [T, D]
  Tensor gamma;  // [T, K] or undefined
};

SentenceInput sentence_input(const TaskModel& model, const ClipContext& ctx, std::span<const int> words) {
  if (words.empty()) throw InputError("empty sentence");
  Tensor emb = embedding_lookup(model.embedding, words);
  if (!model.config.input_attention) return {plain_input(emb, model.attn), Tensor()};
  InputAttention ia = input_attention(emb, ctx.concepts, model.attn);
  return {ia.x, ia.gamma};
}

// Top-layer states of `params` over the rows of x, starting from `init`.
std::vector<Tensor> run_rows(const LstmParams& params, const Tensor& x, LstmState state, const Dropout& drop) {
  std::vector<Tensor> hs;
  for (const Tensor& row : rows_of(x)) {
    state = lstm_step(params, row, state, drop);
    hs.push_back(state.top());
  }
  return hs;
}

// Adds l1 * g(a) when `a` is defined.
Tensor add_regularizer(Tensor total, const Tensor& a, double lambda1) {
  if (!a.defined() || lambda1 == 0.0) return total;
  return add(total, scale(attention_regularizer(a), lambda1));
}

Tensor add_concept_term(Tensor total, const Tensor& confidence, std::span<const double> targets,
                        double lambda2) {
  if (!confidence.defined() || lambda2 == 0.0) return total;
  return add(total, scale(concept_loss(confidence, targets), lambda2));
}

}  // namespace

std::string task_name(Task task) {
  switch (task) {
    case Task::kConcept: return "concept";
    case Task::kDescription: return "desc";
    case Task::kFib: return "fib";
    case Task::kMultipleChoice: return "mc";
    case Task::kRetrieval: return "ret";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::kConcept, Task::kDescription, Task::kFib, Task::kMultipleChoice, Task::kRetrieval}) {
    if (task_name(t) == name) return t;
  }
  throw UsageError("unknown task '" + name + "' (expected concept, desc, fib, mc or ret)");
}

void ModelConfig::validate() const {
  detector.validate();
  if (top_k == 0 || top_k > detector.candidates) {
    throw UsageError("top_k=" + std::to_string(top_k) + " must be in [1, " + std::to_string(detector.candidates) +
                     "]");
  }
  if (task == Task::kConcept) return;
  if (vocab_size <= static_cast<std::size_t>(kReservedCount)) {
    throw UsageError("vocabulary of " + std::to_string(vocab_size) + " holds only reserved tokens");
  }
  if (word_dim == 0 || hidden == 0 || depth == 0) throw UsageError("model dimensions must be positive");
  if (dropout < 0.0 || dropout >= 1.0 || ret_dropout < 0.0 || ret_dropout >= 1.0) {
    throw UsageError("dropout rates must be in [0, 1)");
  }
  if (lambda1 < 0.0 || lambda2 < 0.0 || mc_margin < 0.0 || ret_margin < 0.0) {
    throw UsageError("loss weights and margins must be nonnegative");
  }
  if (max_len == 0) throw UsageError("max_len must be positive");
  if (task == Task::kRetrieval && (sketch_dim == 0 || maxout_dim == 0 || maxout_pieces < 2)) {
    throw UsageError("retrieval needs positive sketch and maxout sizes and at least two pieces");
  }
}

TaskModel TaskModel::create(const ModelConfig& config, std::vector<int> candidate_words, std::uint64_t seed) {
  config.validate();
  TaskModel m;
  m.config = config;
  if (config.task != Task::kConcept || !candidate_words.empty()) {
    if (candidate_words.size() != config.detector.candidates) {
      throw DimensionError(std::to_string(candidate_words.size()) + " candidate words for " +
                           std::to_string(config.detector.candidates) + " detector candidates");
    }
    for (int w : candidate_words) {
      if (config.task != Task::kConcept && (w < 0 || static_cast<std::size_t>(w) >= config.vocab_size)) {
        throw DimensionError("candidate word id " + std::to_string(w) + " outside the vocabulary");
      }
    }
  }
  m.candidate_words = std::move(candidate_words);
  Rng rng(seed);
  m.detector = ConceptDetector::create(m.store, "detector", config.detector, rng);
  if (config.task == Task::kConcept) return m;

  const std::size_t d = config.word_dim, D = config.hidden;
  LstmOptions opts;
  opts.layer_norm = config.layer_norm;
  opts.forget_bias = config.forget_bias;
  m.embedding = m.store.add("embedding", xavier_init({d, config.vocab_size}, rng));
  m.encoder = LstmParams::create(m.store, "encoder", config.detector.feature_dim, D, config.depth, opts, rng);
  const bool word_output = config.task == Task::kDescription || config.task == Task::kFib;
  m.attn = AttnParams::create(m.store, "attn", d, D, rng, word_output && config.output_attention);

  switch (config.task) {
    case Task::kDescription:
      m.language = LstmParams::create(m.store, "decoder", D, D, config.depth, opts, rng);
      m.output = Affine::create(m.store, "output", D, config.vocab_size, rng);
      break;
    case Task::kFib:
      m.language = LstmParams::create(m.store, "fib.forward", D, D, config.depth, opts, rng);
      m.backward = LstmParams::create(m.store, "fib.backward", D, D, config.depth, opts, rng);
      m.blank_proj = Affine::create(m.store, "fib.blank", 2 * D, D, rng);
      m.output = Affine::create(m.store, "output", D, config.vocab_size, rng);
      break;
    case Task::kMultipleChoice:
      m.language = LstmParams::create(m.store, "mc.sentence", D, D, config.depth, opts, rng);
      m.score_hidden = Affine::create(m.store, "mc.hidden", D, D, rng);
      m.score_weight = m.store.add("mc.score", xavier_init({1, D}, rng));
      break;
    case Task::kRetrieval:
      m.language = LstmParams::create(m.store, "ret.query", D, D, config.depth, opts, rng);
      m.sketch = SketchParams::random(D, D, config.sketch_dim, config.sketch_seed);
      for (std::size_t k = 0; k < config.maxout_pieces; ++k) {
        m.maxout_pieces.push_back(
            Affine::create(m.store, "ret.maxout" + std::to_string(k), config.sketch_dim, config.maxout_dim, rng));
      }
      m.score_weight = m.store.add("ret.score", xavier_init({1, config.maxout_dim}, rng));
      break;
    case Task::kConcept:
      break;
  }
  return m;
}

std::vector<NamedTensor> TaskModel::trainable() const {
  if (config.finetune_detector || config.task == Task::kConcept) return store.entries();
  std::vector<NamedTensor> out;
  for (const auto& e : store.entries())
    if (e.first.rfind("detector.", 0) != 0) out.push_back(e);
  return out;
}

Detection run_detection(const TaskModel& model, const FeatureClip& clip) {
  std::optional<NoTapeScope> frozen;
  if (!model.config.finetune_detector && model.config.task != Task::kConcept) frozen.emplace();
  DetectorRollout rollout = run_detector(model.detector, clip);
  Detection d;
  d.confidence = rollout.confidence;
  for (const Tensor& v : rollout.reduced) d.pooled.push_back(global_avg_pool(v));
  d.concepts = top_k(rollout.confidence, model.config.top_k, model.candidate_words);
  return d;
}

VideoEncoding encode_video(const TaskModel& model, std::span<const Tensor> pooled, const RunMode& mode) {
  if (pooled.empty()) throw UsageError("encode_video: no frames");
  VideoEncoding out;
  LstmState state = LstmState::zeros(model.encoder);
  const Dropout drop = mode.dropout(model.config.dropout);
  for (const Tensor& x : pooled) {
    state = lstm_step(model.encoder, x, state, drop);
    out.states.push_back(state.top());
  }
  out.final = std::move(state);
  return out;
}

ClipContext prepare_clip(const TaskModel& model, const Detection& detection, const RunMode& mode) {
  if (model.config.task == Task::kConcept) throw UsageError("prepare_clip: the concept task has no language head");
  ClipContext ctx;
  ctx.detection = detection;
  ctx.video = encode_video(model, detection.pooled, mode);
  ctx.concepts = embedding_lookup(model.embedding, detection.concepts.words);
  return ctx;
}

ClipContext prepare_clip(const TaskModel& model, const FeatureClip& clip, const RunMode& mode) {
  return prepare_clip(model, run_detection(model, clip), mode);
}

DecoderOutput teacher_forced(const TaskModel& model, const ClipContext& ctx, std::span<const int> caption,
                             const RunMode& mode) {
  if (model.config.task != Task::kDescription) throw UsageError("teacher_forced: not a description model");
  std::vector<int> inputs;
  inputs.reserve(caption.size() + 1);
  inputs.push_back(kBos);
  inputs.insert(inputs.end(), caption.begin(), caption.end());
  SentenceInput in = sentence_input(model, ctx, inputs);
  const auto hs = run_rows(model.language, in.x, ctx.video.final, mode.dropout(model.config.dropout));
  Tensor h = concat_rows(hs);
  DecoderOutput out;
  out.gamma = in.gamma;
  Tensor p = h;
  if (model.config.output_attention) {
    OutputAttention oa = output_attention(h, ctx.concepts, model.attn);
    p = oa.p;
    out.beta = oa.beta;
  }
  out.log_probs = log_softmax_rows(linear(p, model.output.weight, model.output.bias));
  return out;
}

Tensor description_loss(const Tensor& log_probs, std::span<const int> gold, const Tensor& beta,
                        const Tensor& gamma, const Tensor& confidence, std::span<const double> targets,
                        double lambda1, double lambda2) {
  if (log_probs.rank() != 2 || log_probs.dim(0) != gold.size()) {
    throw DimensionError("description_loss: " + std::to_string(gold.size()) + " targets for log-probabilities " +
                         shape_string(log_probs.shape()));
  }
  Tensor total = neg(sum(pick_per_row(log_probs, gold)));
  total = add_regularizer(total, beta, lambda1);
  total = add_regularizer(total, gamma, lambda1);
  return add_concept_term(total, confidence, targets, lambda2);
}

std::vector<int> Description::words() const {
  std::vector<int> w = tokens;
  if (!w.empty() && w.back() == kEos) w.pop_back();
  return w;
}

DecoderState begin_decoding(const ClipContext& ctx) { return {ctx.video.final, kBos}; }

std::vector<double> decode_step(const TaskModel& model, const ClipContext& ctx, DecoderState& state) {
  if (model.config.task != Task::kDescription) throw UsageError("decode_step: not a description model");
  NoTapeScope off;
  const int ids[] = {state.prev};
  SentenceInput in = sentence_input(model, ctx, ids);
  state.lstm = lstm_step(model.language, in.x, state.lstm);
  Tensor p = state.lstm.top();
  if (model.config.output_attention) p = output_attention(p, ctx.concepts, model.attn).p;
  Tensor lp = log_softmax_rows(linear(p, model.output.weight, model.output.bias));
  std::vector<double> dist(lp.numel());
  std::transform(lp.data().begin(), lp.data().end(), dist.begin(), [](double v) { return std::exp(v); });
  return dist;
}

int greedy_word(std::span<const double> distribution) {
  int best = -1;
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    const int id = static_cast<int>(i);
    if (id == kPad || id == kBlank || id == kBos) continue;
    if (best < 0 || distribution[i] > distribution[static_cast<std::size_t>(best)]) best = id;
  }
  if (best < 0) throw UsageError("vocabulary holds no emittable word");
  return best;
}

Description describe(const TaskModel& model, const ClipContext& ctx, std::size_t max_len) {
  if (max_len == 0) throw UsageError("describe: max_len must be positive");
  Description out;
  DecoderState state = begin_decoding(ctx);
  while (out.tokens.size() < max_len) {
    std::vector<double> dist = decode_step(model, ctx, state);
    state.prev = greedy_word(dist);
    out.steps.push_back(std::move(dist));
    out.tokens.push_back(state.prev);
    if (state.prev == kEos) break;
  }
  return out;
}

FibOutput fib_forward(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence,
                      const RunMode& mode) {
  if (model.config.task != Task::kFib) throw UsageError("fib_forward: not a fill-in-the-blank model");
  const auto blanks = std::count(sentence.begin(), sentence.end(), kBlank);
  if (blanks != 1) {
    throw InputError("fill-in-the-blank sentence must contain exactly one <blank>, found " +
                     std::to_string(blanks));
  }
  FibOutput out;
  out.blank_index = static_cast<std::size_t>(std::find(sentence.begin(), sentence.end(), kBlank) - sentence.begin());
  SentenceInput in = sentence_input(model, ctx, sentence);
  out.gamma = in.gamma;
  const auto xs = rows_of(in.x);
  BlstmOutput states = blstm_run(model.language, model.backward, xs, ctx.video.final, ctx.video.final,
                                 mode.dropout(model.config.dropout));
  const Tensor both[] = {states.forward[out.blank_index], states.backward[out.blank_index]};
  Tensor o = tanh(linear(concat_cols(both), model.blank_proj.weight, model.blank_proj.bias));
  if (model.config.output_attention) {
    OutputAttention oa = output_attention(o, ctx.concepts, model.attn);
    o = oa.p;
    out.beta = oa.beta;
  }
  out.log_probs = log_softmax_rows(linear(o, model.output.weight, model.output.bias));
  return out;
}

std::vector<double> fib_predict(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence) {
  NoTapeScope off;
  Tensor lp = fib_forward(model, ctx, sentence, RunMode{}).log_probs;
  std::vector<double> dist(lp.numel());
  std::transform(lp.data().begin(), lp.data().end(), dist.begin(), [](double v) { return std::exp(v); });
  return dist;
}

int fib_answer(const Tensor& log_probs) {
  int best = -1;
  const auto row = log_probs.data();
  for (std::size_t i = static_cast<std::size_t>(kReservedCount); i < row.size(); ++i) {
    if (best < 0 || row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  if (best < 0) throw UsageError("fib_answer: vocabulary holds only reserved tokens");
  return best;
}

Tensor fib_loss(const Tensor& log_probs, int gold, const Tensor& beta, const Tensor& gamma,
                const Tensor& confidence, std::span<const double> targets, double lambda1, double lambda2) {
  const int golds[] = {gold};
  return description_loss(log_probs, golds, beta, gamma, confidence, targets, lambda1, lambda2);
}

PairScore mc_score(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence,
                   const RunMode& mode) {
  if (model.config.task != Task::kMultipleChoice) throw UsageError("mc_score: not a multiple-choice model");
  SentenceInput in = sentence_input(model, ctx, sentence);
  const auto hs = run_rows(model.language, in.x, ctx.video.final, mode.dropout(model.config.dropout));
  Tensor hidden = relu(linear(hs.back(), model.score_hidden.weight, model.score_hidden.bias));
  return {scalar_score(hidden, model.score_weight), in.gamma};
}

Tensor margin_hinge(std::span<const Tensor> scores, std::size_t positive, double margin) {
  if (scores.size() < 2) throw UsageError("margin_hinge: need at least two scores");
  if (positive >= scores.size()) {
    throw UsageError("margin_hinge: positive index " + std::to_string(positive) + " out of range");
  }
  Tensor total;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    if (l == positive) continue;
    Tensor term = relu(add_scalar(sub(scores[l], scores[positive]), margin));
    total = total.defined() ? add(total, term) : term;
  }
  return sum(total);
}

Tensor mc_loss(std::span<const Tensor> scores, std::size_t answer, double margin,
               std::span<const Tensor> gammas, const Tensor& confidence, std::span<const double> targets,
               double lambda1, double lambda2) {
  Tensor total = margin_hinge(scores, answer, margin);
  for (const Tensor& g : gammas) total = add_regularizer(total, g, lambda1);
  return add_concept_term(total, confidence, targets, lambda2);
}

PairScore retrieval_score(const TaskModel& model, const ClipContext& ctx, std::span<const int> query,
                          const RunMode& mode) {
  if (model.config.task != Task::kRetrieval) throw UsageError("retrieval_score: not a retrieval model");
  SentenceInput in = sentence_input(model, ctx, query);
  const auto hs = run_rows(model.language, in.x, LstmState::zeros(model.language),
                           mode.dropout(model.config.dropout));
  Tensor joint = reshape(compact_bilinear(ctx.video.states.back(), hs.back(), model.sketch),
                         {1, model.config.sketch_dim});
  joint = mode.dropout(model.config.ret_dropout)(joint);
  Tensor features = maxout(joint, model.maxout_pieces);
  return {scalar_score(features, model.score_weight), in.gamma};
}

Tensor retrieval_loss(const RetrievalBatch& batch, double margin, double lambda1, double lambda2) {
  const std::size_t B = batch.scores.size();
  if (B < 2) throw UsageError("retrieval_loss: the in-batch ranking loss needs at least two pairs");
  if (!batch.confidences.empty() && (batch.confidences.size() != B || batch.targets.size() != B)) {
    throw DimensionError("retrieval_loss: confidences and targets must cover every clip in the batch");
  }
  Tensor total;
  for (std::size_t k = 0; k < B; ++k) {
    if (batch.scores[k].size() != B) {
      throw DimensionError("retrieval_loss: score row " + std::to_string(k) + " has " +
                           std::to_string(batch.scores[k].size()) + " entries for a batch of " + std::to_string(B));
    }
    Tensor row = margin_hinge(batch.scores[k], k, margin);
    total = total.defined() ? add(total, row) : row;
  }
  for (const Tensor& g : batch.gammas) total = add_regularizer(total, g, lambda1);
  for (std::size_t k = 0; k < batch.confidences.size(); ++k) {
    total = add_concept_term(total, batch.confidences[k], batch.targets[k], lambda2);
  }
  return total;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    NoTapeScope off;
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const Precision precision = current_precision();
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      PrecisionScope scope(precision);
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

SimilarityMatrix similarity_matrix(std::vector<std::string> row_ids, std::vector<std::string> col_ids,
                                   const std::function<double(std::size_t, std::size_t)>& scorer,
                                   std::size_t threads) {
  SimilarityMatrix m;
  m.row_ids = std::move(row_ids);
  m.col_ids = std::move(col_ids);
  m.scores.assign(m.rows() * m.cols(), std::numeric_limits<double>::quiet_NaN());
  const std::size_t cols = m.cols();
  parallel_for(m.rows(), threads, [&](std::size_t r) {
    for (std::size_t c = 0; c < cols; ++c) m.scores[r * cols + c] = scorer(r, c);
  });
  return m;
}

}  // namespace ctsan

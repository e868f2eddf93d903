#pragma once

// The four task networks built on the concept detector: caption description,
// fill-in-the-blank, multiple-choice scoring and retrieval scoring. A fifth
// task, `concept`, trains the detector on its own.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctsan/concept.hpp"
#include "ctsan/semattn.hpp"
#include "ctsan/vocab.hpp"

namespace ctsan {

enum class Task { kConcept, kDescription, kFib, kMultipleChoice, kRetrieval };

std::string task_name(Task task);  // concept, desc, fib, mc, ret
Task parse_task(const std::string& name);

struct ModelConfig {
  Task task = Task::kDescription;
  DetectorConfig detector;
  std::size_t vocab_size = 0;
  std::size_t word_dim = 16;  // d
  std::size_t hidden = 32;    // D
  std::size_t depth = 2;
  std::size_t top_k = 10;
  bool layer_norm = true;
  double forget_bias = 1.0;
  double dropout = 0.2;
  bool input_attention = true;
  bool output_attention = true;
  // When false the detector runs off the tape: its outputs are constants and
  // the concept loss term is dropped.
  bool finetune_detector = true;
  double lambda1 = 1e-3;
  double lambda2 = 1.0;
  double mc_margin = 1.0;
  double ret_margin = 3.0;
  std::size_t sketch_dim = 8000;
  std::size_t maxout_dim = 1500;
  std::size_t maxout_pieces = 2;
  double ret_dropout = 0.5;
  std::uint64_t sketch_seed = 7;
  std::size_t max_len = 20;

  void validate() const;
};

struct RunMode {
  bool training = false;
  Rng* rng = nullptr;

  Dropout dropout(double rate) const { return {rate, training, rng}; }
};

struct TaskModel {
  ModelConfig config;
  std::vector<int> candidate_words;  // candidate index -> vocabulary id
  ParamStore store;
  ConceptDetector detector;
  Tensor embedding;  // E [d, |vocab|]
  LstmParams encoder;
  AttnParams attn;
  LstmParams language;  // decoder, forward BLSTM, sentence or query LSTM
  LstmParams backward;  // backward BLSTM
  Affine output;        // W_y, b_y
  Affine blank_proj;    // W_o, b_o
  Affine score_hidden;  // W_a, b_a
  Tensor score_weight;  // W_s as a single row [1, D] or [1, maxout_dim]
  SketchParams sketch;
  std::vector<Affine> maxout_pieces;

  static TaskModel create(const ModelConfig& config, std::vector<int> candidate_words,
                          std::uint64_t seed);
  // Parameters the optimizer updates; the detector is left out when frozen.
  std::vector<NamedTensor> trainable() const;
};

struct Detection {
  Tensor confidence;           // [V]
  ConceptSet concepts;
  std::vector<Tensor> pooled;  // per frame [1, D'], grid average of the reduced frame
};

// Runs the detector. Off the tape when the detector is frozen.
Detection run_detection(const TaskModel& model, const FeatureClip& clip);

struct VideoEncoding {
  std::vector<Tensor> states;  // s_1..s_N, each [1, D]
  LstmState final;             // every layer after the last frame
};

VideoEncoding encode_video(const TaskModel& model, std::span<const Tensor> pooled, const RunMode& mode);

// Everything the language heads need from one clip.
struct ClipContext {
  Detection detection;
  VideoEncoding video;
  Tensor concepts;  // [K, d] embeddings of the detected words
};

ClipContext prepare_clip(const TaskModel& model, const Detection& detection, const RunMode& mode);
ClipContext prepare_clip(const TaskModel& model, const FeatureClip& clip, const RunMode& mode);

// Description. `caption` holds the gold words without <EOS>; the decoder is
// fed <bos> then the caption and predicts the caption followed by <EOS>.
struct DecoderOutput {
  Tensor log_probs;  // [T, |vocab|]
  Tensor beta;       // [T, K], undefined with output attention off
  Tensor gamma;      // [T, K], undefined with input attention off
};

DecoderOutput teacher_forced(const TaskModel& model, const ClipContext& ctx, std::span<const int> caption,
                             const RunMode& mode);

// -sum_t log p(y_t) + l1 (g(beta) + g(gamma)) + l2 L_con. Undefined attention
// stacks and an undefined `confidence` drop their terms.
Tensor description_loss(const Tensor& log_probs, std::span<const int> gold, const Tensor& beta,
                        const Tensor& gamma, const Tensor& confidence, std::span<const double> targets,
                        double lambda1, double lambda2);

struct Description {
  std::vector<int> tokens;                 // emitted ids, ending in <EOS> when it was produced
  std::vector<std::vector<double>> steps;  // per-step word distribution
  std::vector<int> words() const;          // tokens without the trailing <EOS>
};

// Greedy decoding until <EOS> or max_len tokens. <pad>, <blank> and <bos>
// are never emitted.
Description describe(const TaskModel& model, const ClipContext& ctx, std::size_t max_len);

// One decoder step for callers that pick the next word themselves: feeds
// `prev` and returns the next-word distribution.
struct DecoderState {
  LstmState lstm;
  int prev = kBos;
};
DecoderState begin_decoding(const ClipContext& ctx);
std::vector<double> decode_step(const TaskModel& model, const ClipContext& ctx, DecoderState& state);
// Argmax that skips <pad>, <blank> and <bos>; ties go to the lower id.
int greedy_word(std::span<const double> distribution);

// Fill-in-the-blank.
struct FibOutput {
  Tensor log_probs;  // [1, |vocab|]
  Tensor beta;       // [1, K] or undefined
  Tensor gamma;      // [T, K] or undefined
  std::size_t blank_index = 0;
};

// Throws InputError unless `sentence` holds exactly one <blank>.
FibOutput fib_forward(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence,
                      const RunMode& mode);
// Word distribution over the vocabulary.
std::vector<double> fib_predict(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence);
// Most likely non-reserved word.
int fib_answer(const Tensor& log_probs);
Tensor fib_loss(const Tensor& log_probs, int gold, const Tensor& beta, const Tensor& gamma,
                const Tensor& confidence, std::span<const double> targets, double lambda1, double lambda2);

// Pair scores for multiple-choice and retrieval.
struct PairScore {
  Tensor score;  // [1]
  Tensor gamma;  // [T, K] or undefined
};

// W_s^T relu(W_a h_T + b_a) with the sentence LSTM started from the video state.
PairScore mc_score(const TaskModel& model, const ClipContext& ctx, std::span<const int> sentence,
                   const RunMode& mode);
// sum over l != positive of max(0, S_l - S_positive + margin).
Tensor margin_hinge(std::span<const Tensor> scores, std::size_t positive, double margin);
Tensor mc_loss(std::span<const Tensor> scores, std::size_t answer, double margin,
               std::span<const Tensor> gammas, const Tensor& confidence, std::span<const double> targets,
               double lambda1, double lambda2);

// W_s^T maxout(CBP(s_N, h_T)); the query LSTM starts from zero and attends
// over the clip's concepts. Dropout precedes the maxout pieces in training.
PairScore retrieval_score(const TaskModel& model, const ClipContext& ctx, std::span<const int> query,
                          const RunMode& mode);

// Batch loss: rows[k][l] scores query k against clip l and clip k is the
// match for query k. Adds l1 * g(gamma) for every scored pair and l2 times
// each clip's concept loss (when confidences are given).
struct RetrievalBatch {
  std::vector<std::vector<Tensor>> scores;
  std::vector<Tensor> gammas;
  std::vector<Tensor> confidences;
  std::vector<std::vector<double>> targets;
};
Tensor retrieval_loss(const RetrievalBatch& batch, double margin, double lambda1, double lambda2);

struct SimilarityMatrix {
  std::vector<std::string> row_ids;  // sentences (queries)
  std::vector<std::string> col_ids;  // clips
  std::vector<double> scores;        // row-major

  std::size_t rows() const { return row_ids.size(); }
  std::size_t cols() const { return col_ids.size(); }
  double at(std::size_t r, std::size_t c) const { return scores[r * cols() + c]; }
};

// Fills every entry from `scorer(row, col)`, splitting rows over `threads`
// workers. Entries do not depend on the thread count.
SimilarityMatrix similarity_matrix(std::vector<std::string> row_ids, std::vector<std::string> col_ids,
                                   const std::function<double(std::size_t, std::size_t)>& scorer,
                                   std::size_t threads = 1);

// Runs body(i) for i in [0, n) over `threads` workers, each inheriting the
// caller's precision. Bodies never record onto a tape.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace ctsan

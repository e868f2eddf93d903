#pragma once

// Concept word detector. Each frame is reduced to a g x g x D' grid; L = g*g
// tracing LSTMs with shared weights attend over the grid cell by cell, and the
// concatenated final hidden states score every candidate concept word.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ctsan/feature_clip.hpp"
#include "ctsan/nn.hpp"

namespace ctsan {

struct DetectorConfig {
  std::size_t raw_channels = 8;
  std::size_t feature_dim = 8;  // D'
  std::size_t hidden = 8;       // must equal feature_dim
  std::size_t candidates = 20;  // V
  std::size_t grid = 4;
  std::size_t attn_channels = 32;
  std::size_t depth = 1;
  bool layer_norm = true;
  double forget_bias = 1.0;
  // Run one LSTM step on the one-hot attended first frame before the
  // recurrence starts, so each trace begins from its own grid cell. When off,
  // every trace starts from the zero state.
  bool seed_traces = true;

  std::size_t traces() const { return grid * grid; }
  void validate() const;
};

struct ConceptDetector {
  DetectorConfig config;
  Tensor reduce_kernel;  // [3, 3, C, D']
  Tensor reduce_bias;    // [D']
  Tensor attn_kernel;    // [3, 3, D', A]
  Tensor attn_bias;      // [A]
  Tensor score_kernel;   // [1, 1, A, 1]
  Tensor score_bias;     // [1]
  LstmParams lstm;       // shared by all traces
  Affine confidence;     // W_p [V, L*hidden], b_p [V]

  static ConceptDetector create(ParamStore& store, const std::string& prefix,
                                const DetectorConfig& config, Rng& rng);
};

// Raw [H, W, C] -> [g, g, D']. With f = ceil(max(H, W) / g) the grid is
// zero-padded at the bottom/right to g*f, max-pooled with an f x f window
// (skipped when f == 1), then passed through a same-padded 3x3 convolution.
Tensor reduce_frame(const ConceptDetector& det, const Tensor& raw);

// All traces advance together: row l of every [L, .] tensor belongs to trace l.
struct TraceState {
  LstmState lstm;  // batch L
  Tensor alpha;    // [L, g*g], the attention used for the latest step

  bool initialized() const { return alpha.defined() && !lstm.h.empty(); }
};

// alpha_0 is the identity (trace l hot at cell l). With seed_traces the LSTM
// consumes alpha_0 applied to `first_frame`; otherwise the state stays zero.
TraceState begin_traces(const ConceptDetector& det, const Tensor& first_frame);

// Attention from the previous hidden states: softmax over cells of
// conv1x1(relu(conv3x3(v * h_prev))). `v` is [g, g, D'], `h_prev` [L, D'].
Tensor trace_attention(const ConceptDetector& det, const Tensor& h_prev, const Tensor& v);

TraceState trace_step(const ConceptDetector& det, const TraceState& state, const Tensor& v);

// sigmoid(W_p [h_1; ...; h_L] + b_p) as a [V] vector.
Tensor concept_confidence(const ConceptDetector& det, const Tensor& final_hidden);

struct DetectorRollout {
  std::vector<Tensor> reduced;  // per frame [g, g, D']
  std::vector<Tensor> alphas;   // per frame [L, g*g]
  Tensor final_hidden;          // [L, hidden]
  Tensor confidence;            // [V]
};

DetectorRollout run_detector(const ConceptDetector& det, const FeatureClip& clip);

inline constexpr double kLogClamp = 1e-12;

// Mean sigmoid cross-entropy over the V candidates with logs clamped at 1e-12.
// Targets must be 0 or 1.
Tensor concept_loss(const Tensor& p, std::span<const double> targets);

struct ConceptSet {
  std::vector<std::size_t> candidates;  // indices into the candidate list
  std::vector<int> words;               // vocabulary ids
  std::vector<double> confidences;

  std::size_t size() const { return candidates.size(); }
};

// Top-K by confidence, ties broken by ascending word id. `candidate_words`
// maps candidate index to vocabulary id; when empty, the id is the index.
ConceptSet top_k(const Tensor& p, std::size_t k, std::span<const int> candidate_words = {});

ConceptSet detect(const ConceptDetector& det, const FeatureClip& clip, std::size_t k,
                  std::span<const int> candidate_words = {});

}  // namespace ctsan

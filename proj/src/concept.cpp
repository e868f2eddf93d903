#include "ctsan/concept.hpp"

#include <algorithm>
#include <numeric>

#include "ctsan/ops.hpp"

namespace ctsan {

namespace {

Tensor zero_parameter(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor conv_kernel(std::size_t k, std::size_t in, std::size_t out, Rng& rng) {
  return xavier_uniform({k, k, in, out}, k * k * in, k * k * out, rng);
}

// [.., c] + bias[c] over the trailing channel axis.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.shape().back();
  return reshape(add_rowwise(reshape(x, {x.numel() / c, c}), bias), x.shape());
}

}  // namespace

void DetectorConfig::validate() const {
  if (raw_channels == 0 || feature_dim == 0 || candidates == 0 || grid == 0 || attn_channels == 0 ||
      depth == 0) {
    throw UsageError("detector dimensions must be positive");
  }
  if (hidden != feature_dim) {
    throw UsageError("detector hidden size " + std::to_string(hidden) +
                     " must equal the reduced feature width " + std::to_string(feature_dim));
  }
}

ConceptDetector ConceptDetector::create(ParamStore& store, const std::string& prefix,
                                        const DetectorConfig& config, Rng& rng) {
  config.validate();
  ConceptDetector d;
  d.config = config;
  const std::size_t Dp = config.feature_dim, A = config.attn_channels;
  d.reduce_kernel = store.add(prefix + ".reduce.kernel", conv_kernel(3, config.raw_channels, Dp, rng));
  d.reduce_bias = store.add(prefix + ".reduce.bias", zero_parameter({Dp}));
  d.attn_kernel = store.add(prefix + ".attn.kernel", conv_kernel(3, Dp, A, rng));
  d.attn_bias = store.add(prefix + ".attn.bias", zero_parameter({A}));
  d.score_kernel = store.add(prefix + ".score.kernel", conv_kernel(1, A, 1, rng));
  d.score_bias = store.add(prefix + ".score.bias", zero_parameter({1}));
  LstmOptions opts;
  opts.layer_norm = config.layer_norm;
  opts.forget_bias = config.forget_bias;
  d.lstm = LstmParams::create(store, prefix + ".lstm", Dp, config.hidden, config.depth, opts, rng);
  d.confidence = Affine::create(store, prefix + ".confidence", config.traces() * config.hidden,
                                config.candidates, rng);
  return d;
}

Tensor reduce_frame(const ConceptDetector& det, const Tensor& raw) {
  const std::size_t g = det.config.grid;
  if (raw.rank() != 3) throw DimensionError("reduce_frame: expected [H,W,C], got " + shape_string(raw.shape()));
  const std::size_t H = raw.dim(0), W = raw.dim(1);
  if (H < g || W < g) {
    throw DimensionError("reduce_frame: spatial extent " + shape_string(raw.shape()) +
                         " is smaller than the " + std::to_string(g) + "x" + std::to_string(g) + " grid");
  }
  if (raw.dim(2) != det.config.raw_channels) {
    throw DimensionError("reduce_frame: expected " + std::to_string(det.config.raw_channels) +
                         " channels, got " + shape_string(raw.shape()));
  }
  const std::size_t f = (std::max(H, W) + g - 1) / g;
  Tensor x = raw;
  if (H != g * f || W != g * f) x = pad_bottom_right(x, g * f, g * f);
  if (f > 1) x = pool2d(x, PoolKind::kMax, f);
  return add_channel_bias(conv2d(x, det.reduce_kernel), det.reduce_bias);
}

TraceState begin_traces(const ConceptDetector& det, const Tensor& first_frame) {
  const std::size_t L = det.config.traces();
  TraceState s;
  std::vector<double> eye(L * L, 0.0);
  for (std::size_t l = 0; l < L; ++l) eye[l * L + l] = 1.0;
  s.alpha = Tensor::from({L, L}, std::move(eye));
  s.lstm = LstmState::zeros(det.lstm, L);
  if (det.config.seed_traces) {
    Tensor v = reshape(first_frame, {L, det.config.feature_dim});
    s.lstm = lstm_step(det.lstm, matmul(s.alpha, v), s.lstm);
  }
  return s;
}

Tensor trace_attention(const ConceptDetector& det, const Tensor& h_prev, const Tensor& v) {
  const std::size_t g = det.config.grid, L = det.config.traces(), Dp = det.config.feature_dim;
  if (v.shape() != Shape{g, g, Dp} || h_prev.shape() != Shape{L, Dp}) {
    throw DimensionError("trace_attention: frame " + shape_string(v.shape()) + " and hidden " +
                         shape_string(h_prev.shape()) + " do not match the detector");
  }
  Tensor cells = reshape(v, {L, Dp});
  // Row l*L + j holds v(j) * h_l.
  Tensor e = mul(repeat_rows(cells, L), repeat_each_row(h_prev, L));
  Tensor hidden = relu(add_channel_bias(conv2d(reshape(e, {L, g, g, Dp}), det.attn_kernel), det.attn_bias));
  Tensor scores = add(reshape(conv2d(hidden, det.score_kernel), {L, L}), det.score_bias);
  return softmax(scores, 1);
}

TraceState trace_step(const ConceptDetector& det, const TraceState& state, const Tensor& v) {
  if (!state.initialized()) throw UsageError("trace_step: trace state is not initialized");
  TraceState next;
  next.alpha = trace_attention(det, state.lstm.top(), v);
  Tensor context = matmul(next.alpha, reshape(v, {det.config.traces(), det.config.feature_dim}));
  next.lstm = lstm_step(det.lstm, context, state.lstm);
  return next;
}

Tensor concept_confidence(const ConceptDetector& det, const Tensor& final_hidden) {
  Tensor flat = reshape(final_hidden, {1, final_hidden.numel()});
  Tensor p = sigmoid(linear(flat, det.confidence.weight, det.confidence.bias));
  return reshape(p, {det.config.candidates});
}

DetectorRollout run_detector(const ConceptDetector& det, const FeatureClip& clip) {
  if (clip.frames.empty()) throw UsageError("run_detector: clip " + clip.id + " has no frames");
  DetectorRollout r;
  for (const auto& frame : clip.frames) r.reduced.push_back(reduce_frame(det, frame));
  TraceState state = begin_traces(det, r.reduced.front());
  for (const auto& v : r.reduced) {
    state = trace_step(det, state, v);
    r.alphas.push_back(state.alpha);
  }
  r.final_hidden = state.lstm.top();
  r.confidence = concept_confidence(det, r.final_hidden);
  return r;
}

Tensor concept_loss(const Tensor& p, std::span<const double> targets) {
  if (targets.size() != p.numel()) {
    throw DimensionError("concept_loss: " + std::to_string(targets.size()) + " targets for confidence " +
                         shape_string(p.shape()));
  }
  std::vector<double> pos(targets.begin(), targets.end()), negs(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != 0.0 && targets[i] != 1.0) {
      throw UsageError("concept_loss: target " + std::to_string(i) + " is not binary");
    }
    negs[i] = 1.0 - targets[i];
  }
  const Shape shape = p.shape();
  Tensor log_p = log(clamp_min(p, kLogClamp));
  Tensor log_q = log(clamp_min(add_scalar(neg(p), 1.0), kLogClamp));
  Tensor total = add(sum(mul(Tensor::from(shape, std::move(pos)), log_p)),
                     sum(mul(Tensor::from(shape, std::move(negs)), log_q)));
  return scale(total, -1.0 / static_cast<double>(p.numel()));
}

ConceptSet top_k(const Tensor& p, std::size_t k, std::span<const int> candidate_words) {
  const std::size_t V = p.numel();
  if (k == 0 || k > V) {
    throw UsageError("top_k: K=" + std::to_string(k) + " must be in [1, " + std::to_string(V) + "]");
  }
  if (!candidate_words.empty() && candidate_words.size() != V) {
    throw DimensionError("top_k: " + std::to_string(candidate_words.size()) + " candidate words for " +
                         std::to_string(V) + " confidences");
  }
  auto word_of = [&](std::size_t i) {
    return candidate_words.empty() ? static_cast<int>(i) : candidate_words[i];
  };
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  const auto values = p.data();
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (values[a] != values[b]) return values[a] > values[b];
                      return word_of(a) < word_of(b);
                    });
  ConceptSet set;
  for (std::size_t i = 0; i < k; ++i) {
    set.candidates.push_back(order[i]);
    set.words.push_back(word_of(order[i]));
    set.confidences.push_back(values[order[i]]);
  }
  return set;
}

ConceptSet detect(const ConceptDetector& det, const FeatureClip& clip, std::size_t k,
                  std::span<const int> candidate_words) {
  if (k > det.config.candidates) {
    throw UsageError("detect: K=" + std::to_string(k) + " exceeds the " +
                     std::to_string(det.config.candidates) + " candidates");
  }
  return top_k(run_detector(det, clip).confidence, k, candidate_words);
}

}  // namespace ctsan

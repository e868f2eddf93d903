#include "ctsan/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "binary_io.hpp"
#include "ctsan/ops.hpp"

namespace ctsan {

namespace {

Tensor float_parameter(Shape shape, std::vector<double> values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
  return Tensor::parameter(std::move(shape), std::move(values));
}

}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor tensor) {
  if (contains(name)) throw UsageError("duplicate parameter name " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(name, tensor);
  return tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw UsageError("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::vector<NamedTensor> ParamStore::with_prefix(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (const auto& e : entries_) {
    if (e.first.starts_with(prefix)) out.push_back(e);
  }
  return out;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  io::Writer w;
  w.bytes("CTSN");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  w.write_file(path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  io::Reader r(path);
  if (r.bytes(4) != "CTSN") throw FormatError("bad checkpoint magic in " + path, 0);
  const auto version_at = r.offset();
  if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = r.u32();
    std::string name = r.bytes(len);
    const auto rank_at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto at = r.offset();
      const std::uint64_t e = r.u64();
      if (e == 0 || e > (1ull << 32)) throw FormatError("implausible extent", at);
      shape.push_back(static_cast<std::size_t>(e));
      numel *= e;
    }
    r.need(numel * 4);
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = static_cast<double>(r.f32());
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

std::size_t assign_from(ParamStore& store, const std::vector<NamedTensor>& loaded,
                        const std::string& prefix) {
  std::size_t copied = 0;
  for (auto [name, target] : store.with_prefix(prefix)) {
    auto it = std::find_if(loaded.begin(), loaded.end(), [&](const auto& e) { return e.first == name; });
    if (it == loaded.end()) throw UsageError("checkpoint is missing tensor " + name);
    if (it->second.shape() != target.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " +
                           shape_string(it->second.shape()) + ", model expects " +
                           shape_string(target.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), target.mutable_data().begin());
    ++copied;
  }
  return copied;
}

Tensor xavier_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return float_parameter(shape, std::move(v));
}

Tensor xavier_init(const Shape& shape, Rng& rng) {
  if (shape.size() != 2) throw DimensionError("xavier_init expects a 2-d shape, got " + shape_string(shape));
  return xavier_uniform(shape, shape[1], shape[0], rng);
}

Tensor dropout_apply(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.numel());
  const double scale_up = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = keep(rng) ? scale_up : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor Dropout::operator()(const Tensor& x) const {
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw UsageError("training dropout needs a random generator");
  return dropout_apply(x, rate, training, *rng);
}

LstmParams LstmParams::create(ParamStore& store, const std::string& prefix, std::size_t input_size,
                              std::size_t hidden_size, std::size_t depth,
                              const LstmOptions& options, Rng& rng) {
  if (depth == 0) throw UsageError("LSTM depth must be at least 1");
  LstmParams p;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  p.layer_norm = options.layer_norm;
  const std::size_t H = hidden_size;
  for (std::size_t k = 0; k < depth; ++k) {
    const std::string base = prefix + ".layer" + std::to_string(k) + ".";
    const std::size_t in = k == 0 ? input_size : H;
    LstmLayer layer;
    layer.w_x = store.add(base + "w_x", xavier_init({4 * H, in}, rng));
    layer.w_h = store.add(base + "w_h", xavier_init({4 * H, H}, rng));
    std::vector<double> b(4 * H, 0.0);
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(H), b.begin() + static_cast<std::ptrdiff_t>(2 * H),
              options.forget_bias);
    layer.bias = store.add(base + "bias", float_parameter({4 * H}, std::move(b)));
    if (options.layer_norm) {
      layer.ln_x_gain = store.add(base + "ln_x_gain", Tensor::parameter({4 * H}, std::vector<double>(4 * H, 1.0)));
      layer.ln_x_bias = store.add(base + "ln_x_bias", Tensor::parameter({4 * H}, std::vector<double>(4 * H, 0.0)));
      layer.ln_h_gain = store.add(base + "ln_h_gain", Tensor::parameter({4 * H}, std::vector<double>(4 * H, 1.0)));
      layer.ln_h_bias = store.add(base + "ln_h_bias", Tensor::parameter({4 * H}, std::vector<double>(4 * H, 0.0)));
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

LstmState LstmState::zeros(const LstmParams& params, std::size_t batch) {
  LstmState s;
  for (std::size_t k = 0; k < params.depth(); ++k) {
    s.h.push_back(Tensor::zeros({batch, params.hidden_size}));
    s.c.push_back(Tensor::zeros({batch, params.hidden_size}));
  }
  return s;
}

CellOutput lstm_cell(const LstmLayer& layer, bool layer_norm, const Tensor& x, const Tensor& h_prev,
                     const Tensor& c_prev) {
  const std::size_t H = layer.w_h.dim(1);
  if (x.rank() != 2 || x.dim(1) != layer.w_x.dim(1) || h_prev.shape() != Shape{x.dim(0), H} ||
      c_prev.shape() != h_prev.shape()) {
    throw DimensionError("lstm_cell: input " + shape_string(x.shape()) + ", state " +
                         shape_string(h_prev.shape()) + " do not match weights " +
                         shape_string(layer.w_x.shape()));
  }
  Tensor from_x = matmul_nt(x, layer.w_x);
  Tensor from_h = matmul_nt(h_prev, layer.w_h);
  if (layer_norm) {
    from_x = add_rowwise(mul_rowwise(layer_norm_rows(from_x, kLayerNormEps), layer.ln_x_gain), layer.ln_x_bias);
    from_h = add_rowwise(mul_rowwise(layer_norm_rows(from_h, kLayerNormEps), layer.ln_h_gain), layer.ln_h_bias);
  }
  Tensor gates = add_rowwise(add(from_x, from_h), layer.bias);
  Tensor i = sigmoid(slice_cols(gates, 0, H));
  Tensor f = sigmoid(slice_cols(gates, H, H));
  Tensor g = tanh(slice_cols(gates, 2 * H, H));
  Tensor o = sigmoid(slice_cols(gates, 3 * H, H));
  Tensor c = add(mul(f, c_prev), mul(i, g));
  Tensor h = mul(o, tanh(c));
  return {h, c};
}

LstmState lstm_step(const LstmParams& params, const Tensor& x, const LstmState& prev,
                    const Dropout& between_layers) {
  if (prev.h.size() != params.depth() || prev.c.size() != params.depth()) {
    throw UsageError("lstm_step: state depth does not match parameters");
  }
  LstmState next;
  Tensor input = x;
  for (std::size_t k = 0; k < params.depth(); ++k) {
    if (k > 0) input = between_layers(input);
    CellOutput out = lstm_cell(params.layers[k], params.layer_norm, input, prev.h[k], prev.c[k]);
    next.h.push_back(out.h);
    next.c.push_back(out.c);
    input = out.h;
  }
  return next;
}

BlstmOutput blstm_run(const LstmParams& fwd, const LstmParams& bwd, std::span<const Tensor> inputs,
                      const LstmState& init_fwd, const LstmState& init_bwd,
                      const Dropout& between_layers) {
  if (inputs.empty()) throw UsageError("blstm_run: empty input sequence");
  const std::size_t T = inputs.size();
  BlstmOutput out;
  out.forward.reserve(T);
  LstmState state = init_fwd;
  for (std::size_t t = 0; t < T; ++t) {
    state = lstm_step(fwd, inputs[t], state, between_layers);
    out.forward.push_back(state.top());
  }
  out.backward.resize(T);
  state = init_bwd;
  for (std::size_t t = T; t-- > 0;) {
    state = lstm_step(bwd, inputs[t], state, between_layers);
    out.backward[t] = state.top();
  }
  return out;
}

Affine Affine::create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                      Rng& rng) {
  Affine a;
  a.weight = store.add(prefix + ".weight", xavier_init({out, in}, rng));
  a.bias = store.add(prefix + ".bias", Tensor::parameter({out}, std::vector<double>(out, 0.0)));
  return a;
}

Tensor maxout(const Tensor& x, std::span<const Affine> pieces) {
  if (pieces.size() < 2) throw UsageError("maxout needs at least two pieces");
  Tensor best = linear(x, pieces[0].weight, pieces[0].bias);
  for (std::size_t k = 1; k < pieces.size(); ++k) {
    best = maximum(best, linear(x, pieces[k].weight, pieces[k].bias));
  }
  return best;
}

SketchParams SketchParams::random(std::size_t dim_a, std::size_t dim_b, std::size_t out_dim,
                                  std::uint64_t seed) {
  if (out_dim == 0) throw UsageError("sketch output dimension must be positive");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> bucket(0, out_dim - 1);
  std::bernoulli_distribution coin(0.5);
  SketchParams s;
  s.out_dim = out_dim;
  auto fill = [&](std::size_t n, std::vector<std::size_t>& h, std::vector<double>& sg) {
    h.resize(n);
    sg.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = bucket(rng);
      sg[i] = coin(rng) ? 1.0 : -1.0;
    }
  };
  fill(dim_a, s.hash_a, s.sign_a);
  fill(dim_b, s.hash_b, s.sign_b);
  return s;
}

Tensor compact_bilinear(const Tensor& a, const Tensor& b, const SketchParams& sketch) {
  Tensor sa = count_sketch(a, sketch.hash_a, sketch.sign_a, sketch.out_dim);
  Tensor sb = count_sketch(b, sketch.hash_b, sketch.sign_b, sketch.out_dim);
  return fft_pair_convolve(sa, sb);
}

}  // namespace ctsan

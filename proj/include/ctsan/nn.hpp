#pragma once

// Reusable layers: layer-normalised LSTM cells, stacked and bidirectional
// runners, dropout, maxout, count-sketch compact bilinear pooling, Xavier
// initialisation, and the named parameter registry with its checkpoint
// format.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctsan/gradcheck.hpp"
#include "ctsan/tensor.hpp"

namespace ctsan {

using Rng = std::mt19937_64;

// Ordered registry of trainable tensors. Names are unique; entries keep
// insertion order, which is also checkpoint order.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor> with_prefix(const std::string& prefix) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

// Checkpoint file: "CTSN", u32 version, u32 tensor count, then per tensor
// u32 name length, UTF-8 name, u32 rank, u64 extents, f32 values. All
// integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);
// Overwrites values of store entries whose names start with `prefix` from the
// loaded tensors. Every matching store entry must be present with the same
// shape. Returns how many tensors were copied.
std::size_t assign_from(ParamStore& store, const std::vector<NamedTensor>& loaded,
                        const std::string& prefix = "");

// Uniform in +-sqrt(6 / (fan_in + fan_out)); 2-d shapes are [fan_out, fan_in].
Tensor xavier_init(const Shape& shape, Rng& rng);
Tensor xavier_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout_apply(const Tensor& x, double rate, bool training, Rng& rng);

struct Dropout {
  double rate = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  Tensor operator()(const Tensor& x) const;
};

struct LstmOptions {
  bool layer_norm = true;
  double forget_bias = 1.0;
};

inline constexpr double kLayerNormEps = 1e-5;

// One layer: gates = LN(x W_x^T) * gx + bx + LN(h W_h^T) * gh + bh + bias,
// gate blocks ordered input, forget, cell, output.
struct LstmLayer {
  Tensor w_x;        // [4H, in]
  Tensor w_h;        // [4H, H]
  Tensor bias;       // [4H]
  Tensor ln_x_gain;  // [4H]
  Tensor ln_x_bias;
  Tensor ln_h_gain;
  Tensor ln_h_bias;
};

struct LstmParams {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  bool layer_norm = true;
  std::vector<LstmLayer> layers;

  std::size_t depth() const { return layers.size(); }

  static LstmParams create(ParamStore& store, const std::string& prefix, std::size_t input_size,
                           std::size_t hidden_size, std::size_t depth, const LstmOptions& options,
                           Rng& rng);
};

// Per-layer hidden and cell states, each [batch, H].
struct LstmState {
  std::vector<Tensor> h;
  std::vector<Tensor> c;

  static LstmState zeros(const LstmParams& params, std::size_t batch = 1);
  const Tensor& top() const { return h.back(); }
};

struct CellOutput {
  Tensor h;
  Tensor c;
};

CellOutput lstm_cell(const LstmLayer& layer, bool layer_norm, const Tensor& x, const Tensor& h_prev,
                     const Tensor& c_prev);

// Advances every layer one step; layer k > 0 consumes dropout(h of layer k-1).
LstmState lstm_step(const LstmParams& params, const Tensor& x, const LstmState& prev,
                    const Dropout& between_layers = {});

struct BlstmOutput {
  std::vector<Tensor> forward;   // top-layer h_f per position
  std::vector<Tensor> backward;  // top-layer h_b per position
};

// Forward states left to right from `init_fwd`, backward states right to left
// from `init_bwd`.
BlstmOutput blstm_run(const LstmParams& fwd, const LstmParams& bwd, std::span<const Tensor> inputs,
                      const LstmState& init_fwd, const LstmState& init_bwd,
                      const Dropout& between_layers = {});

struct Affine {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Affine create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       Rng& rng);
};

// Elementwise max over affine pieces; ties go to the earliest piece.
Tensor maxout(const Tensor& x, std::span<const Affine> pieces);

struct SketchParams {
  std::size_t out_dim = 0;
  std::vector<std::size_t> hash_a;
  std::vector<double> sign_a;
  std::vector<std::size_t> hash_b;
  std::vector<double> sign_b;

  static SketchParams random(std::size_t dim_a, std::size_t dim_b, std::size_t out_dim,
                             std::uint64_t seed);
};

// Count-sketch both inputs to out_dim and circularly convolve the sketches.
Tensor compact_bilinear(const Tensor& a, const Tensor& b, const SketchParams& sketch);

}  // namespace ctsan

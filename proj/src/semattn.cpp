#include "ctsan/semattn.hpp"

#include "ctsan/ops.hpp"

namespace ctsan {

namespace {

void require_concepts(const Tensor& concepts, std::size_t word_dim, const char* op) {
  if (!concepts.defined() || concepts.rank() != 2 || concepts.dim(0) == 0) {
    throw UsageError(std::string(op) + ": empty concept set");
  }
  if (concepts.dim(1) != word_dim) {
    throw DimensionError(std::string(op) + ": concept embeddings " + shape_string(concepts.shape()) +
                         " do not have width " + std::to_string(word_dim));
  }
}

}  // namespace

AttnParams AttnParams::create(ParamStore& store, const std::string& prefix, std::size_t word_dim,
                              std::size_t hidden, Rng& rng, bool with_output) {
  AttnParams p;
  p.w_gamma = store.add(prefix + ".w_gamma", xavier_init({word_dim, word_dim}, rng));
  p.w_x = store.add(prefix + ".w_x", xavier_init({hidden, word_dim}, rng));
  p.w_xa = store.add(prefix + ".w_xa", Tensor::parameter({word_dim}, std::vector<double>(word_dim, 1.0)));
  if (with_output) {
    p.w_beta = store.add(prefix + ".w_beta", xavier_init({hidden, word_dim}, rng));
    p.w_ha = store.add(prefix + ".w_ha", Tensor::parameter({hidden}, std::vector<double>(hidden, 1.0)));
  }
  return p;
}

InputAttention input_attention(const Tensor& emb, const Tensor& concepts, const AttnParams& params) {
  require_concepts(concepts, params.w_gamma.dim(0), "input_attention");
  InputAttention out;
  out.gamma = softmax(matmul_nt(matmul(emb, params.w_gamma), concepts), 1);
  Tensor attended = mul_rowwise(matmul(out.gamma, concepts), params.w_xa);
  out.x = matmul_nt(add(emb, attended), params.w_x);
  return out;
}

Tensor plain_input(const Tensor& emb, const AttnParams& params) { return matmul_nt(emb, params.w_x); }

OutputAttention output_attention(const Tensor& h, const Tensor& concepts, const AttnParams& params) {
  if (!params.w_beta.defined()) throw UsageError("output_attention: parameters were created without it");
  require_concepts(concepts, params.w_beta.dim(1), "output_attention");
  Tensor projected = matmul_nt(tanh(concepts), params.w_beta);  // [K, D], row i = W_beta tanh(a_i)
  OutputAttention out;
  out.beta = softmax(matmul_nt(h, projected), 1);
  out.p = add(h, mul_rowwise(matmul(out.beta, projected), params.w_ha));
  return out;
}

Tensor attention_regularizer(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("attention_regularizer: expected [T,K], got " + shape_string(a.shape()));
  for (double v : a.data()) {
    if (v < 0.0) throw UsageError("attention_regularizer: negative attention weight");
  }
  Tensor column_term = sqrt(sum(square(sum_axis(a, 0))));
  Tensor row_term = square(sum(sqrt(sum_axis(a, 1))));
  return add(column_term, row_term);
}

}  // namespace ctsan

#pragma once

// Semantic attention over detected concept words and the attention
// regularizer. Concept embeddings are passed as rows of a [K, d] matrix.
// Both attentions accept several query rows at once; row t of every output
// belongs to query row t.

#include <string>

#include "ctsan/nn.hpp"

namespace ctsan {

struct AttnParams {
  Tensor w_gamma;  // [d, d]
  Tensor w_x;      // [D, d]
  Tensor w_xa;     // [d]
  Tensor w_beta;   // [D, d]
  Tensor w_ha;     // [D]

  // `with_output` false skips W_beta and w_ha (models without a word output).
  static AttnParams create(ParamStore& store, const std::string& prefix, std::size_t word_dim,
                           std::size_t hidden, Rng& rng, bool with_output = true);
};

struct InputAttention {
  Tensor x;      // [T, D]
  Tensor gamma;  // [T, K]
};

// gamma_t = softmax_i(emb_t^T W_gamma a_i);
// x_t = W_x (emb_t + w_xa * sum_i gamma_ti a_i).
InputAttention input_attention(const Tensor& emb, const Tensor& concepts, const AttnParams& params);

// x_t = W_x emb_t, the input path with attention switched off.
Tensor plain_input(const Tensor& emb, const AttnParams& params);

struct OutputAttention {
  Tensor p;     // [T, D]
  Tensor beta;  // [T, K]
};

// beta_t = softmax_i(h_t^T W_beta tanh(a_i));
// p_t = h_t + w_ha * sum_i beta_ti W_beta tanh(a_i).
OutputAttention output_attention(const Tensor& h, const Tensor& concepts, const AttnParams& params);

// g(A) = sqrt(sum_i (sum_t A_ti)^2) + (sum_t sqrt(sum_i A_ti))^2 for a
// nonnegative [T, K] matrix. sqrt has a zero subgradient at 0.
Tensor attention_regularizer(const Tensor& a);

}  // namespace ctsan

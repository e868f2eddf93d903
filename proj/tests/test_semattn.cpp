#include <gtest/gtest.h>

#include <cmath>

#include "ctsan/ops.hpp"
#include "ctsan/semattn.hpp"
#include "test_util.hpp"

namespace ctsan {
namespace {

using testing::random_tensor;

class SemattnTest : public ::testing::Test {
 protected:
  PrecisionScope precision_{Precision::kF64};
  ParamStore store_;
  Rng rng_{1};
  AttnParams params_ = AttnParams::create(store_, "attn", 4, 5, rng_);
};

TEST_F(SemattnTest, SingleConceptGetsAllWeight) {
  Tensor emb = random_tensor({3, 4}, rng_, -1, 1, false);
  Tensor a = random_tensor({1, 4}, rng_, -1, 1, false);
  Tensor gamma = input_attention(emb, a, params_).gamma;
  for (double g : gamma.data()) EXPECT_DOUBLE_EQ(g, 1.0);
  Tensor h = random_tensor({2, 5}, rng_, -1, 1, false);
  Tensor beta = output_attention(h, a, params_).beta;
  for (double b : beta.data()) EXPECT_DOUBLE_EQ(b, 1.0);
}

TEST_F(SemattnTest, ZeroBilinearGivesUniformWeights) {
  for (double& v : params_.w_gamma.mutable_data()) v = 0.0;
  auto out = input_attention(random_tensor({2, 4}, rng_, -1, 1, false), random_tensor({3, 4}, rng_, -1, 1, false), params_);
  for (double g : out.gamma.data()) EXPECT_NEAR(g, 1.0 / 3.0, 1e-15);
}

TEST_F(SemattnTest, ZeroGatesBypassConcepts) {
  for (double& v : params_.w_xa.mutable_data()) v = 0.0;
  for (double& v : params_.w_ha.mutable_data()) v = 0.0;
  Tensor emb = random_tensor({2, 4}, rng_, -1, 1, false);
  Tensor a = random_tensor({3, 4}, rng_, -1, 1, false);
  Tensor x = input_attention(emb, a, params_).x;
  Tensor direct = plain_input(emb, params_);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x[i], direct[i], 1e-15);
  Tensor h = random_tensor({2, 5}, rng_, -1, 1, false);
  Tensor p = output_attention(h, a, params_).p;
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_EQ(p[i], h[i]);
}

TEST_F(SemattnTest, EmptyConceptSetIsRejected) {
  EXPECT_THROW(input_attention(Tensor::zeros({1, 4}), Tensor(), params_), UsageError);
  EXPECT_THROW(output_attention(Tensor::zeros({1, 5}), Tensor(), params_), UsageError);
  EXPECT_THROW(input_attention(Tensor::zeros({1, 4}), Tensor::zeros({2, 3}), params_), DimensionError);
}

TEST_F(SemattnTest, WeightsStayOnSimplex) {
  for (int trial = 0; trial < 50; ++trial) {
    Tensor emb = random_tensor({3, 4}, rng_, -3, 3, false);
    Tensor a = random_tensor({5, 4}, rng_, -3, 3, false);
    Tensor h = random_tensor({3, 5}, rng_, -3, 3, false);
    for (const Tensor& w : {input_attention(emb, a, params_).gamma, output_attention(h, a, params_).beta}) {
      for (std::size_t t = 0; t < 3; ++t) {
        double s = 0;
        for (std::size_t i = 0; i < 5; ++i) {
          EXPECT_GE(w.at(t, i), 0.0);
          s += w.at(t, i);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST_F(SemattnTest, InputAttentionIsPermutationEquivariant) {
  Tensor emb = random_tensor({2, 4}, rng_, -1, 1, false);
  Tensor a = random_tensor({3, 4}, rng_, -1, 1, false);
  const std::size_t perm[] = {2, 0, 1};
  std::vector<double> rows;
  for (std::size_t i : perm)
    for (std::size_t k = 0; k < 4; ++k) rows.push_back(a.at(i, k));
  auto base = input_attention(emb, a, params_);
  auto permuted = input_attention(emb, Tensor::from({3, 4}, rows), params_);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(permuted.gamma.at(t, i), base.gamma.at(t, perm[i]), 1e-12);
  for (std::size_t i = 0; i < base.x.numel(); ++i) EXPECT_NEAR(permuted.x[i], base.x[i], 1e-6);
}

TEST_F(SemattnTest, BothAttentionsGradientCheck) {
  Tensor emb = random_tensor({2, 4}, rng_);
  Tensor a = random_tensor({3, 4}, rng_);
  Tensor w = random_tensor({2, 5}, rng_, -1, 1, false);
  auto loss = [&] {
    auto in = input_attention(emb, a, params_);
    auto out = output_attention(tanh(in.x), a, params_);
    return add(sum(mul(out.p, w)), add(sum(square(in.gamma)), sum(square(out.beta))));
  };
  auto params = store_.entries();
  params.emplace_back("emb", emb);
  params.emplace_back("concepts", a);
  auto report = grad_check(loss, params);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

// Scalar evaluation of the same formulas on plain loops.
double regularizer_oracle(const Tensor& a) {
  const std::size_t T = a.dim(0), K = a.dim(1);
  double p_term = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    double col = 0.0;
    for (std::size_t t = 0; t < T; ++t) col += a.at(t, i);
    p_term += std::pow(col, 2.0);
  }
  double q_term = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double row = 0.0;
    for (std::size_t i = 0; i < K; ++i) row += a.at(t, i);
    q_term += std::pow(row, 0.5);
  }
  return std::pow(p_term, 0.5) + std::pow(q_term, 2.0);
}

TEST_F(SemattnTest, RegularizerExamples) {
  EXPECT_EQ(attention_regularizer(Tensor::zeros({3, 2})).item(), 0.0);
  EXPECT_DOUBLE_EQ(attention_regularizer(Tensor::from({1, 1}, {1.0})).item(), 2.0);
  EXPECT_THROW(attention_regularizer(Tensor::from({1, 2}, {0.5, -0.1})), UsageError);
  Tensor a = random_tensor({3, 4}, rng_, 0, 1, false);
  EXPECT_NEAR(attention_regularizer(a).item(), regularizer_oracle(a), 1e-10);
}

TEST_F(SemattnTest, RegularizerIsHomogeneousOfDegreeOne) {
  Tensor a = random_tensor({4, 3}, rng_, 0, 1, false);
  const double g = attention_regularizer(a).item();
  for (double lambda : {0.5, 2.0}) EXPECT_NEAR(attention_regularizer(scale(a, lambda)).item(), lambda * g, 1e-10);
}

TEST_F(SemattnTest, RegularizerGradientHandlesZeroRows) {
  Tensor a = Tensor::parameter({2, 3}, {0.2, 0.5, 0.1, 0, 0, 0});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(attention_regularizer(a));
  }
  for (double g : a.grad()) EXPECT_TRUE(std::isfinite(g));
  Tensor b = random_tensor({3, 3}, rng_, 0.1, 1);
  auto report = grad_check([&] { return attention_regularizer(b); }, {{"a", b}});
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

}  // namespace
}  // namespace ctsan

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>

#include "priveri/error.hpp"
#include "priveri/numerics/autodiff.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/optim.hpp"
#include "priveri/numerics/prng.hpp"
#include "priveri/numerics/sampling.hpp"
#include "priveri/numerics/svd.hpp"
#include "priveri/numerics/tensor.hpp"

using namespace priveri;
using namespace priveri::numerics;

namespace {

Tensor random_matrix(std::size_t m, std::size_t n, Prng& rng) {
  Tensor t = Tensor::zeros(m, n);
  for (auto& x : t.data()) x = rng.normal();
  return t;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd e(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) e(i, j) = t(i, j);
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor and PRNG

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Prng, MatchesReferenceStream) {
  // Independent xoshiro256** + splitmix64 implementation, seed 42.
  Prng rng(42);
  EXPECT_EQ(rng.next_u64(), 0x15780b2e0c2ec716ULL);
  EXPECT_EQ(rng.next_u64(), 0x6104d9866d113a7eULL);
  EXPECT_EQ(rng.next_u64(), 0xae17533239e499a1ULL);
  EXPECT_EQ(rng.next_u64(), 0xecb8ad4703b360a1ULL);
}

TEST(Prng, SameSeedSameStream) {
  Prng a(7), b(7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Prng c(7), d(8);
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Prng, UniformBelowStaysInRange) {
  Prng rng(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.uniform_below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(rng.uniform_below(0), ArgumentError);
}

TEST(Prng, NormalMoments) {
  Prng rng(11);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    ASSERT_TRUE(std::isfinite(x));
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

// ---------------------------------------------------------------------------
// Kernels

TEST(Matmul, IdentityAndHandExamples) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), a), a);
  EXPECT_EQ(matmul(a, Tensor::matrix({{0}, {1}})), Tensor::matrix({{2}, {4}}));
  EXPECT_THROW(matmul(a, Tensor::zeros(3, 2)), DimensionError);
}

TEST(Matmul, RandomMatchesTripleLoopBitExactly) {
  Prng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor a = random_matrix(8, 8, rng), b = random_matrix(8, 8, rng);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < 8; ++t) acc += a(i, t) * b(t, j);
        ASSERT_EQ(c(i, j), acc);
      }
    }
  }
}

TEST(Matmul, VariantsAgreeWithEigen) {
  Prng rng(6);
  const Tensor a = random_matrix(5, 7, rng), b = random_matrix(7, 4, rng), c = random_matrix(4, 7, rng),
               d = random_matrix(5, 4, rng);
  EXPECT_LT((to_eigen(matmul(a, b)) - to_eigen(a) * to_eigen(b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((to_eigen(matmul_nt(a, c)) - to_eigen(a) * to_eigen(c).transpose()).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_LT((to_eigen(matmul_tn(a, d)) - to_eigen(a).transpose() * to_eigen(d)).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_EQ(transpose(transpose(a)), a);
}

TEST(Softmax, UniformAndForcedRows) {
  const Tensor ones({3, 3}, std::vector<double>(9, 1.0));
  const Tensor s = row_softmax_masked(Tensor::zeros(3, 3), ones);
  for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  Prng rng(1);
  const Tensor forced = row_softmax_masked(random_matrix(3, 3, rng), Tensor::identity(3));
  EXPECT_EQ(forced, Tensor::identity(3));
}

TEST(Softmax, CausalMatchesExpOracle) {
  Prng rng(2);
  const Tensor scores = random_matrix(3, 3, rng);
  const Tensor mask = Tensor::matrix({{1, 0, 0}, {1, 1, 0}, {1, 1, 1}});
  const Tensor out = row_softmax_masked(scores, mask);
  for (std::size_t i = 0; i < 3; ++i) {
    long double z = 0.0L;
    for (std::size_t j = 0; j <= i; ++j) z += std::exp(static_cast<long double>(scores(i, j)));
    for (std::size_t j = 0; j < 3; ++j) {
      const double expect = j <= i ? static_cast<double>(std::exp(static_cast<long double>(scores(i, j))) / z) : 0.0;
      EXPECT_NEAR(out(i, j), expect, 1e-15);
      if (j > i) EXPECT_EQ(out(i, j), 0.0);
    }
  }
}

TEST(Softmax, MaskedValuesNeverMatter) {
  Prng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 1 + rng.uniform_below(9);
    Tensor mask = Tensor::zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) mask(i, j) = rng.uniform_below(2) ? 1.0 : 0.0;
      mask(i, rng.uniform_below(n)) = 1.0;
    }
    Tensor scores = random_matrix(n, n, rng);
    Tensor zeroed = scores;
    Tensor garbage = scores;
    for (std::size_t i = 0; i < n * n; ++i) {
      if (mask[i] == 0.0) {
        zeroed[i] = 0.0;
        garbage[i] = 1e300 * rng.normal();
      }
    }
    const Tensor ref = row_softmax_masked(zeroed, mask);
    ASSERT_TRUE(ref.bit_equal(row_softmax_masked(scores, mask)));
    ASSERT_TRUE(ref.bit_equal(row_softmax_masked(garbage, mask)));
  }
}

TEST(Softmax, AllZeroMaskRowIsDegenerate) {
  EXPECT_THROW(row_softmax_masked(Tensor::zeros(2, 2), Tensor::matrix({{1, 0}, {0, 0}})),
               DegenerateRowError);
}

TEST(RmsNorm, ZeroUnitAndOracle) {
  const Tensor gamma = Tensor::vector(std::vector<double>(8, 1.0));
  EXPECT_EQ(rms_norm(Tensor::vector(std::vector<double>(8, 0.0)), gamma, 1e-6),
            Tensor::vector(std::vector<double>(8, 0.0)));
  const Tensor unit = Tensor::vector({1, -1, 1, -1, 1, -1, 1, -1});
  const Tensor u = rms_norm(unit, gamma, 1e-300);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(u[i], unit[i], 1e-15);

  Prng rng(9);
  Tensor x({8}), g({8});
  for (std::size_t i = 0; i < 8; ++i) {
    x[i] = rng.normal();
    g[i] = rng.normal();
  }
  const Tensor y = rms_norm(x, g, 1e-6);
  double ms = 0.0;
  for (std::size_t i = 0; i < 8; ++i) ms += x[i] * x[i];
  ms /= 8.0;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y[i], g[i] * x[i] / std::sqrt(ms + 1e-6), 1e-15);
}

TEST(Gelu, TanhFormulaAndDerivative) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double expect =
        0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    EXPECT_NEAR(gelu(Tensor::vector({x}))[0], expect, 1e-15);
    const double h = 1e-6;
    const double fd = (gelu(Tensor::vector({x + h}))[0] - gelu(Tensor::vector({x - h}))[0]) / (2 * h);
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-8);
  }
}

TEST(Argmax, TiesResolveLow) {
  const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
  EXPECT_EQ(second_argmax(v), 2u);
  const std::vector<double> w{5.0, 1.0, 4.0};
  EXPECT_EQ(second_argmax(w), 2u);
  EXPECT_EQ(l1_distance(v, w), 4.0 + 2.0 + 1.0);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sampling, ForcedFullSetAndErrors) {
  Prng rng(1);
  EXPECT_EQ(sample_without_replacement(3, 3, rng), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_THROW(sample_without_replacement(3, 4, rng), ArgumentError);
  EXPECT_THROW(sample_without_replacement(3, 0, rng), ArgumentError);
}

TEST(Sampling, DeterministicUnderSeed) {
  Prng a(42), b(42);
  EXPECT_EQ(sample_without_replacement(10, 2, a), sample_without_replacement(10, 2, b));
}

TEST(Sampling, SortedDistinctInRange) {
  Prng rng(8);
  for (int rep = 0; rep < 2000; ++rep) {
    const std::size_t n = 1 + rng.uniform_below(40);
    const std::size_t k = 1 + rng.uniform_below(n);
    const auto s = sample_without_replacement(n, k, rng);
    ASSERT_EQ(s.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      ASSERT_GE(s[i], 1u);
      ASSERT_LE(s[i], n);
      if (i > 0) ASSERT_LT(s[i - 1], s[i]);
    }
  }
}

TEST(Sampling, ChiSquareUniformOverSubsets) {
  Prng rng(2024);
  const int draws = 1000000;
  std::map<std::vector<std::size_t>, int> counts;
  for (int i = 0; i < draws; ++i) ++counts[sample_without_replacement(17, 3, rng)];
  ASSERT_EQ(counts.size(), 680u);
  const double expected = draws / 680.0;
  const double se = std::sqrt(expected * (1.0 - 1.0 / 680.0));
  double chi2 = 0.0;
  for (const auto& [subset, c] : counts) {
    EXPECT_LE(std::fabs(c - expected), 5.0 * se);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  const boost::math::chi_squared dist(679.0);
  EXPECT_LT(chi2, boost::math::quantile(boost::math::complement(dist, 1e-3)));
}

// ---------------------------------------------------------------------------
// SVD

TEST(Svd, FullRankRecovery) {
  Prng rng(12);
  const Tensor w = random_matrix(6, 9, rng);
  const auto f = truncated_svd(w, 6);
  EXPECT_LE(frobenius_norm(subtract(matmul_nt(f.u, f.v), w)), 1e-9);
}

TEST(Svd, RankOneExact) {
  const Tensor u = Tensor::matrix({{1}, {2}, {-1}, {0.5}});
  const Tensor v = Tensor::matrix({{3}, {-2}, {1}});
  const Tensor w = matmul_nt(u, v);
  const auto f = truncated_svd(w, 1);
  EXPECT_LE(frobenius_norm(subtract(matmul_nt(f.u, f.v), w)), 1e-9);
}

TEST(Svd, TailMatchesEigenOracle) {
  Prng rng(13);
  const Tensor w = random_matrix(8, 8, rng);
  const Eigen::MatrixXd e = to_eigen(w);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(e.transpose() * e);
  const double smallest = std::sqrt(eig.eigenvalues()(0));
  const auto f = truncated_svd(w, 7);
  EXPECT_NEAR(frobenius_norm(subtract(matmul_nt(f.u, f.v), w)), smallest, 1e-9);

  const auto svd = jacobi_svd(w);
  const Eigen::JacobiSVD<Eigen::MatrixXd> ref(e);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(svd.singular[i], ref.singularValues()(i), 1e-10);
}

TEST(Svd, EckartYoungOnRectangular) {
  Prng rng(14);
  const Tensor w = random_matrix(10, 6, rng);
  const Eigen::JacobiSVD<Eigen::MatrixXd> ref(to_eigen(w));
  for (std::size_t r = 1; r <= 6; ++r) {
    double tail = 0.0;
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < 6; ++i) {
      tail += ref.singularValues()(i) * ref.singularValues()(i);
    }
    const auto f = truncated_svd(w, r);
    EXPECT_NEAR(frobenius_norm(subtract(matmul_nt(f.u, f.v), w)), std::sqrt(tail), 1e-9);
  }
  EXPECT_THROW(truncated_svd(w, 0), ArgumentError);
  EXPECT_THROW(truncated_svd(w, 7), ArgumentError);
}

// ---------------------------------------------------------------------------
// Autodiff

TEST(Autodiff, LinearAndQuadratic) {
  GradTape tape;
  const Tensor p0 = Tensor::matrix({{1.5, -2.0}, {0.25, 3.0}});
  const Var p = tape.parameter(p0);
  const auto g_sum = tape.reverse_gradients(ad::sum(tape, p));
  EXPECT_EQ(g_sum[0], Tensor({2, 2}, std::vector<double>(4, 1.0)));

  GradTape tape2;
  const Var q = tape2.parameter(p0);
  const auto g_sq = tape2.reverse_gradients(ad::half_squared_norm(tape2, q));
  EXPECT_EQ(g_sq[0], p0);
}

TEST(Autodiff, NonScalarLossIsContractError) {
  GradTape tape;
  const Var p = tape.parameter(Tensor::matrix({{1, 2}}));
  EXPECT_THROW(tape.reverse_gradients(p), ContractError);
}

TEST(Autodiff, ConstantsGetNoGradientButPassAdjoints) {
  GradTape tape;
  const Var w = tape.constant(Tensor::matrix({{2, 0}, {0, 3}}));
  const Var x = tape.parameter(Tensor::matrix({{1, 1}}));
  const Var y = ad::matmul(tape, x, w);
  EXPECT_FALSE(tape.requires_grad(w));
  EXPECT_TRUE(tape.requires_grad(y));
  const auto g = tape.reverse_gradients(ad::sum(tape, y));
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0], Tensor::matrix({{2, 3}}));
}

TEST(Autodiff, QuadraticFiniteDifference) {
  Prng rng(3);
  const Tensor a = random_matrix(4, 4, rng);
  const ScalarObjective f = [&](GradTape& tape, std::span<const Var> p) {
    return ad::half_squared_norm(tape, ad::matmul(tape, tape.constant(a), p[0]));
  };
  EXPECT_LE(finite_difference_check(f, {random_matrix(4, 3, rng)}, 1e-5), 1e-10);
}

TEST(Autodiff, SoftmaxCrossEntropyAgainstAnalyticGradient) {
  const Tensor logits = Tensor::matrix({{0.3, -1.2, 2.0, 0.5}});
  GradTape tape;
  const Var z = tape.parameter(logits);
  const auto g = tape.reverse_gradients(ad::cross_entropy_mean(tape, z, {2}));
  double denom = 0.0;
  for (int j = 0; j < 4; ++j) denom += std::exp(logits(0, j));
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(g[0](0, j), std::exp(logits(0, j)) / denom - (j == 2 ? 1.0 : 0.0), 1e-15);
  }
  const ScalarObjective f = [](GradTape& t, std::span<const Var> p) {
    return ad::cross_entropy_mean(t, p[0], {2});
  };
  EXPECT_LE(finite_difference_check(f, {logits}, 1e-5), 1e-7);
}

TEST(Autodiff, EveryOperationPassesFiniteDifferences) {
  Prng rng(21);
  const Tensor mask = Tensor::matrix({{1, 0, 0}, {1, 1, 0}, {0, 1, 1}});
  const ScalarObjective f = [&](GradTape& t, std::span<const Var> p) {
    // p: x (3x4), w (4x4), gamma (4), bias (4), table (5x4)
    Var h = ad::rms_norm_rows(t, p[0], p[2], 1e-6);
    h = ad::add_row_bias(t, ad::matmul(t, h, p[1]), p[3]);
    const Var s = ad::scale(t, ad::matmul_nt(t, h, h), 0.5);
    const Var a = ad::row_softmax_masked(t, s, mask);
    Var y = ad::matmul(t, a, ad::gelu(t, h));
    const Var parts[] = {ad::slice_cols(t, y, 0, 2), ad::slice_cols(t, y, 2, 2)};
    y = ad::add(t, ad::concat_cols(t, parts), ad::gather_rows(t, p[4], {4, 0, 2}));
    const Var ce = ad::cross_entropy_mean(t, y, {0, 3, 1});
    return ad::add_scalars(t, ce, ad::scale(t, ad::half_squared_norm(t, y), 0.01));
  };
  std::vector<Tensor> params = {random_matrix(3, 4, rng), random_matrix(4, 4, rng),
                                Tensor::vector({1.1, 0.9, 1.2, 0.8}), Tensor::vector({0.1, -0.2, 0.3, 0.0}),
                                random_matrix(5, 4, rng)};
  EXPECT_LE(finite_difference_check(f, params, 1e-5, 7, 100), 1e-6);
}

TEST(Autodiff, ReplayIsBitExact) {
  Prng rng(22);
  GradTape tape;
  const Var x = tape.parameter(random_matrix(3, 5, rng));
  const Var w = tape.constant(random_matrix(5, 2, rng));
  const Var y = ad::gelu(tape, ad::matmul(tape, x, w));
  ad::cross_entropy_mean(tape, y, {0, 1, 1});
  EXPECT_TRUE(tape.replay_matches());
}

// ---------------------------------------------------------------------------
// Optimisers

TEST(Optim, AdamWFirstStepMatchesFormula) {
  Tensor p = Tensor::vector({1.0, -2.0});
  const Tensor g = Tensor::vector({0.5, -0.25});
  AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.01;
  AdamW opt(c);
  Tensor* ps[] = {&p};
  opt.step(ps, std::span<const Tensor>(&g, 1));
  for (int i = 0; i < 2; ++i) {
    const double p0 = i == 0 ? 1.0 : -2.0;
    const double gi = g[i];
    const double m = (1 - c.beta1) * gi / (1 - c.beta1);
    const double v = (1 - c.beta2) * gi * gi / (1 - c.beta2);
    const double expect = p0 - c.lr * c.weight_decay * p0 - c.lr * m / (std::sqrt(v) + c.eps);
    EXPECT_NEAR(p[i], expect, 1e-12);
  }
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(Optim, SgdStep) {
  Tensor p = Tensor::vector({1.0, 2.0});
  const Tensor g = Tensor::vector({4.0, -2.0});
  Tensor* ps[] = {&p};
  sgd_step(ps, std::span<const Tensor>(&g, 1), 0.5);
  EXPECT_EQ(p, Tensor::vector({-1.0, 3.0}));
}

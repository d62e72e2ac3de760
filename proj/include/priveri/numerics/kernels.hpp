#pragma once

#include <cstddef>
#include <limits>
#include <span>

#include "priveri/numerics/tensor.hpp"

// Dense kernels shared by the plain forward pass and the gradient tape.
// Every reduction runs in ascending index order and the project is compiled
// with -ffp-contract=off, so results are bit-reproducible.
namespace priveri::numerics {

inline constexpr double kMaskedScore = -std::numeric_limits<double>::infinity();

/// c[i][j] = sum_t a[i][t] * b[t][j], t ascending.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a * b^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// a^T * b.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Adds `bias` (length cols) to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

/// Softmax over each row restricted to entries where mask == 1. Masked
/// entries get -inf before exponentiation and come out as exactly 0.0.
/// Throws DegenerateRowError when a mask row has no ones.
Tensor row_softmax_masked(const Tensor& scores, const Tensor& mask);

/// gamma[i] * x[i] / sqrt(mean(x^2) + eps) for a single vector.
Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps);

/// rms_norm applied independently to every row of x.
Tensor rms_norm_rows(const Tensor& x, const Tensor& gamma, double eps);

/// tanh-approximated GELU, element-wise.
Tensor gelu(const Tensor& x);
double gelu_derivative(double x);

/// Rows of `table` selected by `ids` (0-based).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

/// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Index of the largest value other than argmax (ties: lowest index).
std::size_t second_argmax(std::span<const double> values);

/// Sum of |a_i - b_i| over the first min(|a|, |b|) coordinates.
double l1_distance(std::span<const double> a, std::span<const double> b);

double frobenius_norm(const Tensor& a);

}  // namespace priveri::numerics

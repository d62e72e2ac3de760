#pragma once

#include <cstddef>

#include "priveri/numerics/tensor.hpp"

namespace priveri::numerics {

/// Thin SVD w = u * diag(singular) * v^T with p = min(m, n) columns,
/// singular values descending.
struct Svd {
  Tensor u;         // m x p
  Tensor singular;  // p
  Tensor v;         // n x p
};

/// One-sided Jacobi SVD. Throws NumericError if the rotations have not
/// converged to `tolerance` within `max_sweeps` sweeps.
Svd jacobi_svd(const Tensor& w, double tolerance = 1e-12, int max_sweeps = 60);

/// Best rank-r approximation w ≈ u * v^T with the singular values folded
/// into u (m x r) and v (n x r) orthonormal.
struct LowRankFactors {
  Tensor u;
  Tensor v;
};

LowRankFactors truncated_svd(const Tensor& w, std::size_t r);

}  // namespace priveri::numerics

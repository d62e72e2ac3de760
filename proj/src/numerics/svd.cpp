#include "priveri/numerics/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"

namespace priveri::numerics {

namespace {

// Orthogonalizes the columns of a (m x n, m >= n) in place and accumulates the
// rotations into v (n x n).
void orthogonalize_columns(Tensor& a, Tensor& v, double tolerance, int max_sweeps) {
  const std::size_t m = a.rows(), n = a.cols();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        const double scale = std::sqrt(alpha * beta);
        if (scale == 0.0 || std::abs(gamma) <= tolerance * scale) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericError("jacobi_svd: no convergence within " + std::to_string(max_sweeps) +
                     " sweeps");
}

// SVD for m >= n; returns columns sorted by descending singular value.
Svd tall_svd(const Tensor& w, double tolerance, int max_sweeps) {
  const std::size_t m = w.rows(), n = w.cols();
  Tensor a = w;
  if (a.rank() != 2) a = a.reshaped({m, n});
  Tensor v = Tensor::identity(n);
  orthogonalize_columns(a, v, tolerance, max_sweeps);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Svd out{Tensor::zeros(m, n), Tensor({n}), Tensor::zeros(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.singular[k] = norms[j];
    for (std::size_t i = 0; i < m; ++i) {
      out.u(i, k) = norms[j] > 0.0 ? a(i, j) / norms[j] : 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
  }
  return out;
}

}  // namespace

Svd jacobi_svd(const Tensor& w, double tolerance, int max_sweeps) {
  if (w.rows() >= w.cols()) return tall_svd(w, tolerance, max_sweeps);
  Svd t = tall_svd(transpose(w), tolerance, max_sweeps);
  return Svd{std::move(t.v), std::move(t.singular), std::move(t.u)};
}

LowRankFactors truncated_svd(const Tensor& w, std::size_t r) {
  const std::size_t m = w.rows(), n = w.cols();
  if (r < 1 || r > std::min(m, n)) {
    throw ArgumentError("truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(std::min(m, n)) + "]");
  }
  const Svd s = jacobi_svd(w);
  LowRankFactors f{Tensor::zeros(m, r), Tensor::zeros(n, r)};
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < m; ++i) f.u(i, k) = s.u(i, k) * s.singular[k];
    for (std::size_t i = 0; i < n; ++i) f.v(i, k) = s.v(i, k);
  }
  return f;
}

}  // namespace priveri::numerics

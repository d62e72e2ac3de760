#include "priveri/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "priveri/error.hpp"

namespace priveri::numerics {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor c = Tensor::zeros(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      const double* brow = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  Tensor c = Tensor::zeros(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        acc += pa[i * k + t] * pb[j * k + t];
      }
      c(i, j) = acc;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions differ " + shape_string(a.shape()) +
                         "^T x " + shape_string(b.shape()));
  }
  Tensor c = Tensor::zeros(m, n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t t = 0; t < k; ++t) {
    const double* brow = pb + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[t * m + i];
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor c = a;
  for (double& v : c.values()) v *= factor;
  return c;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (bias.size() != x.cols()) {
    throw DimensionError("add_row_bias: bias length " + std::to_string(bias.size()) +
                         " vs row width " + std::to_string(x.cols()));
  }
  Tensor y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
  return y;
}

Tensor row_softmax_masked(const Tensor& scores, const Tensor& mask) {
  require_same_shape(scores, mask, "row_softmax_masked");
  const std::size_t m = scores.rows(), n = scores.cols();
  Tensor out(scores.shape());
  std::vector<double> shifted(n);
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = kMaskedScore;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double mv = mask(i, j);
      if (mv == 1.0) {
        shifted[j] = scores(i, j);
        row_max = any ? std::max(row_max, shifted[j]) : shifted[j];
        any = true;
      } else if (mv == 0.0) {
        shifted[j] = kMaskedScore;
      } else {
        throw ArgumentError("row_softmax_masked: mask entries must be 0 or 1");
      }
    }
    if (!any) {
      throw DegenerateRowError("row_softmax_masked: mask row " + std::to_string(i) +
                               " has no unmasked entry");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      shifted[j] = std::exp(shifted[j] - row_max);
      sum += shifted[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = shifted[j] / sum;
    }
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps) {
  if (x.rank() != 1) {
    throw DimensionError("rms_norm expects a vector, got " + shape_string(x.shape()));
  }
  return rms_norm_rows(x, gamma, eps);
}

Tensor rms_norm_rows(const Tensor& x, const Tensor& gamma, double eps) {
  const std::size_t d = x.cols();
  if (d == 0 || gamma.size() != d) {
    throw DimensionError("rms_norm: gamma length " + std::to_string(gamma.size()) +
                         " vs width " + std::to_string(d));
  }
  if (!(eps > 0.0)) {
    throw ArgumentError("rms_norm: eps must be positive");
  }
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double ms = 0.0;
    for (double v : in) ms += v * v;
    ms /= static_cast<double>(d);
    const double denom = std::sqrt(ms + eps);
    auto out = y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      out[j] = gamma[j] * in[j] / denom;
    }
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) {
    const double inner = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(inner));
  }
  return y;
}

double gelu_derivative(double x) {
  const double inner = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  const std::size_t d = table.cols();
  Tensor out = Tensor::zeros(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw ArgumentError("gather_rows: index " + std::to_string(ids[i]) + " out of range " +
                          std::to_string(table.rows()));
    }
    const auto src = table.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::size_t second_argmax(std::span<const double> values) {
  if (values.size() < 2) throw ArgumentError("second_argmax needs at least two values");
  const std::size_t first = argmax(values);
  std::size_t best = first == 0 ? 1 : 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i != first && values[i] > values[best]) best = i;
  }
  return best;
}

double l1_distance(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = std::min(a.size(), b.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::abs(a[i] - b[i]);
  return sum;
}

double frobenius_norm(const Tensor& a) {
  double sum = 0.0;
  for (double v : a.values()) sum += v * v;
  return std::sqrt(sum);
}

}  // namespace priveri::numerics

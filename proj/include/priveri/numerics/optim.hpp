#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "priveri/numerics/tensor.hpp"

namespace priveri::numerics {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Moment buffers are created lazily on the
/// first step and keyed by position in the parameter list.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// p -= lr * g for every pair.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr);

}  // namespace priveri::numerics

#include "priveri/model/perturb.hpp"

#include <algorithm>
#include <cmath>

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/svd.hpp"

namespace priveri::model {

namespace {

bool is_linear_layer(const std::string& name) {
  if (name.rfind("layers.", 0) != 0) return false;
  const std::string leaf = name.substr(name.rfind('.') + 1);
  return leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo" || leaf == "w_up" ||
         leaf == "w_down";
}

}  // namespace

ModelParams perturb_low_rank(const ModelParams& params, std::size_t r) {
  std::size_t max_rank = params.config.embed_dim;
  params.for_each_tensor([&](const std::string& name, const Tensor& t) {
    if (is_linear_layer(name)) max_rank = std::min({max_rank, t.rows(), t.cols()});
  });
  if (r < 1 || r > max_rank) {
    throw ArgumentError("perturb_low_rank: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(max_rank) + "]");
  }
  ModelParams out = params;
  out.for_each_tensor([&](const std::string& name, Tensor& t) {
    if (!is_linear_layer(name)) return;
    const auto f = numerics::truncated_svd(t, r);
    t = numerics::matmul_nt(f.u, f.v);
  });
  seal(out);
  return out;
}

Tensor quantize_symmetric(const Tensor& w, int bits) {
  if (bits < 2 || bits > 16) throw ArgumentError("quantize: bits must be in [2, 16]");
  double max_abs = 0.0;
  for (double v : w.values()) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0) return w;
  const double levels = std::ldexp(1.0, bits - 1) - 1.0;
  const double scale = max_abs / levels;
  Tensor q = w;
  for (double& v : q.values()) v = std::round(v / scale) * scale;
  return q;
}

ModelParams perturb_quantize(const ModelParams& params, int bits) {
  if (bits < 2 || bits > 16) throw ArgumentError("perturb_quantize: bits must be in [2, 16]");
  ModelParams out = params;
  out.for_each_tensor([&](const std::string&, Tensor& t) { t = quantize_symmetric(t, bits); });
  seal(out);
  return out;
}

ModelParams perturb_finetune_step(const ModelParams& params, std::span<const Sequence> batch,
                                  double lr) {
  if (lr < 0.0) throw ArgumentError("perturb_finetune_step: lr must be non-negative");
  return sgd_finetune_step(params, batch, lr);
}

}  // namespace priveri::model

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "priveri/numerics/tensor.hpp"

namespace priveri::numerics {

/// Handle to a node on a GradTape.
struct Var {
  std::size_t id = 0;
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order. Leaves are either constants
/// (frozen, never given gradient storage) or marked parameters. Interior
/// nodes carry an adjoint only when some marked parameter flows into them.
/// Forward values are produced by the same kernels as the plain code paths,
/// so a computation recorded here is bit-identical to its untaped twin.
class GradTape {
 public:
  using ForwardFn = std::function<Tensor(const GradTape&)>;
  using BackwardFn = std::function<void(GradTape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  /// Appends an interior node. `forward` must recompute `value` from the
  /// inputs' values; `backward` pushes the node's adjoint to its inputs.
  Var record(Tensor value, std::span<const Var> inputs, ForwardFn forward, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Var>& parameters() const noexcept { return parameters_; }

  /// Adds `grad` into the adjoint of `v`; ignored for nodes without gradient.
  void accumulate(Var v, const Tensor& grad);

  /// d loss / d p for every marked parameter, in marking order. The loss node
  /// must hold exactly one element (ContractError otherwise).
  std::vector<Tensor> reverse_gradients(Var loss);

  /// Re-evaluates every interior node from its inputs and reports whether all
  /// recomputed values are bit-identical to the recorded ones.
  bool replay_matches() const;

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Var> parameters_;
  std::vector<Tensor> adjoints_;
};

// Differentiable operations. Each mirrors the kernel of the same name.
namespace ad {

Var matmul(GradTape& tape, Var a, Var b);
Var matmul_nt(GradTape& tape, Var a, Var b);
Var add(GradTape& tape, Var a, Var b);
Var add_row_bias(GradTape& tape, Var x, Var bias);
Var scale(GradTape& tape, Var x, double factor);
Var rms_norm_rows(GradTape& tape, Var x, Var gamma, double eps);
Var row_softmax_masked(GradTape& tape, Var scores, const Tensor& mask);
Var gelu(GradTape& tape, Var x);
Var slice_cols(GradTape& tape, Var x, std::size_t begin, std::size_t count);
Var concat_cols(GradTape& tape, std::span<const Var> parts);
Var gather_rows(GradTape& tape, Var table, std::vector<std::size_t> ids);
/// Mean over rows of -log softmax(logits[r])[targets[r]].
Var cross_entropy_mean(GradTape& tape, Var logits, std::vector<std::size_t> targets);
Var sum(GradTape& tape, Var x);
/// sum(x^2) / 2
Var half_squared_norm(GradTape& tape, Var x);
Var add_scalars(GradTape& tape, Var a, Var b);

}  // namespace ad

/// A scalar objective built on a tape from the supplied marked parameters.
using ScalarObjective = std::function<Var(GradTape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `objective` at `params` with central
/// differences (f(p+h) - f(p-h)) / 2h on up to `max_coordinates` coordinates
/// drawn uniformly (all of them when there are fewer). Returns the maximum of
/// |g_rev - g_fd| / max(|g_rev|, |g_fd|, floor).
double finite_difference_check(const ScalarObjective& objective, const std::vector<Tensor>& params,
                               double step, std::uint64_t seed = 0,
                               std::size_t max_coordinates = 100, double floor = 1e-6);

}  // namespace priveri::numerics

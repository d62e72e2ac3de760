#include "priveri/numerics/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/prng.hpp"
#include "priveri/numerics/sampling.hpp"

namespace priveri::numerics {

Var GradTape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, nullptr, nullptr});
  return Var{nodes_.size() - 1};
}

Var GradTape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, nullptr, nullptr});
  Var v{nodes_.size() - 1};
  parameters_.push_back(v);
  return v;
}

Var GradTape::record(Tensor value, std::span<const Var> inputs, ForwardFn forward,
                     BackwardFn backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [&](Var in) { return nodes_.at(in.id).needs_grad; });
  nodes_.push_back(Node{std::move(value), needs, std::move(forward),
                        needs ? std::move(backward) : BackwardFn{}});
  return Var{nodes_.size() - 1};
}

void GradTape::accumulate(Var v, const Tensor& grad) {
  if (!nodes_[v.id].needs_grad) return;
  Tensor& adj = adjoints_[v.id];
  if (adj.empty()) {
    adj = Tensor(nodes_[v.id].value.shape(), grad.data());
    return;
  }
  for (std::size_t i = 0; i < adj.size(); ++i) adj[i] += grad[i];
}

std::vector<Tensor> GradTape::reverse_gradients(Var loss) {
  const Node& out = nodes_.at(loss.id);
  if (out.value.size() != 1) {
    throw ContractError("reverse_gradients: loss must be scalar, got shape " +
                        shape_string(out.value.shape()));
  }
  adjoints_.assign(nodes_.size(), Tensor{});
  if (out.needs_grad) {
    adjoints_[loss.id] = Tensor(out.value.shape(), {1.0});
  }
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (adjoints_[i].empty() || !nodes_[i].backward) continue;
    // The adjoint is moved out so accumulate() may touch adjoints_ freely.
    const Tensor grad = std::move(adjoints_[i]);
    nodes_[i].backward(*this, grad);
  }
  std::vector<Tensor> grads;
  grads.reserve(parameters_.size());
  for (Var p : parameters_) {
    if (adjoints_[p.id].empty()) {
      grads.emplace_back(nodes_[p.id].value.shape());
    } else {
      grads.push_back(std::move(adjoints_[p.id]));
    }
  }
  adjoints_.clear();
  return grads;
}

bool GradTape::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.forward && !n.forward(*this).bit_equal(n.value)) return false;
  }
  return true;
}

namespace ad {

namespace {

template <typename F>
Var unary(GradTape& tape, Var x, F&& forward, GradTape::BackwardFn backward) {
  GradTape::ForwardFn fwd = [x, forward](const GradTape& t) { return forward(t.value(x)); };
  Tensor value = fwd(tape);
  const Var in[] = {x};
  return tape.record(std::move(value), in, std::move(fwd), std::move(backward));
}

}  // namespace

Var matmul(GradTape& tape, Var a, Var b) {
  GradTape::ForwardFn fwd = [a, b](const GradTape& t) {
    return numerics::matmul(t.value(a), t.value(b));
  };
  const Var in[] = {a, b};
  return tape.record(fwd(tape), in, fwd, [a, b](GradTape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, numerics::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, numerics::matmul_tn(t.value(a), g));
  });
}

Var matmul_nt(GradTape& tape, Var a, Var b) {
  GradTape::ForwardFn fwd = [a, b](const GradTape& t) {
    return numerics::matmul_nt(t.value(a), t.value(b));
  };
  const Var in[] = {a, b};
  return tape.record(fwd(tape), in, fwd, [a, b](GradTape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, numerics::matmul(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, numerics::matmul_tn(g, t.value(a)));
  });
}

Var add(GradTape& tape, Var a, Var b) {
  GradTape::ForwardFn fwd = [a, b](const GradTape& t) {
    return numerics::add(t.value(a), t.value(b));
  };
  const Var in[] = {a, b};
  return tape.record(fwd(tape), in, fwd, [a, b](GradTape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row_bias(GradTape& tape, Var x, Var bias) {
  GradTape::ForwardFn fwd = [x, bias](const GradTape& t) {
    return numerics::add_row_bias(t.value(x), t.value(bias));
  };
  const Var in[] = {x, bias};
  return tape.record(fwd(tape), in, fwd, [x, bias](GradTape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) {
      Tensor gb(t.value(bias).shape());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const auto row = g.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
      }
      t.accumulate(bias, gb);
    }
  });
}

Var scale(GradTape& tape, Var x, double factor) {
  return unary(
      tape, x, [factor](const Tensor& v) { return numerics::scale(v, factor); },
      [x, factor](GradTape& t, const Tensor& g) { t.accumulate(x, numerics::scale(g, factor)); });
}

Var rms_norm_rows(GradTape& tape, Var x, Var gamma, double eps) {
  GradTape::ForwardFn fwd = [x, gamma, eps](const GradTape& t) {
    return numerics::rms_norm_rows(t.value(x), t.value(gamma), eps);
  };
  const Var in[] = {x, gamma};
  return tape.record(fwd(tape), in, fwd, [x, gamma, eps](GradTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gamma);
    const std::size_t d = xv.cols();
    Tensor gx(xv.shape());
    Tensor gg(gv.shape());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      const auto xr = xv.row(r);
      const auto dy = g.row(r);
      double ms = 0.0;
      for (double v : xr) ms += v * v;
      ms /= static_cast<double>(d);
      const double denom = std::sqrt(ms + eps);
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gv[j] * xr[j] * dy[j];
      const double coef = dot / (static_cast<double>(d) * denom * denom * denom);
      auto out = gx.row(r);
      for (std::size_t j = 0; j < d; ++j) {
        out[j] = gv[j] * dy[j] / denom - xr[j] * coef;
        gg[j] += dy[j] * xr[j] / denom;
      }
    }
    t.accumulate(x, gx);
    t.accumulate(gamma, gg);
  });
}

Var row_softmax_masked(GradTape& tape, Var scores, const Tensor& mask) {
  GradTape::ForwardFn fwd = [scores, mask](const GradTape& t) {
    return numerics::row_softmax_masked(t.value(scores), mask);
  };
  const Var in[] = {scores};
  // The backward rule reads the softmax output, i.e. this node's own value.
  const Var self{tape.size()};
  return tape.record(fwd(tape), in, fwd, [scores, self](GradTape& t, const Tensor& g) {
    const Tensor& p = t.value(self);
    Tensor gs(p.shape());
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) dot += g(i, j) * p(i, j);
      for (std::size_t j = 0; j < p.cols(); ++j) gs(i, j) = p(i, j) * (g(i, j) - dot);
    }
    t.accumulate(scores, gs);
  });
}

Var gelu(GradTape& tape, Var x) {
  return unary(
      tape, x, [](const Tensor& v) { return numerics::gelu(v); },
      [x](GradTape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * gelu_derivative(xv[i]);
        t.accumulate(x, gx);
      });
}

Var slice_cols(GradTape& tape, Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = tape.value(x);
  if (begin + count > xv.cols()) {
    throw DimensionError("slice_cols: range exceeds width " + std::to_string(xv.cols()));
  }
  auto slice = [begin, count](const Tensor& v) {
    Tensor out = Tensor::zeros(v.rows(), count);
    for (std::size_t i = 0; i < v.rows(); ++i) {
      const auto src = v.row(i);
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin),
                src.begin() + static_cast<std::ptrdiff_t>(begin + count), out.row(i).begin());
    }
    return out;
  };
  return unary(tape, x, slice, [x, begin, count](GradTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const auto src = g.row(i);
      std::copy(src.begin(), src.end(), gx.row(i).begin() + static_cast<std::ptrdiff_t>(begin));
    }
    (void)count;
    t.accumulate(x, gx);
  });
}

Var concat_cols(GradTape& tape, std::span<const Var> parts) {
  std::vector<Var> ins(parts.begin(), parts.end());
  GradTape::ForwardFn fwd = [ins](const GradTape& t) {
    const std::size_t rows = t.value(ins.front()).rows();
    std::size_t width = 0;
    for (Var p : ins) {
      if (t.value(p).rows() != rows) throw DimensionError("concat_cols: row count mismatch");
      width += t.value(p).cols();
    }
    Tensor out = Tensor::zeros(rows, width);
    for (std::size_t i = 0; i < rows; ++i) {
      auto dst = out.row(i).begin();
      for (Var p : ins) {
        const auto src = t.value(p).row(i);
        dst = std::copy(src.begin(), src.end(), dst);
      }
    }
    return out;
  };
  return tape.record(fwd(tape), ins, fwd, [ins](GradTape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (Var p : ins) {
      const Tensor& pv = t.value(p);
      const std::size_t w = pv.cols();
      if (t.requires_grad(p)) {
        Tensor gp(pv.shape());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const auto src = g.row(i);
          std::copy(src.begin() + static_cast<std::ptrdiff_t>(offset),
                    src.begin() + static_cast<std::ptrdiff_t>(offset + w), gp.row(i).begin());
        }
        t.accumulate(p, gp);
      }
      offset += w;
    }
  });
}

Var gather_rows(GradTape& tape, Var table, std::vector<std::size_t> ids) {
  return unary(
      tape, table, [ids](const Tensor& v) { return numerics::gather_rows(v, ids); },
      [table, ids](GradTape& t, const Tensor& g) {
        if (!t.requires_grad(table)) return;
        Tensor gt(t.value(table).shape());
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const auto src = g.row(i);
          auto dst = gt.row(ids[i]);
          for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
        }
        t.accumulate(table, gt);
      });
}

Var cross_entropy_mean(GradTape& tape, Var logits, std::vector<std::size_t> targets) {
  auto forward = [targets](const Tensor& z) {
    if (targets.size() != z.rows()) {
      throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) +
                           " targets for " + std::to_string(z.rows()) + " rows");
    }
    double total = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const auto row = z.row(r);
      if (targets[r] >= row.size()) throw ArgumentError("cross_entropy_mean: target out of range");
      const double mx = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (double v : row) s += std::exp(v - mx);
      total += mx + std::log(s) - row[targets[r]];
    }
    return Tensor::scalar(total / static_cast<double>(z.rows()));
  };
  return unary(tape, logits, forward, [logits, targets](GradTape& t, const Tensor& g) {
    const Tensor& z = t.value(logits);
    Tensor gz(z.shape());
    const double w = g[0] / static_cast<double>(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const auto row = z.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (double v : row) s += std::exp(v - mx);
      auto out = gz.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) out[j] = w * std::exp(row[j] - mx) / s;
      out[targets[r]] -= w;
    }
    t.accumulate(logits, gz);
  });
}

Var sum(GradTape& tape, Var x) {
  return unary(
      tape, x,
      [](const Tensor& v) {
        double s = 0.0;
        for (double e : v.values()) s += e;
        return Tensor::scalar(s);
      },
      [x](GradTape& t, const Tensor& g) {
        Tensor gx(t.value(x).shape());
        for (double& e : gx.values()) e = g[0];
        t.accumulate(x, gx);
      });
}

Var half_squared_norm(GradTape& tape, Var x) {
  return unary(
      tape, x,
      [](const Tensor& v) {
        double s = 0.0;
        for (double e : v.values()) s += e * e;
        return Tensor::scalar(0.5 * s);
      },
      [x](GradTape& t, const Tensor& g) { t.accumulate(x, numerics::scale(t.value(x), g[0])); });
}

Var add_scalars(GradTape& tape, Var a, Var b) {
  GradTape::ForwardFn fwd = [a, b](const GradTape& t) {
    return Tensor::scalar(t.value(a)[0] + t.value(b)[0]);
  };
  const Var in[] = {a, b};
  return tape.record(fwd(tape), in, fwd, [a, b](GradTape& t, const Tensor& g) {
    t.accumulate(a, Tensor(t.value(a).shape(), {g[0]}));
    t.accumulate(b, Tensor(t.value(b).shape(), {g[0]}));
  });
}

}  // namespace ad

double finite_difference_check(const ScalarObjective& objective, const std::vector<Tensor>& params,
                               double step, std::uint64_t seed, std::size_t max_coordinates,
                               double floor) {
  if (!(step > 0.0)) throw ArgumentError("finite_difference_check: step must be positive");

  auto evaluate = [&](const std::vector<Tensor>& values) {
    GradTape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const Tensor& v : values) vars.push_back(tape.constant(v));
    return tape.value(objective(tape, vars))[0];
  };

  std::vector<Tensor> analytic;
  {
    GradTape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    analytic = tape.reverse_gradients(objective(tape, vars));
  }

  // Flattened coordinate index over all parameter tensors.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (coords.empty()) return 0.0;
  std::vector<std::size_t> picks;
  if (coords.size() <= max_coordinates) {
    for (std::size_t i = 1; i <= coords.size(); ++i) picks.push_back(i);
  } else {
    Prng rng(seed);
    picks = sample_without_replacement(coords.size(), max_coordinates, rng);
  }

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t pick : picks) {
    const auto [t, i] = coords[pick - 1];
    const double orig = probe[t][i];
    probe[t][i] = orig + step;
    const double up = evaluate(probe);
    probe[t][i] = orig - step;
    const double down = evaluate(probe);
    probe[t][i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double rev = analytic[t][i];
    const double denom = std::max({std::abs(numeric), std::abs(rev), floor});
    worst = std::max(worst, std::abs(numeric - rev) / denom);
  }
  return worst;
}

}  // namespace priveri::numerics

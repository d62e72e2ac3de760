#include "priveri/model/forward.hpp"

#include <algorithm>
#include <functional>
#include <limits>

#include "priveri/model/detail/decoder.hpp"
#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"

namespace priveri::model {

namespace {

namespace nk = numerics;

struct PlainOps {
  using Value = Tensor;

  Tensor add(const Tensor& a, const Tensor& b) { return nk::add(a, b); }
  Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& ids) {
    return nk::gather_rows(t, ids);
  }
  Tensor rms_norm_rows(const Tensor& x, const Tensor& g, double eps) {
    return nk::rms_norm_rows(x, g, eps);
  }
  Tensor matmul(const Tensor& a, const Tensor& b) { return nk::matmul(a, b); }
  Tensor matmul_nt(const Tensor& a, const Tensor& b) { return nk::matmul_nt(a, b); }
  Tensor scale(const Tensor& a, double s) { return nk::scale(a, s); }
  Tensor row_softmax_masked(const Tensor& s, const Tensor& m) { return nk::row_softmax_masked(s, m); }
  Tensor gelu(const Tensor& x) { return nk::gelu(x); }
  Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    Tensor out = Tensor::zeros(x.rows(), count);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto src = x.row(i);
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(i).begin());
    }
    return out;
  }
  Tensor concat_cols(const std::vector<Tensor>& parts) {
    std::size_t width = 0;
    for (const auto& p : parts) width += p.cols();
    Tensor out = Tensor::zeros(parts.front().rows(), width);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto dst = out.row(i).begin();
      for (const auto& p : parts) {
        const auto src = p.row(i);
        dst = std::copy(src.begin(), src.end(), dst);
      }
    }
    return out;
  }
};

using Ref = std::reference_wrapper<const Tensor>;

detail::DecoderRefs<Ref> plain_refs(const ModelParams& p) {
  detail::DecoderRefs<Ref> r{std::cref(p.position_embedding), {}, std::cref(p.final_norm),
                             std::cref(p.unembedding)};
  for (const auto& l : p.layers) {
    r.layers.push_back({std::cref(l.attn_norm), std::cref(l.wq), std::cref(l.wk), std::cref(l.wv),
                        std::cref(l.wo), std::cref(l.mlp_norm), std::cref(l.w_up),
                        std::cref(l.w_down)});
  }
  return r;
}

Tensor input_embeddings(const ModelParams& params, const ModelInput& input) {
  if (const auto* tokens = std::get_if<std::vector<TokenId>>(&input)) {
    return embed_tokens(params, *tokens);
  }
  const Tensor& e = std::get<Tensor>(input);
  if (e.rank() != 2 || e.cols() != params.config.embed_dim) {
    throw DimensionError("embedding input must be L x " + std::to_string(params.config.embed_dim) +
                         ", got " + nk::shape_string(e.shape()));
  }
  return e;
}

void check_request_shape(std::size_t length, const Tensor& mask,
                         std::span<const PositionId> position_ids) {
  if (length == 0) throw ArgumentError("forward: empty input");
  if (mask.rank() != 2 || mask.rows() != length || mask.cols() != length) {
    throw DimensionError("forward: mask shape " + nk::shape_string(mask.shape()) +
                         " does not match length " + std::to_string(length));
  }
  if (position_ids.size() != length) {
    throw DimensionError("forward: " + std::to_string(position_ids.size()) +
                         " position ids for length " + std::to_string(length));
  }
}

}  // namespace

std::size_t input_length(const ModelInput& input) {
  if (const auto* tokens = std::get_if<std::vector<TokenId>>(&input)) return tokens->size();
  return std::get<Tensor>(input).rows();
}

Tensor embed_tokens(const ModelParams& params, std::span<const TokenId> tokens) {
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= params.config.vocab_size) {
      throw ArgumentError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    }
    ids[i] = tokens[i];
  }
  return nk::gather_rows(params.token_embedding, ids);
}

ForwardOutput forward(const ModelParams& params, const ModelInput& input, const Tensor& mask,
                      std::span<const PositionId> position_ids) {
  check_request_shape(input_length(input), mask, position_ids);
  PlainOps ops;
  auto out = detail::run_decoder(ops, params.config, plain_refs(params),
                                 input_embeddings(params, input), mask, position_ids);
  return {std::move(out.hidden), std::move(out.logits)};
}

ForwardOutput forward_rows(const ModelParams& params, const ModelInput& input, const Tensor& mask,
                           std::span<const PositionId> position_ids,
                           std::span<const std::size_t> rows) {
  const std::size_t length = input_length(input);
  check_request_shape(length, mask, position_ids);

  // Rows needed after layer l attend to rows needed after layer l-1.
  std::vector<char> needed(length, 0);
  for (std::size_t r : rows) {
    if (r >= length) throw ArgumentError("forward_rows: row index out of range");
    needed[r] = 1;
  }
  for (std::size_t layer = 0; layer < params.config.n_layers; ++layer) {
    std::vector<char> next = needed;
    for (std::size_t i = 0; i < length; ++i) {
      if (!needed[i]) continue;
      for (std::size_t j = 0; j < length; ++j) {
        if (mask(i, j) != 0.0) next[j] = 1;
      }
    }
    needed = std::move(next);
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < length; ++i) {
    if (needed[i]) keep.push_back(i);
  }

  const Tensor full = input_embeddings(params, input);
  Tensor sub_mask = Tensor::zeros(keep.size(), keep.size());
  std::vector<PositionId> sub_ids(keep.size());
  for (std::size_t a = 0; a < keep.size(); ++a) {
    bool any = false;
    for (std::size_t b = 0; b < keep.size(); ++b) {
      sub_mask(a, b) = mask(keep[a], keep[b]);
      any = any || sub_mask(a, b) != 0.0;
    }
    // Only rows whose values are never consumed can end up empty here.
    if (!any) sub_mask(a, a) = 1.0;
    sub_ids[a] = position_ids[keep[a]];
  }
  const ForwardOutput sub =
      forward(params, ModelInput{nk::gather_rows(full, keep)}, sub_mask, sub_ids);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  ForwardOutput out{Tensor::zeros(length, sub.hidden.cols()), Tensor::zeros(length, sub.logits.cols())};
  std::fill(out.hidden.values().begin(), out.hidden.values().end(), nan);
  std::fill(out.logits.values().begin(), out.logits.values().end(), nan);
  std::vector<char> requested(length, 0);
  for (std::size_t r : rows) requested[r] = 1;
  for (std::size_t a = 0; a < keep.size(); ++a) {
    if (!requested[keep[a]]) continue;
    std::copy_n(sub.hidden.row(a).begin(), sub.hidden.cols(), out.hidden.row(keep[a]).begin());
    std::copy_n(sub.logits.row(a).begin(), sub.logits.cols(), out.logits.row(keep[a]).begin());
  }
  return out;
}

Tensor causal_mask(std::size_t n) {
  Tensor m = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
  }
  return m;
}

std::vector<PositionId> sequential_positions(std::size_t n) {
  std::vector<PositionId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<PositionId>(i + 1);
  return ids;
}

}  // namespace priveri::model

#pragma once

// Decoder body shared by the plain forward pass and the gradient tape. Both
// instantiations issue the same kernels in the same order, which is what
// makes taped and untaped logits bit-identical.

#include <cmath>
#include <span>
#include <vector>

#include "priveri/error.hpp"
#include "priveri/model/forward.hpp"

namespace priveri::model::detail {

template <typename Ref>
struct LayerRefs {
  Ref attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
};

template <typename Ref>
struct DecoderRefs {
  Ref position_embedding;
  std::vector<LayerRefs<Ref>> layers;
  Ref final_norm;
  Ref unembedding;
};

template <typename Value>
struct DecoderResult {
  Value hidden;
  Value logits;
};

inline std::vector<std::size_t> position_rows(const ModelConfig& config,
                                              std::span<const PositionId> ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 1 || ids[i] > config.max_positions) {
      throw ArgumentError("position id " + std::to_string(ids[i]) + " outside [1, " +
                          std::to_string(config.max_positions) + "]");
    }
    rows[i] = ids[i] - 1;
  }
  return rows;
}

template <typename Ops, typename Ref>
auto run_decoder(Ops& ops, const ModelConfig& config, const DecoderRefs<Ref>& w,
                 typename Ops::Value token_embeddings, const Tensor& mask,
                 std::span<const PositionId> position_ids) {
  using Value = typename Ops::Value;
  const std::size_t hd = config.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Value x = ops.add(token_embeddings,
                    ops.gather_rows(w.position_embedding, position_rows(config, position_ids)));
  for (const auto& layer : w.layers) {
    Value h = ops.rms_norm_rows(x, layer.attn_norm, config.eps);
    Value q = ops.matmul(h, layer.wq);
    Value k = ops.matmul(h, layer.wk);
    Value v = ops.matmul(h, layer.wv);
    std::vector<Value> heads;
    heads.reserve(config.n_heads);
    for (std::size_t head = 0; head < config.n_heads; ++head) {
      Value qh = ops.slice_cols(q, head * hd, hd);
      Value kh = ops.slice_cols(k, head * hd, hd);
      Value vh = ops.slice_cols(v, head * hd, hd);
      Value scores = ops.scale(ops.matmul_nt(qh, kh), score_scale);
      Value probs = ops.row_softmax_masked(scores, mask);
      heads.push_back(ops.matmul(probs, vh));
    }
    x = ops.add(x, ops.matmul(ops.concat_cols(heads), layer.wo));
    Value h2 = ops.rms_norm_rows(x, layer.mlp_norm, config.eps);
    x = ops.add(x, ops.matmul(ops.gelu(ops.matmul(h2, layer.w_up)), layer.w_down));
  }
  Value hidden = ops.rms_norm_rows(x, w.final_norm, config.eps);
  Value logits = ops.matmul(hidden, w.unembedding);
  return DecoderResult<Value>{std::move(hidden), std::move(logits)};
}

}  // namespace priveri::model::detail

#include "priveri/model/taped.hpp"

#include "priveri/error.hpp"

namespace priveri::model {

namespace {

struct TapeOps {
  using Value = Var;
  GradTape& tape;

  Var add(Var a, Var b) { return numerics::ad::add(tape, a, b); }
  Var gather_rows(Var t, std::vector<std::size_t> ids) {
    return numerics::ad::gather_rows(tape, t, std::move(ids));
  }
  Var rms_norm_rows(Var x, Var g, double eps) { return numerics::ad::rms_norm_rows(tape, x, g, eps); }
  Var matmul(Var a, Var b) { return numerics::ad::matmul(tape, a, b); }
  Var matmul_nt(Var a, Var b) { return numerics::ad::matmul_nt(tape, a, b); }
  Var scale(Var a, double s) { return numerics::ad::scale(tape, a, s); }
  Var row_softmax_masked(Var s, const Tensor& m) {
    return numerics::ad::row_softmax_masked(tape, s, m);
  }
  Var gelu(Var x) { return numerics::ad::gelu(tape, x); }
  Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    return numerics::ad::slice_cols(tape, x, begin, count);
  }
  Var concat_cols(const std::vector<Var>& parts) { return numerics::ad::concat_cols(tape, parts); }
};

}  // namespace

TapedModel::TapedModel(GradTape& tape, const ModelParams& params, bool trainable)
    : tape_(tape), config_(params.config), trainable_(trainable) {
  std::vector<Var> vars;
  params.for_each_tensor([&](const std::string&, const Tensor& t) {
    vars.push_back(trainable ? tape.parameter(t) : tape.constant(t));
  });
  std::size_t k = 0;
  token_embedding_ = vars[k++];
  refs_.position_embedding = vars[k++];
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    detail::LayerRefs<Var> l;
    l.attn_norm = vars[k++];
    l.wq = vars[k++];
    l.wk = vars[k++];
    l.wv = vars[k++];
    l.wo = vars[k++];
    l.mlp_norm = vars[k++];
    l.w_up = vars[k++];
    l.w_down = vars[k++];
    refs_.layers.push_back(l);
  }
  refs_.final_norm = vars[k++];
  refs_.unembedding = vars[k++];
}

Var TapedModel::embed(std::span<const TokenId> tokens) {
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  for (std::size_t id : ids) {
    if (id >= config_.vocab_size) throw ArgumentError("token id outside vocabulary");
  }
  return numerics::ad::gather_rows(tape_, token_embedding_, std::move(ids));
}

detail::DecoderResult<Var> TapedModel::forward(Var token_embeddings, const Tensor& mask,
                                               std::span<const PositionId> position_ids) {
  TapeOps ops{tape_};
  return detail::run_decoder(ops, config_, refs_, token_embeddings, mask, position_ids);
}

std::vector<Tensor*> TapedModel::parameter_targets(ModelParams& params) const {
  std::vector<Tensor*> out;
  if (!trainable_) return out;
  params.for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace priveri::model

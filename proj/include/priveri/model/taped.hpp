#pragma once

#include <span>
#include <vector>

#include "priveri/model/detail/decoder.hpp"
#include "priveri/model/forward.hpp"
#include "priveri/numerics/autodiff.hpp"

namespace priveri::model {

using numerics::GradTape;
using numerics::Var;

/// The decoder bound onto a GradTape. With trainable == false every weight is
/// a tape constant (frozen base: no gradient storage, adjoints still flow to
/// whatever produced the input embeddings).
class TapedModel {
 public:
  TapedModel(GradTape& tape, const ModelParams& params, bool trainable);

  /// Token-embedding lookup on the tape.
  Var embed(std::span<const TokenId> tokens);

  detail::DecoderResult<Var> forward(Var token_embeddings, const Tensor& mask,
                                     std::span<const PositionId> position_ids);

  /// The tensors of `params` in the order their tape parameters were marked
  /// (empty for a frozen model).
  std::vector<Tensor*> parameter_targets(ModelParams& params) const;

 private:
  GradTape& tape_;
  ModelConfig config_;
  bool trainable_;
  Var token_embedding_;
  detail::DecoderRefs<Var> refs_;
};

}  // namespace priveri::model

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "priveri/model/params.hpp"

namespace priveri::model {

/// Position identifiers are 1-based and supplied explicitly, independent of
/// where a row sits in the sequence.
using PositionId = std::uint32_t;

/// A forward input: token ids, or precomputed token embeddings (L x d_e)
/// that replace the token-embedding lookup.
using ModelInput = std::variant<std::vector<TokenId>, Tensor>;

std::size_t input_length(const ModelInput& input);

struct ForwardOutput {
  Tensor hidden;  // L x d_h, after the final norm
  Tensor logits;  // L x V, exactly hidden x unembedding
};

/// Pre-norm decoder stack with an explicit 2D attention mask (mask(i, j) == 1
/// lets row i attend to row j) and explicit position ids.
ForwardOutput forward(const ModelParams& params, const ModelInput& input, const Tensor& mask,
                      std::span<const PositionId> position_ids);

/// Same function as forward(), evaluated only for `rows` and the rows they
/// transitively attend to. Requested rows are bit-identical to forward();
/// every other row is NaN.
ForwardOutput forward_rows(const ModelParams& params, const ModelInput& input, const Tensor& mask,
                           std::span<const PositionId> position_ids,
                           std::span<const std::size_t> rows);

/// Lower-triangular n x n mask of ones.
Tensor causal_mask(std::size_t n);

/// 1, 2, ..., n
std::vector<PositionId> sequential_positions(std::size_t n);

/// Token embedding rows for `tokens` (ArgumentError on out-of-vocabulary ids).
Tensor embed_tokens(const ModelParams& params, std::span<const TokenId> tokens);

}  // namespace priveri::model

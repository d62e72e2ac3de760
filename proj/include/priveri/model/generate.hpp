#pragma once

#include <cstddef>
#include <vector>

#include "priveri/model/forward.hpp"

namespace priveri::model {

struct GreedyRun {
  std::vector<TokenId> emitted;
  std::vector<ForwardOutput> transcript;  // one full forward per step
};

/// Greedy decoding: each step runs the whole current sequence (causal mask,
/// ids 1..L) and emits argmax of the last logit row, lowest index on ties.
/// ArgumentError if the sequence would exceed max_positions.
GreedyRun generate_greedy(const ModelParams& params, const std::vector<TokenId>& prompt,
                          std::size_t n_steps);

}  // namespace priveri::model

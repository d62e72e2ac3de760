#include "priveri/model/generate.hpp"

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"

namespace priveri::model {

GreedyRun generate_greedy(const ModelParams& params, const std::vector<TokenId>& prompt,
                          std::size_t n_steps) {
  if (n_steps < 1) throw ArgumentError("generate_greedy: n_steps must be >= 1");
  if (prompt.empty()) throw ArgumentError("generate_greedy: empty prompt");
  if (prompt.size() + n_steps - 1 > params.config.max_positions) {
    throw ArgumentError("generate_greedy: context of " + std::to_string(prompt.size() + n_steps - 1) +
                        " tokens exceeds max_positions " +
                        std::to_string(params.config.max_positions));
  }
  GreedyRun run;
  std::vector<TokenId> sequence = prompt;
  for (std::size_t step = 0; step < n_steps; ++step) {
    const std::size_t n = sequence.size();
    ForwardOutput out = forward(params, sequence, causal_mask(n), sequential_positions(n));
    const auto next = static_cast<TokenId>(numerics::argmax(out.logits.row(n - 1)));
    run.emitted.push_back(next);
    run.transcript.push_back(std::move(out));
    sequence.push_back(next);
  }
  return run;
}

}  // namespace priveri::model

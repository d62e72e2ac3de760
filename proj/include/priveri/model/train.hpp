#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "priveri/model/params.hpp"
#include "priveri/numerics/autodiff.hpp"

namespace priveri::model {

class TapedModel;

using Sequence = std::vector<TokenId>;

/// Token sequences from a seeded order-1 Markov source.
struct Corpus {
  std::vector<Sequence> train;
  std::vector<Sequence> heldout;
};

struct MarkovCorpusConfig {
  std::size_t vocab_size = 64;
  std::size_t branching = 4;     // successors with nonzero probability per state
  std::size_t sequence_length = 33;  // tokens per sequence (length - 1 predictions)
  std::size_t train_sequences = 512;
  std::size_t heldout_sequences = 64;
  std::uint64_t seed = 7;
};

Corpus make_markov_corpus(const MarkovCorpusConfig& config);

/// Mean next-token cross-entropy (nats) over every prediction in `sequences`,
/// causal mask, position ids 1..L.
double mean_log_loss(const ModelParams& params, std::span<const Sequence> sequences);

/// Builds the mean next-token cross-entropy of `batch` on a tape.
numerics::Var next_token_loss(TapedModel& model, numerics::GradTape& tape,
                              std::span<const Sequence> batch);

struct PretrainConfig {
  std::size_t steps = 200;
  std::size_t batch = 8;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 11;
};

/// AdamW (0.9 / 0.999, decoupled weight decay) on next-token cross-entropy.
/// Batches are drawn uniformly from `train` with a Prng seeded by config.seed.
/// Throws TrainingError if the loss becomes non-finite.
ModelParams pretrain(const ModelParams& params, std::span<const Sequence> train,
                     const PretrainConfig& config);

/// One plain SGD step on the batch's next-token cross-entropy.
ModelParams sgd_finetune_step(const ModelParams& params, std::span<const Sequence> batch,
                              double lr);

}  // namespace priveri::model

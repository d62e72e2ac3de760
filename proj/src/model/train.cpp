#include "priveri/model/train.hpp"

#include <cmath>

#include "priveri/error.hpp"
#include "priveri/model/forward.hpp"
#include "priveri/model/taped.hpp"
#include "priveri/numerics/optim.hpp"
#include "priveri/numerics/prng.hpp"
#include "priveri/numerics/sampling.hpp"

namespace priveri::model {

namespace {

std::vector<std::size_t> successors_of(const Sequence& seq) {
  return std::vector<std::size_t>(seq.begin() + 1, seq.end());
}

void check_sequence(const Sequence& seq) {
  if (seq.size() < 2) throw ArgumentError("training sequences need at least two tokens");
}

}  // namespace

Corpus make_markov_corpus(const MarkovCorpusConfig& config) {
  if (config.vocab_size < 2 || config.branching < 1 || config.branching > config.vocab_size ||
      config.sequence_length < 2) {
    throw ArgumentError("invalid Markov corpus configuration");
  }
  numerics::Prng rng(config.seed);
  const std::size_t v = config.vocab_size;
  // Per state: `branching` distinct successors with random positive weights.
  std::vector<std::vector<std::size_t>> next(v);
  std::vector<std::vector<double>> cumulative(v);
  for (std::size_t s = 0; s < v; ++s) {
    for (std::size_t t : numerics::sample_without_replacement(v, config.branching, rng)) {
      next[s].push_back(t - 1);
    }
    double total = 0.0;
    for (std::size_t b = 0; b < config.branching; ++b) {
      total += 0.2 + rng.uniform01();
      cumulative[s].push_back(total);
    }
    for (double& c : cumulative[s]) c /= total;
  }
  auto draw = [&](std::size_t count) {
    std::vector<Sequence> out(count);
    for (auto& seq : out) {
      std::size_t state = rng.uniform_below(v);
      seq.push_back(static_cast<TokenId>(state));
      while (seq.size() < config.sequence_length) {
        const double u = rng.uniform01();
        std::size_t b = 0;
        while (b + 1 < config.branching && u >= cumulative[state][b]) ++b;
        state = next[state][b];
        seq.push_back(static_cast<TokenId>(state));
      }
    }
    return out;
  };
  Corpus c;
  c.train = draw(config.train_sequences);
  c.heldout = draw(config.heldout_sequences);
  return c;
}

double mean_log_loss(const ModelParams& params, std::span<const Sequence> sequences) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    check_sequence(seq);
    const std::size_t n = seq.size() - 1;
    const Sequence input(seq.begin(), seq.end() - 1);
    const auto ids = sequential_positions(n);
    const ForwardOutput out = forward(params, input, causal_mask(n), ids);
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = out.logits.row(r);
      double mx = row[0];
      for (double z : row) mx = std::max(mx, z);
      double s = 0.0;
      for (double z : row) s += std::exp(z - mx);
      total += mx + std::log(s) - row[seq[r + 1]];
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("mean_log_loss: no predictions");
  return total / static_cast<double>(count);
}

numerics::Var next_token_loss(TapedModel& model, numerics::GradTape& tape,
                              std::span<const Sequence> batch) {
  if (batch.empty()) throw ArgumentError("empty training batch");
  numerics::Var total{};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sequence& seq = batch[b];
    check_sequence(seq);
    const std::size_t n = seq.size() - 1;
    const Sequence input(seq.begin(), seq.end() - 1);
    const auto ids = sequential_positions(n);
    auto out = model.forward(model.embed(input), causal_mask(n), ids);
    auto loss = numerics::ad::cross_entropy_mean(tape, out.logits, successors_of(seq));
    total = b == 0 ? loss : numerics::ad::add_scalars(tape, total, loss);
  }
  return numerics::ad::scale(tape, total, 1.0 / static_cast<double>(batch.size()));
}

ModelParams pretrain(const ModelParams& params, std::span<const Sequence> train,
                     const PretrainConfig& config) {
  ModelParams out = params;
  if (config.steps == 0) return out;
  if (train.empty()) throw ArgumentError("pretrain: empty corpus");
  numerics::Prng rng(config.seed);
  numerics::AdamW opt({.lr = config.lr, .weight_decay = config.weight_decay});
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Sequence> batch;
    for (std::size_t b = 0; b < config.batch; ++b) {
      batch.push_back(train[rng.uniform_below(train.size())]);
    }
    numerics::GradTape tape;
    TapedModel taped(tape, out, true);
    const auto loss = next_token_loss(taped, tape, batch);
    if (!std::isfinite(tape.value(loss)[0])) {
      throw TrainingError("pretrain: loss diverged at step " + std::to_string(step));
    }
    const auto grads = tape.reverse_gradients(loss);
    const auto targets = taped.parameter_targets(out);
    opt.step(targets, grads);
  }
  seal(out);
  return out;
}

ModelParams sgd_finetune_step(const ModelParams& params, std::span<const Sequence> batch,
                              double lr) {
  ModelParams out = params;
  numerics::GradTape tape;
  TapedModel taped(tape, out, true);
  const auto loss = next_token_loss(taped, tape, batch);
  const auto grads = tape.reverse_gradients(loss);
  const auto targets = taped.parameter_targets(out);
  numerics::sgd_step(targets, grads, lr);
  seal(out);
  return out;
}

}  // namespace priveri::model

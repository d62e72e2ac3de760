#include "priveri/protocol2/protocol2.hpp"

#include <cmath>

#include "priveri/error.hpp"
#include "priveri/model/taped.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/optim.hpp"

namespace priveri::protocol2 {

namespace nk = numerics;
namespace ad = numerics::ad;

namespace {

Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev, Prng& rng) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

void check_embedder(const NoiseEmbedderParams& ne, std::size_t d) {
  if (ne.noise_embedding.rank() != 2 || ne.noise_embedding.cols() != d ||
      ne.combiner.shape() != std::vector<std::size_t>{2 * d, d} ||
      ne.bias.shape() != std::vector<std::size_t>{d}) {
    throw DimensionError("noise embedder shapes do not match embedding width " +
                         std::to_string(d));
  }
}

// Inputs and next-token targets of a training sequence cut to `length` inputs.
struct Example {
  model::Sequence input;
  std::vector<std::size_t> targets;
};

Example make_example(const model::Sequence& seq, std::size_t length) {
  const std::size_t n = std::min(length, seq.size() - 1);
  if (seq.size() < 2 || n == 0) throw ArgumentError("training sequences need at least two tokens");
  Example ex;
  ex.input.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(n));
  ex.targets.assign(seq.begin() + 1, seq.begin() + static_cast<std::ptrdiff_t>(n) + 1);
  return ex;
}

double row_log_loss(std::span<const double> row, std::size_t target) {
  double mx = row[0];
  for (double z : row) mx = std::max(mx, z);
  double s = 0.0;
  for (double z : row) s += std::exp(z - mx);
  return mx + std::log(s) - row[target];
}

}  // namespace

void NoiseSet::validate() const {
  if (size < 2) throw ArgumentError("noise set needs |B| >= 2");
}

NoiseEmbedderParams init_noise_embedder(std::size_t embed_dim, const NoiseSet& noise,
                                        std::uint64_t seed, double noise_std) {
  noise.validate();
  Prng rng(seed);
  NoiseEmbedderParams ne;
  ne.noise_embedding = normal_matrix(noise.size, embed_dim, noise_std, rng);
  ne.combiner = Tensor::zeros(2 * embed_dim, embed_dim);
  for (std::size_t i = 0; i < embed_dim; ++i) ne.combiner(i, i) = 1.0;
  ne.bias = Tensor({embed_dim});
  return ne;
}

NoisePredictorParams init_noise_predictor(std::size_t hidden_dim, const NoiseSet& noise,
                                          std::uint64_t seed) {
  noise.validate();
  Prng rng(seed);
  return {normal_matrix(hidden_dim, noise.size, 0.02, rng), Tensor({noise.size})};
}

Tensor embed_noise_rows(const NoiseEmbedderParams& ne, const Tensor& e,
                        std::span<const NoiseId> ids) {
  const std::size_t d = e.cols();
  check_embedder(ne, d);
  if (ids.size() != e.rows()) throw DimensionError("embed_noise: one noise id per row required");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= ne.noise_embedding.rows()) {
      throw ArgumentError("noise id " + std::to_string(ids[i]) + " outside the noise set");
    }
    rows[i] = ids[i];
  }
  const Tensor noise_rows = nk::gather_rows(ne.noise_embedding, rows);
  Tensor joined = Tensor::zeros(e.rows(), 2 * d);
  for (std::size_t i = 0; i < e.rows(); ++i) {
    std::copy_n(e.row(i).begin(), d, joined.row(i).begin());
    std::copy_n(noise_rows.row(i).begin(), d, joined.row(i).begin() + static_cast<std::ptrdiff_t>(d));
  }
  return nk::add_row_bias(nk::matmul(joined, ne.combiner), ne.bias);
}

Tensor embed_noise(const NoiseEmbedderParams& ne, const Tensor& e, NoiseId b) {
  const Tensor row = e.reshaped({1, e.size()});
  const NoiseId ids[] = {b};
  const Tensor out = embed_noise_rows(ne, row, ids);
  return out.reshaped({out.size()});
}

NoiseId predict_noise(const NoisePredictorParams& np, std::span<const double> hidden_row) {
  if (hidden_row.size() != np.weight.rows()) {
    throw DimensionError("predict_noise: hidden width " + std::to_string(hidden_row.size()) +
                         " != " + std::to_string(np.weight.rows()));
  }
  const Tensor h = Tensor({1, hidden_row.size()}, {hidden_row.begin(), hidden_row.end()});
  const Tensor scores = nk::add_row_bias(nk::matmul(h, np.weight), np.bias);
  return static_cast<NoiseId>(nk::argmax(scores.values()));
}

NoisyRequest noise_request(const ModelParams& params, AugmentedRequest base,
                           const NoiseSet& noise, const NoiseEmbedderParams& ne, Prng& rng,
                           NoiseMode mode) {
  noise.validate();
  if (ne.noise_embedding.rows() != noise.size) {
    throw DimensionError("noise embedder was built for a different noise set");
  }
  NoisyRequest req;
  req.mode = mode;
  const Tensor plain = model::embed_tokens(params, base.tokens);
  const auto originals = base.original_positions();
  const NoiseId shared = mode == NoiseMode::shared ? noise.draw(rng) : 0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    req.noise_cache.push_back(mode == NoiseMode::shared ? shared : noise.draw(rng));
  }
  std::vector<std::size_t> rows;
  for (std::size_t p : originals) rows.push_back(p - 1);
  const Tensor noised = embed_noise_rows(ne, nk::gather_rows(plain, rows), req.noise_cache);

  req.embeddings = plain;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(noised.row(i).begin(), noised.cols(), req.embeddings.row(rows[i]).begin());
  }
  req.base = std::move(base);
  return req;
}

NoisyRequest build_noisy_request(const ModelParams& params, std::span<const TokenId> prompt,
                                 const SentinelSequence& sentinels, const NoiseSet& noise,
                                 const NoiseEmbedderParams& ne, Prng& rng, NoiseMode mode) {
  AugmentedRequest base = protocol1::build_request(prompt, sentinels, rng);
  return noise_request(params, std::move(base), noise, ne, rng, mode);
}

Tensor noisy_hidden(const ModelParams& params, const NoisyRequest& request) {
  return model::forward(params, request.embeddings, request.base.mask, request.base.position_ids)
      .hidden;
}

NoisyVerificationResult verify_noisy(const Tensor& hidden, const NoisyRequest& request,
                                     const SentinelCache& cache, const NoisePredictorParams& np,
                                     const Tensor& unembedding, double tol) {
  const AugmentedRequest& base = request.base;
  if (hidden.rank() != 2 || hidden.rows() != base.length() || hidden.cols() != unembedding.rows()) {
    throw DimensionError("verify_noisy: hidden must be " + std::to_string(base.length()) + " x " +
                         std::to_string(unembedding.rows()) + ", got " +
                         nk::shape_string(hidden.shape()));
  }
  NoisyVerificationResult out;
  std::vector<std::size_t> rows;
  for (std::size_t p : base.sentinel_positions) rows.push_back(p - 1);
  const Tensor sentinel_logits = nk::matmul(nk::gather_rows(hidden, rows), unembedding);
  std::vector<std::size_t> packed(rows.size());
  for (std::size_t i = 0; i < packed.size(); ++i) packed[i] = i + 1;
  out.sentinel_check = protocol1::verify_sentinel_rows(sentinel_logits, packed,
                                                       base.sentinel_sequence, cache, tol);

  const auto originals = base.original_positions();
  if (originals.size() != request.noise_cache.size()) {
    throw DimensionError("verify_noisy: noise cache does not cover every original slot");
  }
  bool all = true;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const auto row = hidden.row(originals[i] - 1);
    bool finite = true;
    for (double v : row) finite = finite && std::isfinite(v);
    const bool match = finite && predict_noise(np, row) == request.noise_cache[i];
    out.noise_matches.push_back(match);
    all = all && match;
  }
  out.verified = out.sentinel_check.verified && all;
  return out;
}

double completeness_bound(std::span<const double> accuracies) {
  double prod = 1.0;
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw ArgumentError("accuracies must lie in [0, 1]");
    prod *= a;
  }
  return 1.0 - prod;
}

double soundness_bound(const NoiseSet& noise) {
  noise.validate();
  return 1.0 / static_cast<double>(noise.size);
}

void check_base(const NoiseModules& modules, const ModelParams& params) {
  if (modules.base_model_hash != params.hash) {
    throw IntegrityError("noise modules were trained against model " +
                         io::to_hex(modules.base_model_hash) + ", not " + params.hash_hex());
  }
}

NoisyVerificationResult verify_noisy(const Tensor& hidden, const NoisyRequest& request,
                                     const SentinelCache& cache, const NoiseModules& modules,
                                     const ModelParams& params, double tol) {
  check_base(modules, params);
  return verify_noisy(hidden, request, cache, modules.predictor, params.unembedding, tol);
}

io::Bundle to_bundle(const NoiseModules& m) {
  io::Bundle b;
  b.magic = kNoiseMagic;
  b.header["base_model_hash"] = io::to_hex(m.base_model_hash);
  b.header["noise_set_size"] = m.noise.size;
  b.header["embed_dim"] = m.embedder.bias.size();
  b.tensors = {{"noise_embedding", m.embedder.noise_embedding},
               {"combiner", m.embedder.combiner},
               {"combiner_bias", m.embedder.bias},
               {"predictor_weight", m.predictor.weight},
               {"predictor_bias", m.predictor.bias}};
  return b;
}

NoiseModules from_bundle(const io::Bundle& b) {
  NoiseModules m;
  try {
    m.base_model_hash = io::digest_from_hex(b.header.at("base_model_hash").get<std::string>());
    m.noise.size = b.header.at("noise_set_size").get<std::size_t>();
    const auto d = b.header.at("embed_dim").get<std::size_t>();
    m.embedder = {b.tensor("noise_embedding"), b.tensor("combiner"), b.tensor("combiner_bias")};
    m.predictor = {b.tensor("predictor_weight"), b.tensor("predictor_bias")};
    m.noise.validate();
    check_embedder(m.embedder, d);
    if (m.embedder.noise_embedding.rows() != m.noise.size ||
        m.predictor.weight.shape() != std::vector<std::size_t>{d, m.noise.size} ||
        m.predictor.bias.shape() != std::vector<std::size_t>{m.noise.size}) {
      throw FormatError("noise module shapes disagree with the header");
    }
  } catch (const io::Json::exception& e) {
    throw FormatError(std::string("noise module manifest: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(e.what());
  }
  return m;
}

void save_noise_modules(const std::filesystem::path& manifest_path, const NoiseModules& modules) {
  io::save_bundle(manifest_path, to_bundle(modules));
}

NoiseModules load_noise_modules(const std::filesystem::path& manifest_path) {
  return from_bundle(io::load_bundle(manifest_path, kNoiseMagic));
}

NoiseModules init_modules(const ModelParams& base, const NoiseSet& noise, std::uint64_t seed,
                          double noise_std) {
  Prng rng(seed);
  NoiseModules m;
  m.base_model_hash = base.hash;
  m.noise = noise;
  m.embedder = init_noise_embedder(base.config.embed_dim, noise, rng.next_u64(), noise_std);
  m.predictor = init_noise_predictor(base.config.hidden_dim, noise, rng.next_u64());
  return m;
}

numerics::Var joint_objective(numerics::GradTape& tape, const ModelParams& base,
                              std::span<const numerics::Var> ne_vars,
                              std::span<const numerics::Var> np_vars,
                              std::span<const model::Sequence> batch,
                              std::span<const NoiseId> noise_ids, double lambda,
                              double predictor_scale) {
  if (ne_vars.size() != 3 || np_vars.size() != 2) {
    throw ArgumentError("joint_objective: expected {E, W, bias} and {W, bias}");
  }
  if (batch.empty() || noise_ids.size() != batch.size()) {
    throw ArgumentError("joint_objective: one noise id per non-empty batch element");
  }
  if (!(lambda >= 0.0)) throw ArgumentError("lambda must be non-negative");
  if (!(predictor_scale > 0.0)) throw ArgumentError("predictor scale must be positive");
  model::TapedModel frozen(tape, base, false);
  numerics::Var total{};
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const model::Sequence& seq = batch[s];
    if (seq.size() < 2) throw ArgumentError("training sequences need at least two tokens");
    const std::size_t n = seq.size() - 1;
    const model::Sequence input(seq.begin(), seq.end() - 1);
    const std::vector<std::size_t> targets(seq.begin() + 1, seq.end());

    const auto e = frozen.embed(input);
    const auto nb = ad::gather_rows(tape, ne_vars[0], std::vector<std::size_t>(n, noise_ids[s]));
    const numerics::Var parts[] = {e, nb};
    const auto noised = ad::add_row_bias(
        tape, ad::matmul(tape, ad::concat_cols(tape, parts), ne_vars[1]), ne_vars[2]);
    const auto out = frozen.forward(noised, model::causal_mask(n), model::sequential_positions(n));

    const auto lm = ad::cross_entropy_mean(tape, out.logits, targets);
    const auto scores = ad::scale(
        tape, ad::add_row_bias(tape, ad::matmul(tape, out.hidden, np_vars[0]), np_vars[1]),
        predictor_scale);
    const auto noise_ce =
        ad::cross_entropy_mean(tape, scores, std::vector<std::size_t>(n, noise_ids[s]));
    const auto loss = ad::add_scalars(tape, lm, ad::scale(tape, noise_ce, lambda));
    total = s == 0 ? loss : ad::add_scalars(tape, total, loss);
  }
  return ad::scale(tape, total, 1.0 / static_cast<double>(batch.size()));
}

TrainMetrics evaluate_modules(const ModelParams& base, const NoiseModules& modules,
                              std::span<const model::Sequence> heldout, Prng& rng) {
  TrainMetrics m;
  double noised_total = 0.0;
  double base_total = 0.0;
  std::size_t predictions = 0;
  std::size_t hits = 0;
  for (const auto& seq : heldout) {
    if (seq.size() < 2) throw ArgumentError("held-out sequences need at least two tokens");
    const std::size_t n = seq.size() - 1;
    const model::Sequence input(seq.begin(), seq.end() - 1);
    const NoiseId b = modules.noise.draw(rng);
    const std::vector<NoiseId> ids(n, b);
    const Tensor plain = model::embed_tokens(base, input);
    const auto mask = model::causal_mask(n);
    const auto pos = model::sequential_positions(n);
    const auto noised = model::forward(base, embed_noise_rows(modules.embedder, plain, ids), mask, pos);
    const auto clean = model::forward(base, input, mask, pos);
    for (std::size_t r = 0; r < n; ++r) {
      noised_total += row_log_loss(noised.logits.row(r), seq[r + 1]);
      base_total += row_log_loss(clean.logits.row(r), seq[r + 1]);
      hits += predict_noise(modules.predictor, noised.hidden.row(r)) == b ? 1 : 0;
      ++predictions;
    }
  }
  if (predictions == 0) throw ArgumentError("evaluate_modules: no held-out predictions");
  const double count = static_cast<double>(predictions);
  m.heldout_log_loss = noised_total / count;
  m.base_log_loss = base_total / count;
  m.heldout_noise_accuracy = static_cast<double>(hits) / count;
  return m;
}

NoiseModules train_modules(const ModelParams& base, NoiseModules modules,
                           std::span<const model::Sequence> train,
                           std::span<const model::Sequence> heldout, const TrainConfig& config,
                           TrainMetrics* metrics) {
  modules.noise.validate();
  check_base(modules, base);
  if (!(config.lambda >= 0.0)) throw ArgumentError("lambda must be non-negative");
  if (config.steps > 0 && train.empty()) throw ArgumentError("train_modules: empty corpus");
  Prng rng(config.seed);
  nk::AdamW opt({.lr = config.lr, .weight_decay = config.weight_decay});
  double last_loss = 0.0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<model::Sequence> batch;
    std::vector<NoiseId> ids;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const auto ex = make_example(train[rng.uniform_below(train.size())], config.sequence_length);
      model::Sequence seq = ex.input;
      seq.push_back(static_cast<TokenId>(ex.targets.back()));
      batch.push_back(std::move(seq));
      ids.push_back(modules.noise.draw(rng));
    }
    nk::GradTape tape;
    const numerics::Var ne_vars[] = {tape.parameter(modules.embedder.noise_embedding),
                                     tape.parameter(modules.embedder.combiner),
                                     tape.parameter(modules.embedder.bias)};
    const numerics::Var np_vars[] = {tape.parameter(modules.predictor.weight),
                                     tape.parameter(modules.predictor.bias)};
    const auto loss = joint_objective(tape, base, ne_vars, np_vars, batch, ids, config.lambda,
                                      config.predictor_scale);
    last_loss = tape.value(loss)[0];
    if (!std::isfinite(last_loss)) {
      throw TrainingError("train_modules: loss diverged at step " + std::to_string(step));
    }
    const auto grads = tape.reverse_gradients(loss);
    Tensor* const targets[] = {&modules.embedder.noise_embedding, &modules.embedder.combiner,
                               &modules.embedder.bias, &modules.predictor.weight,
                               &modules.predictor.bias};
    opt.step(targets, grads);
  }
  if (metrics != nullptr) {
    std::vector<model::Sequence> cut;
    for (const auto& seq : heldout) {
      const auto ex = make_example(seq, config.sequence_length);
      model::Sequence s = ex.input;
      s.push_back(static_cast<TokenId>(ex.targets.back()));
      cut.push_back(std::move(s));
    }
    Prng eval_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    *metrics = cut.empty() ? TrainMetrics{} : evaluate_modules(base, modules, cut, eval_rng);
    metrics->final_train_loss = last_loss;
  }
  return modules;
}

}  // namespace priveri::protocol2

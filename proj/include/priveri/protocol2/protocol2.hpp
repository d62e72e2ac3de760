#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "priveri/io/bundle.hpp"
#include "priveri/model/train.hpp"
#include "priveri/numerics/autodiff.hpp"
#include "priveri/protocol1/protocol1.hpp"

// Logit fingerprinting with injected, predictable noise. Every non-sentinel
// token embedding is combined with a secret noise id; the provider's final
// hidden states must let a public predictor recover it.
namespace priveri::protocol2 {

using model::ModelParams;
using model::TokenId;
using numerics::Prng;
using numerics::Tensor;
using protocol1::AugmentedRequest;
using protocol1::SentinelCache;
using protocol1::SentinelSequence;
using NoiseId = std::uint32_t;

inline constexpr const char* kNoiseMagic = "PVNOISE1";

/// The discrete noise alphabet B = {0, ..., size-1}.
struct NoiseSet {
  std::size_t size = 16;

  /// ArgumentError unless size >= 2.
  void validate() const;
  NoiseId draw(Prng& rng) const { return static_cast<NoiseId>(rng.uniform_below(size)); }
};

struct NoiseEmbedderParams {
  Tensor noise_embedding;  // |B| x d_e
  Tensor combiner;         // 2 d_e x d_e
  Tensor bias;             // d_e
};

struct NoisePredictorParams {
  Tensor weight;  // d_h x |B|
  Tensor bias;    // |B|
};

/// Combiner starts as the pass-through [I; 0] with zero bias so the noised
/// model initially equals the base model; E ~ N(0, noise_std).
NoiseEmbedderParams init_noise_embedder(std::size_t embed_dim, const NoiseSet& noise,
                                        std::uint64_t seed, double noise_std = 3.0);
/// W ~ N(0, 0.02), zero bias.
NoisePredictorParams init_noise_predictor(std::size_t hidden_dim, const NoiseSet& noise,
                                          std::uint64_t seed);

/// e' = W^T concat(e, E[b]) + bias for a single embedding vector.
Tensor embed_noise(const NoiseEmbedderParams& ne, const Tensor& e, NoiseId b);

/// Row-wise embed_noise over an L x d_e block with one noise id per row.
Tensor embed_noise_rows(const NoiseEmbedderParams& ne, const Tensor& e,
                        std::span<const NoiseId> ids);

/// argmax over W^T h + bias, ties to the lowest id.
NoiseId predict_noise(const NoisePredictorParams& np, std::span<const double> hidden_row);

enum class NoiseMode { shared, per_position };

struct NoisyRequest {
  AugmentedRequest base;  // token-level request, sentinels included
  Tensor embeddings;      // (N+K) x d_e, noised except at sentinel slots
  std::vector<NoiseId> noise_cache;  // one id per original slot, in slot order
  NoiseMode mode = NoiseMode::shared;
};

/// Noises every non-sentinel embedding of an already built request.
NoisyRequest noise_request(const ModelParams& params, AugmentedRequest base,
                           const NoiseSet& noise, const NoiseEmbedderParams& ne, Prng& rng,
                           NoiseMode mode = NoiseMode::shared);

/// Samples sentinel positions as protocol 1 does, then draws noise.
NoisyRequest build_noisy_request(const ModelParams& params, std::span<const TokenId> prompt,
                                 const SentinelSequence& sentinels, const NoiseSet& noise,
                                 const NoiseEmbedderParams& ne, Prng& rng,
                                 NoiseMode mode = NoiseMode::shared);

struct NoisyVerificationResult {
  protocol1::VerificationResult sentinel_check;
  std::vector<bool> noise_matches;  // per original slot
  bool verified = false;
};

/// Sentinel rows of `hidden` are projected through `unembedding` and checked
/// against the cache; every other row must predict its noise id. Verified only
/// when both hold.
NoisyVerificationResult verify_noisy(const Tensor& hidden, const NoisyRequest& request,
                                     const SentinelCache& cache, const NoisePredictorParams& np,
                                     const Tensor& unembedding,
                                     double tol = protocol1::kDefaultTolerance);

/// 1 - prod(acc_n). ArgumentError for values outside [0, 1].
double completeness_bound(std::span<const double> accuracies);
/// 1 / |B|.
double soundness_bound(const NoiseSet& noise);

/// Trained module pair bound to the base model it was trained against.
struct NoiseModules {
  io::Digest base_model_hash{};
  NoiseSet noise;
  NoiseEmbedderParams embedder;
  NoisePredictorParams predictor;
};

/// IntegrityError unless `modules` were trained against `params`.
void check_base(const NoiseModules& modules, const ModelParams& params);

/// Same as verify_noisy, after checking the base-model hash.
NoisyVerificationResult verify_noisy(const Tensor& hidden, const NoisyRequest& request,
                                     const SentinelCache& cache, const NoiseModules& modules,
                                     const ModelParams& params,
                                     double tol = protocol1::kDefaultTolerance);

io::Bundle to_bundle(const NoiseModules& modules);
NoiseModules from_bundle(const io::Bundle& bundle);
void save_noise_modules(const std::filesystem::path& manifest_path, const NoiseModules& modules);
NoiseModules load_noise_modules(const std::filesystem::path& manifest_path);

struct TrainConfig {
  double lambda = 3.5;
  double lr = 5e-4;
  double weight_decay = 0.01;
  std::size_t steps = 300;
  std::size_t batch = 8;
  std::size_t sequence_length = 32;  // input tokens per training sequence
  std::uint64_t seed = 5;
  // Temperature on the predictor logits inside the noise cross-entropy only;
  // predictions are argmaxes and do not see it.
  double predictor_scale = 16.0;
};

struct TrainMetrics {
  double heldout_log_loss = 0.0;       // noised model
  double base_log_loss = 0.0;          // frozen base, no noise
  double heldout_noise_accuracy = 0.0; // per position
  double final_train_loss = 0.0;
};

/// Builds the joint objective for one batch on `tape`:
///   mean over sequences of  CE_lm + lambda * CE_noise
/// where each sequence gets one noise id shared by all of its positions and
/// CE_noise is taken over predictor_scale * (W^T h + bias).
/// `ne_vars` = {E, W, bias}, `np_vars` = {W, bias}. The base model is taped
/// as constants.
numerics::Var joint_objective(numerics::GradTape& tape, const ModelParams& base,
                              std::span<const numerics::Var> ne_vars,
                              std::span<const numerics::Var> np_vars,
                              std::span<const model::Sequence> batch,
                              std::span<const NoiseId> noise_ids, double lambda,
                              double predictor_scale = 16.0);

/// Held-out metrics: each sequence draws one noise id from `rng`.
TrainMetrics evaluate_modules(const ModelParams& base, const NoiseModules& modules,
                              std::span<const model::Sequence> heldout, Prng& rng);

/// AdamW on the joint objective; the base model stays frozen.
/// TrainingError if the loss turns non-finite.
NoiseModules train_modules(const ModelParams& base, NoiseModules modules,
                           std::span<const model::Sequence> train,
                           std::span<const model::Sequence> heldout, const TrainConfig& config,
                           TrainMetrics* metrics = nullptr);

/// Fresh modules for `base` with the default initialisation.
NoiseModules init_modules(const ModelParams& base, const NoiseSet& noise, std::uint64_t seed,
                          double noise_std = 3.0);

/// Hidden states of the honest noised run.
Tensor noisy_hidden(const ModelParams& params, const NoisyRequest& request);

}  // namespace priveri::protocol2

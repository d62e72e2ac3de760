#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "priveri/model/forward.hpp"
#include "priveri/protocol1/protocol1.hpp"
#include "priveri/protocol2/protocol2.hpp"

// Simulated privacy gadget. Nothing is encrypted; instead every provider
// strategy is written against an AdversaryView plus an opaque request handle
// that it may only evaluate, never inspect.
namespace priveri::privacy {

using model::ModelParams;
using model::TokenId;
using numerics::Prng;
using numerics::Tensor;

/// structural: tensor structure (slots, shapes) visible, values hidden.
/// opaque: only the total length is visible.
enum class PrivacyMode { structural, opaque };

std::string to_string(PrivacyMode mode);
/// ArgumentError on unknown names.
PrivacyMode parse_mode(const std::string& name);

/// What a provider may condition on.
struct AdversaryView {
  std::size_t length = 0;  // L = N + K
  PrivacyMode mode = PrivacyMode::structural;
  std::size_t sentinel_count = 0;  // K, a public protocol parameter
  std::vector<std::size_t> slots;  // 1..L in structural mode, empty in opaque mode
  const protocol1::SentinelCache* cache = nullptr;
  const ModelParams* model = nullptr;

  friend bool operator==(const AdversaryView& a, const AdversaryView& b) {
    return a.length == b.length && a.mode == b.mode && a.sentinel_count == b.sentinel_count &&
           a.slots == b.slots && a.cache == b.cache && a.model == b.model;
  }
};

/// The request as the provider receives it: something it can run a forward
/// pass over. Strategies must not branch on its contents.
struct SealedRequest {
  model::ModelInput input;
  Tensor mask;
  std::vector<model::PositionId> position_ids;

  std::size_t length() const { return model::input_length(input); }
};

SealedRequest seal(const protocol1::AugmentedRequest& request);
SealedRequest seal(const protocol2::NoisyRequest& request);

/// Pure projection: keeps the length and, in structural mode, the slot list.
AdversaryView make_view(std::size_t length, std::size_t sentinel_count, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model);
AdversaryView make_view(const protocol1::AugmentedRequest& request, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model);
AdversaryView make_view(const protocol2::NoisyRequest& request, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model);

enum class StrategyKind {
  honest,
  substitute_model,
  position_guess,
  cache_guess,
  subset_drop,
  random_outputs,
  sampling_tamper,
};

std::string to_string(StrategyKind kind);
/// Accepts the names produced by to_string (e.g. "subset-drop").
StrategyKind parse_strategy(const std::string& name);

struct ProviderStrategy {
  StrategyKind kind = StrategyKind::honest;
  std::size_t drop = 1;  // SubsetDrop(k)
  std::shared_ptr<const ModelParams> substitute;  // SubstituteModel
  std::string substitute_label;

  static ProviderStrategy honest() { return {}; }
  static ProviderStrategy substitute_model(std::shared_ptr<const ModelParams> params,
                                           std::string label);
  static ProviderStrategy position_guess() { return of(StrategyKind::position_guess); }
  static ProviderStrategy cache_guess() { return of(StrategyKind::cache_guess); }
  static ProviderStrategy subset_drop(std::size_t k);
  static ProviderStrategy random_outputs() { return of(StrategyKind::random_outputs); }
  static ProviderStrategy sampling_tamper() { return of(StrategyKind::sampling_tamper); }

  std::string label() const;

 private:
  static ProviderStrategy of(StrategyKind kind) {
    ProviderStrategy s;
    s.kind = kind;
    return s;
  }
};

/// Opaque mode excludes SubsetDrop and PositionGuess.
std::vector<StrategyKind> available_strategies(PrivacyMode mode);
bool is_available(StrategyKind kind, PrivacyMode mode);

struct ProviderOptions {
  bool want_hidden = false;
  /// 0-based rows the verifier will read. When set, computed rows outside it
  /// may be left as NaN; random decisions never depend on it.
  std::optional<std::vector<std::size_t>> rows_read;
};

struct ProviderResponse {
  Tensor logits;  // L x V
  Tensor hidden;  // L x d_h when requested, empty otherwise
  std::vector<TokenId> claimed_tokens;
  std::string label;  // bookkeeping only
  /// Every random choice the strategy made, in order (slots are 1-based).
  std::vector<std::size_t> decisions;
  /// Request rows the strategy fed through the model (cost bookkeeping).
  std::size_t rows_computed = 0;
};

/// Runs `strategy` against the sealed request. CapabilityError when the
/// strategy is not available in view.mode, or when it cannot produce the
/// requested outputs (CacheGuess has no hidden states to paste).
ProviderResponse run_provider(const ProviderStrategy& strategy, const SealedRequest& request,
                              const AdversaryView& view, const ModelParams& params, Prng& rng,
                              const ProviderOptions& options = {});

/// Non-interactive generation under a pre-generated schedule. Each step's
/// augmented request is formed by the gadget from the tokens claimed so far;
/// the claimed token is the argmax of the step's last original row, except
/// that SamplingTamper swaps in the runner-up at one uniformly chosen step.
struct GenerationResponse {
  std::vector<Tensor> step_logits;
  std::vector<TokenId> claimed_tokens;
  std::vector<std::size_t> decisions;
  std::optional<std::size_t> tampered_step;  // 1-based
};

GenerationResponse run_generation(const ProviderStrategy& strategy,
                                  std::span<const TokenId> prompt,
                                  const protocol1::PositionSchedule& schedule,
                                  std::size_t n_steps, PrivacyMode mode,
                                  const protocol1::SentinelCache& cache, const ModelParams& params,
                                  Prng& rng, bool read_all_rows = true);

}  // namespace priveri::privacy

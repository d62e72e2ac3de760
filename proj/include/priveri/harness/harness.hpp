#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "priveri/io/bundle.hpp"
#include "priveri/model/params.hpp"
#include "priveri/privacy/privacy.hpp"
#include "priveri/protocol1/protocol1.hpp"
#include "priveri/protocol2/protocol2.hpp"

namespace priveri::harness {

using model::ModelParams;
using numerics::Prng;

// ---------------------------------------------------------------------------
// Analytic calculators

/// Exact C(n, k) in integer arithmetic. ArgumentError if it does not fit in
/// 64 bits or k > n.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

struct Fraction {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 1;

  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
  std::string str() const { return std::to_string(numerator) + "/" + std::to_string(denominator); }
};

enum class AnalyticKind {
  cache_guess,           // 1/|C|
  position_guess,        // 1/C(N+K, K)
  subset_leave_one_out,  // N/(N+K)
  subset_drop,           // C(N, drop)/C(N+K, drop)
  noise_per_position,    // 1/|B|
  completeness,          // 1 - prod acc_n
};

std::string to_string(AnalyticKind kind);
/// Accepts the names produced by to_string, e.g. "position-guess".
AnalyticKind parse_analytic_kind(const std::string& name);

struct AttackParams {
  std::size_t n = 14;
  std::size_t k = 3;
  std::size_t cache_size = 100;
  std::size_t noise_set = 16;
  std::size_t drop = 1;
  std::vector<double> accuracies;  // completeness only
};

/// Reduced exact fraction; ArgumentError for the completeness kind, which
/// takes real-valued accuracies.
Fraction analytic_fraction(AnalyticKind kind, const AttackParams& params);
double analytic_attack_probability(AnalyticKind kind, const AttackParams& params);

struct AnalyticBounds {
  double cache_guess = 0.0;
  double position_guess = 0.0;
  double subset_leave_one_out = 0.0;
  double noise_per_position = 0.0;
  double completeness = 0.0;
};

AnalyticBounds analytic_bounds(const AttackParams& params);

/// b * (L^2 + 8L + 15). ArgumentError unless L, b >= 1.
std::uint64_t comm_overhead_bytes(std::uint64_t length, std::uint64_t bytes_per_element);

/// |p_hat - p| <= k * sqrt(p (1 - p) / n).
bool standard_error_band(double p_hat, std::size_t n, double p, double k_sigma);

// ---------------------------------------------------------------------------
// Monte Carlo experiments

struct ExperimentSpec {
  int protocol = 1;
  privacy::StrategyKind strategy = privacy::StrategyKind::honest;
  std::size_t drop = 1;                  // subset-drop k
  std::string substitute = "low-rank:63";  // substitute-model perturbation
  privacy::PrivacyMode mode = privacy::PrivacyMode::structural;
  std::size_t n = 14;
  std::size_t k = 3;
  std::size_t cache_size = 100;
  std::size_t noise_set = 16;
  protocol2::NoiseMode noise_mode = protocol2::NoiseMode::shared;
  std::size_t steps = 1;  // > 1 runs non-interactive generation (protocol 1)
  std::size_t trials = 1000;
  std::uint64_t master_seed = 1;
  double tol = protocol1::kDefaultTolerance;
  std::size_t workers = 1;  // no effect on results

  /// ArgumentError on inconsistent fields.
  void validate() const;
};

/// Shared read-only artefacts of an experiment.
struct ExperimentContext {
  std::shared_ptr<const ModelParams> model;
  std::shared_ptr<const protocol1::SentinelCache> cache;
  std::shared_ptr<const protocol2::NoiseModules> modules;  // protocol 2
  std::shared_ptr<const ModelParams> substitute;           // substitute-model
};

/// Fills whatever `base` leaves empty: the desk model (seed 1), a cache of
/// spec.cache_size entries drawn from the master seed, untrained noise
/// modules and the substitute model named by spec.substitute.
ExperimentContext prepare_context(const ExperimentSpec& spec, ExperimentContext base = {});

/// Builds the model named by a perturbation spec: "low-rank:<r>",
/// "quantize:<bits>", "finetune:<lr>" or "seed:<s>".
ModelParams make_substitute(const ModelParams& base, const std::string& spec);

struct ComponentStat {
  std::string name;
  std::size_t hits = 0;
  double rate = 0.0;
  double analytic = 0.0;
  bool within_3_sigma = false;
};

struct NoiseStats {
  std::size_t positions = 0;
  std::size_t matches = 0;
  double per_position_rate = 0.0;
  double per_position_analytic = 0.0;  // 1/|B| for fabricated rows
  double per_position_standard_error = 0.0;
  std::size_t sequences = 0;
  std::size_t sequences_all_match = 0;
  double sequence_rate = 0.0;
  double sequence_bound = 0.0;  // (per-position analytic + 3 SE)^N
};

struct ExperimentReport {
  ExperimentSpec spec;
  std::string strategy_label;
  std::size_t trials = 0;
  std::size_t passes = 0;
  double empirical_rate = 0.0;
  double standard_error = 0.0;
  double analytic_bound = 0.0;
  std::string bound_formula;
  std::string bound_kind;  // "equality" or "upper"
  bool within_3_sigma = false;
  std::optional<ComponentStat> component;
  std::optional<NoiseStats> noise;
  /// Share of request rows the provider ran through the model; single-request
  /// protocol-1 experiments only. Descriptive, never checked against a bound.
  std::optional<double> compute_fraction;
  double wall_clock_seconds = 0.0;
};

io::Json to_json(const ExperimentReport& report, bool include_wall_clock = true);

/// First 8 bytes (little-endian) of SHA-256(master_seed LE || trial LE).
std::uint64_t trial_seed(std::uint64_t master_seed, std::uint64_t trial_index);

ExperimentReport run_attack_experiment(const ExperimentSpec& spec, const ExperimentContext& context);
ExperimentReport run_attack_experiment(const ExperimentSpec& spec);

// ---------------------------------------------------------------------------
// Fingerprint separability

struct Perturbation {
  std::string name;
  std::shared_ptr<const ModelParams> params;
};

struct StudyRow {
  std::string name;
  double min_distance = 0.0;
  double mean_distance = 0.0;
  double max_distance = 0.0;
};

struct StudyTable {
  std::size_t n_sequences = 0;
  std::size_t k = 0;
  double honest_distance = 0.0;            // max over sequences of d(base, base)
  double intra_model_min_distance = 0.0;   // nearest distinct-sequence pair
  std::vector<StudyRow> rows;
};

/// Distances from the base fingerprint to each perturbed model over
/// n_sequences distinct random sequences of length K.
StudyTable fingerprint_study(const ModelParams& base, std::span<const Perturbation> perturbations,
                             std::size_t n_sequences, std::size_t k, Prng& rng);

/// low-rank r = 1, d/2, d-1; 8-bit quantized; one SGD step (lr 1e-3) on
/// `finetune_batch`; an independently initialised model with `other_seed`.
std::vector<Perturbation> standard_perturbations(const ModelParams& base,
                                                 std::span<const model::Sequence> finetune_batch,
                                                 std::uint64_t other_seed);

io::Json to_json(const StudyTable& table);

}  // namespace priveri::harness

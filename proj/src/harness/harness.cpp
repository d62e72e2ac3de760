#include "priveri/harness/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "priveri/error.hpp"
#include "priveri/io/bytes.hpp"
#include "priveri/model/perturb.hpp"
#include "priveri/model/train.hpp"
#include "priveri/numerics/kernels.hpp"

namespace priveri::harness {

using model::TokenId;
using numerics::Tensor;
using privacy::StrategyKind;

// ---------------------------------------------------------------------------
// Analytic calculators

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) throw ArgumentError("binomial: k > n");
  k = std::min(k, n - k);
  // After step i the running value is C(n-k+i, i), so each division is exact.
  unsigned __int128 r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    r = r * (n - k + i) / i;
    if (r > std::numeric_limits<std::uint64_t>::max()) {
      throw ArgumentError("binomial: C(" + std::to_string(n) + ", " + std::to_string(k) +
                          ") overflows 64 bits");
    }
  }
  return static_cast<std::uint64_t>(r);
}

namespace {

Fraction reduced(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw ArgumentError("fraction with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Fraction{0, 1} : Fraction{num / g, den / g};
}

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  const unsigned __int128 r = static_cast<unsigned __int128>(a) * b;
  if (r > std::numeric_limits<std::uint64_t>::max()) throw ArgumentError("bound overflows 64 bits");
  return static_cast<std::uint64_t>(r);
}

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw ArgumentError(std::string(what) + " must be >= 1");
}

}  // namespace

std::string to_string(AnalyticKind kind) {
  switch (kind) {
    case AnalyticKind::cache_guess: return "cache-guess";
    case AnalyticKind::position_guess: return "position-guess";
    case AnalyticKind::subset_leave_one_out: return "subset-leave-one-out";
    case AnalyticKind::subset_drop: return "subset-drop";
    case AnalyticKind::noise_per_position: return "noise-per-position";
    case AnalyticKind::completeness: return "completeness";
  }
  throw ArgumentError("unknown analytic kind");
}

AnalyticKind parse_analytic_kind(const std::string& name) {
  for (auto k : {AnalyticKind::cache_guess, AnalyticKind::position_guess,
                 AnalyticKind::subset_leave_one_out, AnalyticKind::subset_drop,
                 AnalyticKind::noise_per_position, AnalyticKind::completeness}) {
    if (to_string(k) == name) return k;
  }
  throw ArgumentError("unknown bound kind '" + name + "'");
}

Fraction analytic_fraction(AnalyticKind kind, const AttackParams& p) {
  switch (kind) {
    case AnalyticKind::cache_guess:
      require_positive(p.cache_size, "cache size");
      return {1, p.cache_size};
    case AnalyticKind::position_guess:
      require_positive(p.n, "N");
      require_positive(p.k, "K");
      return {1, binomial(p.n + p.k, p.k)};
    case AnalyticKind::subset_leave_one_out:
      require_positive(p.n, "N");
      require_positive(p.k, "K");
      return reduced(p.n, p.n + p.k);
    case AnalyticKind::subset_drop:
      require_positive(p.n, "N");
      require_positive(p.k, "K");
      require_positive(p.drop, "drop");
      if (p.drop > p.n) throw ArgumentError("drop count exceeds N");
      return reduced(binomial(p.n, p.drop), binomial(p.n + p.k, p.drop));
    case AnalyticKind::noise_per_position:
      if (p.noise_set < 2) throw ArgumentError("noise set size must be >= 2");
      return {1, p.noise_set};
    case AnalyticKind::completeness:
      throw ArgumentError("completeness bound is not a rational of the parameters");
  }
  throw ArgumentError("unknown analytic kind");
}

double analytic_attack_probability(AnalyticKind kind, const AttackParams& params) {
  if (kind == AnalyticKind::completeness) return protocol2::completeness_bound(params.accuracies);
  return analytic_fraction(kind, params).value();
}

AnalyticBounds analytic_bounds(const AttackParams& params) {
  AnalyticBounds b;
  b.cache_guess = analytic_attack_probability(AnalyticKind::cache_guess, params);
  b.position_guess = analytic_attack_probability(AnalyticKind::position_guess, params);
  b.subset_leave_one_out = analytic_attack_probability(AnalyticKind::subset_leave_one_out, params);
  b.noise_per_position = analytic_attack_probability(AnalyticKind::noise_per_position, params);
  b.completeness = analytic_attack_probability(AnalyticKind::completeness, params);
  return b;
}

std::uint64_t comm_overhead_bytes(std::uint64_t length, std::uint64_t bytes_per_element) {
  if (length == 0 || bytes_per_element == 0) throw ArgumentError("L and b must be >= 1");
  const std::uint64_t quad = checked_mul(length, length);
  const std::uint64_t lin = checked_mul(8, length);
  if (quad > std::numeric_limits<std::uint64_t>::max() - lin - 15) {
    throw ArgumentError("communication size overflows 64 bits");
  }
  return checked_mul(bytes_per_element, quad + lin + 15);
}

bool standard_error_band(double p_hat, std::size_t n, double p, double k_sigma) {
  if (n == 0) throw ArgumentError("standard_error_band: n must be >= 1");
  const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  return std::fabs(p_hat - p) <= k_sigma * se;
}

namespace {

bool upper_band(double p_hat, std::size_t n, double p, double k_sigma) {
  return p_hat <= p + k_sigma * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

}  // namespace

// ---------------------------------------------------------------------------
// Experiment set-up

void ExperimentSpec::validate() const {
  if (protocol != 1 && protocol != 2) throw ArgumentError("protocol must be 1 or 2");
  require_positive(n, "N");
  require_positive(k, "K");
  require_positive(cache_size, "cache size");
  require_positive(trials, "trials");
  require_positive(steps, "steps");
  require_positive(workers, "workers");
  if (noise_set < 2) throw ArgumentError("noise set size must be >= 2");
  if (!(tol >= 0.0)) throw ArgumentError("tolerance must be >= 0");
  if (strategy == StrategyKind::subset_drop) {
    require_positive(drop, "drop");
    if (drop > n) throw ArgumentError("drop count exceeds N");
  }
  if (!privacy::is_available(strategy, mode)) {
    throw CapabilityError(privacy::to_string(strategy) + " is not available in " +
                          privacy::to_string(mode) + " mode");
  }
  if (protocol == 2) {
    if (steps != 1) throw ArgumentError("protocol 2 experiments are single-request");
    if (strategy == StrategyKind::sampling_tamper) {
      throw ArgumentError("sampling-tamper needs protocol 1 generation");
    }
    if (strategy == StrategyKind::cache_guess) {
      throw CapabilityError("cache-guess cannot forge hidden states");
    }
  }
}

ModelParams make_substitute(const ModelParams& base, const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ArgumentError("substitute spec needs 'kind:value'");
  const std::string kind = spec.substr(0, colon);
  const std::string value = spec.substr(colon + 1);
  try {
    if (kind == "low-rank") return model::perturb_low_rank(base, std::stoul(value));
    if (kind == "quantize") return model::perturb_quantize(base, std::stoi(value));
    if (kind == "finetune") {
      model::MarkovCorpusConfig cc;
      cc.vocab_size = base.config.vocab_size;
      const auto corpus = model::make_markov_corpus(cc);
      const std::span<const model::Sequence> batch(corpus.train.data(),
                                                   std::min<std::size_t>(8, corpus.train.size()));
      return model::perturb_finetune_step(base, batch, std::stod(value));
    }
    if (kind == "seed") return model::init_params(base.config, std::stoull(value));
  } catch (const std::invalid_argument&) {
    throw ArgumentError("bad substitute value '" + value + "'");
  } catch (const std::out_of_range&) {
    throw ArgumentError("bad substitute value '" + value + "'");
  }
  throw ArgumentError("unknown substitute kind '" + kind + "'");
}

ExperimentContext prepare_context(const ExperimentSpec& spec, ExperimentContext ctx) {
  spec.validate();
  if (!ctx.model) {
    ctx.model = std::make_shared<const ModelParams>(model::init_params(model::ModelConfig{}, 1));
  }
  if (!ctx.cache) {
    Prng rng(trial_seed(spec.master_seed, std::numeric_limits<std::uint64_t>::max()));
    ctx.cache = std::make_shared<const protocol1::SentinelCache>(
        protocol1::generate_cache(*ctx.model, spec.cache_size, spec.k, rng));
  }
  if (spec.protocol == 2 && !ctx.modules) {
    ctx.modules = std::make_shared<const protocol2::NoiseModules>(
        protocol2::init_modules(*ctx.model, protocol2::NoiseSet{spec.noise_set}, spec.master_seed));
  }
  if (spec.strategy == StrategyKind::substitute_model && !ctx.substitute) {
    ctx.substitute = std::make_shared<const ModelParams>(make_substitute(*ctx.model, spec.substitute));
  }
  return ctx;
}

std::uint64_t trial_seed(std::uint64_t master_seed, std::uint64_t trial_index) {
  std::array<std::uint8_t, 16> buf{};
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<std::uint8_t>(master_seed >> (8 * i));
    buf[8 + i] = static_cast<std::uint8_t>(trial_index >> (8 * i));
  }
  const io::Digest d = io::sha256(buf);
  std::uint64_t s = 0;
  for (int i = 0; i < 8; ++i) s |= static_cast<std::uint64_t>(d[i]) << (8 * i);
  return s;
}

// ---------------------------------------------------------------------------
// Trials

namespace {

struct TrialOutcome {
  bool pass = false;
  bool component_hit = false;
  std::uint32_t noise_positions = 0;
  std::uint32_t noise_matches = 0;
  bool noise_all_match = false;
  std::uint32_t rows_total = 0;
  std::uint32_t rows_computed = 0;
};

struct Analytic {
  double value = 0.0;
  std::string formula;
  std::string kind = "equality";
  std::optional<std::pair<std::string, double>> component;
};

bool is_generation(const ExperimentSpec& spec) {
  return spec.protocol == 1 && (spec.steps > 1 || spec.strategy == StrategyKind::sampling_tamper);
}

privacy::ProviderStrategy make_strategy(const ExperimentSpec& spec, const ExperimentContext& ctx) {
  switch (spec.strategy) {
    case StrategyKind::honest: return privacy::ProviderStrategy::honest();
    case StrategyKind::substitute_model:
      return privacy::ProviderStrategy::substitute_model(ctx.substitute, spec.substitute);
    case StrategyKind::position_guess: return privacy::ProviderStrategy::position_guess();
    case StrategyKind::cache_guess: return privacy::ProviderStrategy::cache_guess();
    case StrategyKind::subset_drop: return privacy::ProviderStrategy::subset_drop(spec.drop);
    case StrategyKind::random_outputs: return privacy::ProviderStrategy::random_outputs();
    case StrategyKind::sampling_tamper: return privacy::ProviderStrategy::sampling_tamper();
  }
  throw ArgumentError("unknown strategy");
}

std::vector<TokenId> draw_prompt(std::size_t n, std::size_t vocab, Prng& rng) {
  std::vector<TokenId> prompt(n);
  for (auto& t : prompt) t = static_cast<TokenId>(rng.uniform_below(vocab));
  return prompt;
}

std::vector<std::size_t> zero_based(std::span<const std::size_t> slots) {
  std::vector<std::size_t> rows(slots.begin(), slots.end());
  for (auto& r : rows) --r;
  return rows;
}

TrialOutcome single_request_trial(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                  const privacy::ProviderStrategy& strategy, Prng& rng) {
  const ModelParams& params = *ctx.model;
  const auto& cache = *ctx.cache;
  const auto prompt = draw_prompt(spec.n, params.config.vocab_size, rng);
  const auto& sentinels = cache.draw(rng);
  const auto request = protocol1::build_request(prompt, sentinels, rng);
  Prng provider_rng = rng.fork();
  const auto view = privacy::make_view(request, spec.mode, &cache, &params);
  privacy::ProviderOptions options;
  options.rows_read = zero_based(request.sentinel_positions);
  const auto resp =
      privacy::run_provider(strategy, privacy::seal(request), view, params, provider_rng, options);

  TrialOutcome out;
  out.pass = protocol1::verify(resp.logits, request, cache, spec.tol).verified;
  out.rows_total = static_cast<std::uint32_t>(request.length());
  out.rows_computed = static_cast<std::uint32_t>(resp.rows_computed);
  if (spec.strategy == StrategyKind::cache_guess && !resp.decisions.empty()) {
    out.component_hit = cache.entries().at(resp.decisions.front()).sequence == sentinels;
  }
  return out;
}

TrialOutcome generation_trial(const ExperimentSpec& spec, const ExperimentContext& ctx,
                              const privacy::ProviderStrategy& strategy, Prng& rng) {
  const ModelParams& params = *ctx.model;
  const auto& cache = *ctx.cache;
  const auto prompt = draw_prompt(spec.n, params.config.vocab_size, rng);
  const auto schedule = protocol1::pregenerate_schedule(spec.n, spec.k, spec.steps, cache, rng);
  Prng provider_rng = rng.fork();
  const auto gen = privacy::run_generation(strategy, prompt, schedule, spec.steps, spec.mode, cache,
                                           params, provider_rng, /*read_all_rows=*/false);

  const auto transcript = protocol1::verify_transcript(gen.step_logits, schedule, cache, spec.tol);
  std::vector<Tensor> rows;
  rows.reserve(gen.step_logits.size());
  for (std::size_t s = 1; s <= gen.step_logits.size(); ++s) {
    const auto row = gen.step_logits[s - 1].row(schedule.last_original_row(s));
    rows.push_back(Tensor::vector({row.begin(), row.end()}));
  }
  const auto sampling = protocol1::verify_greedy_sampling(rows, gen.claimed_tokens);

  TrialOutcome out;
  out.pass = transcript.verified && sampling.verified;
  if (spec.strategy == StrategyKind::sampling_tamper) {
    out.component_hit = transcript.verified && !sampling.verified &&
                        sampling.first_failure == gen.tampered_step;
  }
  return out;
}

TrialOutcome noisy_trial(const ExperimentSpec& spec, const ExperimentContext& ctx,
                         const privacy::ProviderStrategy& strategy, Prng& rng) {
  const ModelParams& params = *ctx.model;
  const auto& cache = *ctx.cache;
  const auto& modules = *ctx.modules;
  const auto prompt = draw_prompt(spec.n, params.config.vocab_size, rng);
  const auto& sentinels = cache.draw(rng);
  const auto request = protocol2::build_noisy_request(params, prompt, sentinels, modules.noise,
                                                      modules.embedder, rng, spec.noise_mode);
  Prng provider_rng = rng.fork();
  const auto view = privacy::make_view(request, spec.mode, &cache, &params);
  privacy::ProviderOptions options;
  options.want_hidden = true;
  const auto resp =
      privacy::run_provider(strategy, privacy::seal(request), view, params, provider_rng, options);
  const auto result = protocol2::verify_noisy(resp.hidden, request, cache, modules, params, spec.tol);

  TrialOutcome out;
  out.pass = result.verified;
  out.noise_positions = static_cast<std::uint32_t>(result.noise_matches.size());
  out.noise_matches = static_cast<std::uint32_t>(
      std::count(result.noise_matches.begin(), result.noise_matches.end(), true));
  out.noise_all_match = out.noise_matches == out.noise_positions;
  return out;
}

TrialOutcome run_trial(const ExperimentSpec& spec, const ExperimentContext& ctx,
                       const privacy::ProviderStrategy& strategy, std::uint64_t index) {
  Prng rng(trial_seed(spec.master_seed, index));
  if (spec.protocol == 2) return noisy_trial(spec, ctx, strategy, rng);
  if (is_generation(spec)) return generation_trial(spec, ctx, strategy, rng);
  return single_request_trial(spec, ctx, strategy, rng);
}

std::vector<TrialOutcome> run_trials(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                     const privacy::ProviderStrategy& strategy) {
  std::vector<TrialOutcome> outcomes(spec.trials);
  const std::size_t workers = std::min(spec.workers, spec.trials);
  auto run_chunk = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) outcomes[i] = run_trial(spec, ctx, strategy, i);
  };
  if (workers <= 1) {
    run_chunk(0, spec.trials);
    return outcomes;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = spec.trials * w / workers;
    const std::size_t end = spec.trials * (w + 1) / workers;
    threads.emplace_back([&, w, begin, end] {
      try {
        run_chunk(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return outcomes;
}

// Per-step factor of the single-request bound, over N_i original tokens.
double step_bound(const ExperimentSpec& spec, std::size_t n_i) {
  AttackParams p;
  p.n = n_i;
  p.k = spec.k;
  p.cache_size = spec.cache_size;
  p.drop = spec.drop;
  switch (spec.strategy) {
    case StrategyKind::position_guess:
      return analytic_attack_probability(AnalyticKind::position_guess, p);
    case StrategyKind::cache_guess: {
      const Fraction pos = analytic_fraction(AnalyticKind::position_guess, p);
      return Fraction{1, checked_mul(spec.cache_size, pos.denominator)}.value();
    }
    case StrategyKind::subset_drop:
      return analytic_attack_probability(AnalyticKind::subset_drop, p);
    default: return 0.0;
  }
}

std::string strategy_formula(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::position_guess: return "1/C(N+K,K)";
    case StrategyKind::cache_guess: return "1/(|C|*C(N+K,K))";
    case StrategyKind::subset_drop: return "C(N,k)/C(N+K,k)";
    default: return "";
  }
}

Analytic analytic_for(const ExperimentSpec& spec, double per_position_accuracy) {
  Analytic a;
  const double inv_b = 1.0 / static_cast<double>(spec.noise_set);
  switch (spec.strategy) {
    case StrategyKind::honest:
      if (spec.protocol == 2) {
        a.value = std::pow(per_position_accuracy, static_cast<double>(spec.n));
        a.formula = "acc^N";
      } else {
        a.value = 1.0;
        a.formula = "1";
      }
      return a;
    case StrategyKind::substitute_model:
    case StrategyKind::random_outputs:
      a.value = 0.0;
      a.formula = "0";
      return a;
    case StrategyKind::sampling_tamper:
      a.value = 0.0;
      a.formula = "0";
      a.component = {"detected_at_tampered_step", 1.0};
      return a;
    default: break;
  }
  if (spec.protocol == 2) {
    a.kind = "upper";
    a.value = step_bound(spec, spec.n) * inv_b;
    a.formula = strategy_formula(spec.strategy) + "/|B|";
    return a;
  }
  if (is_generation(spec)) {
    a.value = 1.0;
    for (std::size_t s = 1; s <= spec.steps; ++s) a.value *= step_bound(spec, spec.n + s - 1);
    a.formula = "prod_i " + strategy_formula(spec.strategy) + " at N_i = N+i-1";
  } else {
    a.value = step_bound(spec, spec.n);
    a.formula = strategy_formula(spec.strategy);
  }
  if (spec.strategy == StrategyKind::cache_guess) {
    a.component = {"cache_entry_guessed", 1.0 / static_cast<double>(spec.cache_size)};
  }
  return a;
}

}  // namespace

ExperimentReport run_attack_experiment(const ExperimentSpec& spec, const ExperimentContext& context) {
  spec.validate();
  const auto started = std::chrono::steady_clock::now();
  const ExperimentContext ctx = prepare_context(spec, context);
  if (ctx.cache->k() != spec.k) throw ArgumentError("cache K differs from the experiment's K");
  if (ctx.modules && ctx.modules->noise.size != spec.noise_set && spec.protocol == 2) {
    throw ArgumentError("noise modules |B| differs from the experiment's |B|");
  }
  const auto strategy = make_strategy(spec, ctx);
  const auto outcomes = run_trials(spec, ctx, strategy);

  ExperimentReport r;
  r.spec = spec;
  r.strategy_label = strategy.label();
  r.trials = spec.trials;
  std::size_t hits = 0;
  NoiseStats noise;
  std::uint64_t rows_total = 0;
  std::uint64_t rows_computed = 0;
  for (const auto& o : outcomes) {
    rows_total += o.rows_total;
    rows_computed += o.rows_computed;
    r.passes += o.pass ? 1 : 0;
    hits += o.component_hit ? 1 : 0;
    noise.positions += o.noise_positions;
    noise.matches += o.noise_matches;
    noise.sequences_all_match += o.noise_all_match ? 1 : 0;
  }
  const double n = static_cast<double>(r.trials);
  r.empirical_rate = static_cast<double>(r.passes) / n;
  r.standard_error = std::sqrt(r.empirical_rate * (1.0 - r.empirical_rate) / n);
  if (rows_total > 0) {
    r.compute_fraction = static_cast<double>(rows_computed) / static_cast<double>(rows_total);
  }

  double accuracy = 0.0;
  if (spec.protocol == 2) {
    noise.sequences = r.trials;
    noise.per_position_rate =
        noise.positions == 0 ? 0.0
                             : static_cast<double>(noise.matches) / static_cast<double>(noise.positions);
    noise.per_position_analytic = 1.0 / static_cast<double>(spec.noise_set);
    const double p = noise.per_position_analytic;
    noise.per_position_standard_error =
        noise.positions == 0 ? 0.0 : std::sqrt(p * (1.0 - p) / static_cast<double>(noise.positions));
    noise.sequence_rate = static_cast<double>(noise.sequences_all_match) / n;
    noise.sequence_bound =
        std::pow(p + 3.0 * noise.per_position_standard_error, static_cast<double>(spec.n));
    accuracy = noise.per_position_rate;
    r.noise = noise;
  }

  const Analytic a = analytic_for(spec, accuracy);
  r.analytic_bound = a.value;
  r.bound_formula = a.formula;
  r.bound_kind = a.kind;
  r.within_3_sigma = a.kind == "equality" ? standard_error_band(r.empirical_rate, r.trials, a.value, 3.0)
                                          : upper_band(r.empirical_rate, r.trials, a.value, 3.0);
  if (a.component) {
    ComponentStat c;
    c.name = a.component->first;
    c.hits = hits;
    c.rate = static_cast<double>(hits) / n;
    c.analytic = a.component->second;
    c.within_3_sigma = standard_error_band(c.rate, r.trials, c.analytic, 3.0);
    r.component = c;
  }
  r.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

ExperimentReport run_attack_experiment(const ExperimentSpec& spec) {
  return run_attack_experiment(spec, ExperimentContext{});
}

io::Json to_json(const ExperimentReport& r, bool include_wall_clock) {
  const ExperimentSpec& s = r.spec;
  io::Json j;
  j["protocol"] = s.protocol;
  j["strategy"] = privacy::to_string(s.strategy);
  j["strategy_label"] = r.strategy_label;
  j["mode"] = privacy::to_string(s.mode);
  j["n"] = s.n;
  j["k"] = s.k;
  j["cache_size"] = s.cache_size;
  j["noise_set"] = s.noise_set;
  j["noise_mode"] = s.noise_mode == protocol2::NoiseMode::shared ? "shared" : "per-position";
  j["steps"] = s.steps;
  j["master_seed"] = s.master_seed;
  j["tolerance"] = s.tol;
  j["trials"] = r.trials;
  j["passes"] = r.passes;
  j["empirical_rate"] = r.empirical_rate;
  j["standard_error"] = r.standard_error;
  j["analytic_bound"] = r.analytic_bound;
  j["bound_formula"] = r.bound_formula;
  j["bound_kind"] = r.bound_kind;
  j["within_3_sigma"] = r.within_3_sigma;
  if (r.component) {
    const auto& c = *r.component;
    j["component"] = {{"name", c.name},
                      {"hits", c.hits},
                      {"rate", c.rate},
                      {"analytic", c.analytic},
                      {"within_3_sigma", c.within_3_sigma}};
  }
  if (r.noise) {
    const auto& ns = *r.noise;
    j["noise"] = {{"positions", ns.positions},
                  {"matches", ns.matches},
                  {"per_position_rate", ns.per_position_rate},
                  {"per_position_analytic", ns.per_position_analytic},
                  {"per_position_standard_error", ns.per_position_standard_error},
                  {"sequences", ns.sequences},
                  {"sequences_all_match", ns.sequences_all_match},
                  {"sequence_rate", ns.sequence_rate},
                  {"sequence_bound", ns.sequence_bound}};
  }
  if (r.compute_fraction) j["compute_fraction"] = *r.compute_fraction;
  if (include_wall_clock) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

// ---------------------------------------------------------------------------
// Fingerprint separability

StudyTable fingerprint_study(const ModelParams& base, std::span<const Perturbation> perturbations,
                             std::size_t n_sequences, std::size_t k, Prng& rng) {
  require_positive(n_sequences, "n_sequences");
  require_positive(k, "K");
  const std::size_t vocab = base.config.vocab_size;
  // Distinct sequences; the space must be large enough to hold them.
  long double space = 1.0L;
  for (std::size_t i = 0; i < k; ++i) space *= static_cast<long double>(vocab);
  if (static_cast<long double>(n_sequences) > space) {
    throw ArgumentError("more sequences requested than V^K");
  }
  std::set<protocol1::SentinelSequence> seen;
  std::vector<protocol1::SentinelSequence> sequences;
  while (sequences.size() < n_sequences) {
    protocol1::SentinelSequence s(k);
    for (auto& t : s) t = static_cast<TokenId>(rng.uniform_below(vocab));
    if (seen.insert(s).second) sequences.push_back(std::move(s));
  }

  StudyTable table;
  table.n_sequences = n_sequences;
  table.k = k;
  std::vector<Tensor> base_fp;
  base_fp.reserve(n_sequences);
  for (const auto& s : sequences) {
    base_fp.push_back(protocol1::fingerprint(base, s));
    const double d = protocol1::fingerprint_distance(base_fp.back(), protocol1::fingerprint(base, s));
    table.honest_distance = std::max(table.honest_distance, d);
  }

  table.intra_model_min_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_sequences; ++i) {
    for (std::size_t j = i + 1; j < n_sequences; ++j) {
      table.intra_model_min_distance = std::min(
          table.intra_model_min_distance, protocol1::fingerprint_distance(base_fp[i], base_fp[j]));
    }
  }
  if (n_sequences < 2) table.intra_model_min_distance = 0.0;

  for (const auto& p : perturbations) {
    if (!p.params) throw ArgumentError("perturbation '" + p.name + "' has no model");
    StudyRow row;
    row.name = p.name;
    row.min_distance = std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (std::size_t i = 0; i < n_sequences; ++i) {
      const double d =
          protocol1::fingerprint_distance(base_fp[i], protocol1::fingerprint(*p.params, sequences[i]));
      row.min_distance = std::min(row.min_distance, d);
      row.max_distance = std::max(row.max_distance, d);
      sum += d;
    }
    row.mean_distance = sum / static_cast<double>(n_sequences);
    table.rows.push_back(row);
  }
  return table;
}

std::vector<Perturbation> standard_perturbations(const ModelParams& base,
                                                 std::span<const model::Sequence> finetune_batch,
                                                 std::uint64_t other_seed) {
  const std::size_t d = base.config.embed_dim;
  std::vector<Perturbation> out;
  auto add = [&](std::string name, ModelParams p) {
    out.push_back({std::move(name), std::make_shared<const ModelParams>(std::move(p))});
  };
  for (std::size_t r : {std::size_t{1}, d / 2, d - 1}) {
    add("low-rank r=" + std::to_string(r), model::perturb_low_rank(base, r));
  }
  add("quantized 8-bit", model::perturb_quantize(base, 8));
  add("fine-tune step lr=1e-3", model::perturb_finetune_step(base, finetune_batch, 1e-3));
  add("different seed " + std::to_string(other_seed), model::init_params(base.config, other_seed));
  return out;
}

io::Json to_json(const StudyTable& t) {
  io::Json j;
  j["n_sequences"] = t.n_sequences;
  j["k"] = t.k;
  j["honest_distance"] = t.honest_distance;
  j["intra_model_min_distance"] = t.intra_model_min_distance;
  io::Json rows = io::Json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"perturbation", r.name},
                    {"min_distance", r.min_distance},
                    {"mean_distance", r.mean_distance},
                    {"max_distance", r.max_distance}});
  }
  j["rows"] = rows;
  return j;
}

}  // namespace priveri::harness

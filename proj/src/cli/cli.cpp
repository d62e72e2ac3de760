#include "priveri/cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <type_traits>

#include "CLI11.hpp"
#include "priveri/cli/records.hpp"
#include "priveri/error.hpp"
#include "priveri/harness/harness.hpp"
#include "priveri/io/bytes.hpp"
#include "priveri/model/generate.hpp"
#include "priveri/model/serialize.hpp"
#include "priveri/model/train.hpp"
#include "priveri/privacy/privacy.hpp"
#include "priveri/protocol1/protocol1.hpp"
#include "priveri/protocol2/protocol2.hpp"

namespace priveri::cli {

using io::Json;
using model::ModelParams;
using model::TokenId;
using numerics::Prng;

std::uint64_t RunConfig::resolved_seed() const {
  if (has("seed")) return seed;
  if (const char* env = std::getenv("PRIVERI_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used, 10);
      if (used == std::char_traits<char>::length(env)) return v;
    } catch (const std::exception&) {
    }
    throw ArgumentError(std::string("PRIVERI_SEED is not an unsigned integer: '") + env + "'");
  }
  return 1;
}

namespace {

// ---------------------------------------------------------------------------
// Flag table

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

struct Field {
  std::string flag;
  std::function<CLI::Option*(CLI::App&, RunConfig&)> add;
  std::function<void(RunConfig&, const RunConfig&)> copy;
  std::function<void(RunConfig&, const Json&)> read;

  std::string key() const {
    std::string k = flag;
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
  }
};

template <typename T>
Field field(std::string flag, T RunConfig::*member, std::string help) {
  Field f;
  f.flag = flag;
  f.add = [flag, member, help](CLI::App& app, RunConfig& c) {
    CLI::Option* opt = app.add_option("--" + flag, c.*member, help);
    if constexpr (is_vector<T>::value) opt->delimiter(',');
    return opt;
  };
  f.copy = [member](RunConfig& dst, const RunConfig& src) { dst.*member = src.*member; };
  f.read = [member](RunConfig& c, const Json& j) { c.*member = j.get<T>(); };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("model", &RunConfig::model, "model manifest"),
      field("cache", &RunConfig::cache, "sentinel cache file"),
      field("noise-params", &RunConfig::noise_params, "noise module manifest"),
      field("request", &RunConfig::request, "request record manifest"),
      field("response", &RunConfig::response, "response record manifest"),
      field("out", &RunConfig::out, "output path"),
      field("protocol", &RunConfig::protocol, "1 or 2"),
      field("mode", &RunConfig::mode, "structural or opaque"),
      field("strategy", &RunConfig::strategy, "provider strategy"),
      field("noise-mode", &RunConfig::noise_mode, "shared or per-position"),
      field("substitute", &RunConfig::substitute,
            "substitute model: low-rank:<r>, quantize:<bits>, finetune:<lr>, seed:<s>"),
      field("kind", &RunConfig::kind, "bound kind"),
      field("n", &RunConfig::n, "prompt length N"),
      field("k", &RunConfig::k, "sentinel count K"),
      field("cache-size", &RunConfig::cache_size, "cache entries |C|"),
      field("noise-set", &RunConfig::noise_set, "noise alphabet size |B|"),
      field("drop", &RunConfig::drop, "tokens dropped by subset-drop"),
      field("trials", &RunConfig::trials, "Monte Carlo trials"),
      field("workers", &RunConfig::workers, "worker threads"),
      field("sequences", &RunConfig::sequences, "fingerprint sequences"),
      field("batch", &RunConfig::batch, "training batch size"),
      field("prompt", &RunConfig::prompt, "prompt token ids, comma separated"),
      field("accuracies", &RunConfig::accuracies, "per-position accuracies, comma separated"),
      field("length", &RunConfig::length, "sequence length L"),
      field("bytes", &RunConfig::bytes, "bytes per element b"),
      field("tol", &RunConfig::tol, "L1 tolerance"),
      field("lambda", &RunConfig::lambda, "noise loss weight"),
      field("lr", &RunConfig::lr, "learning rate"),
      field("steps", &RunConfig::steps, "training or generation steps"),
      field("seed", &RunConfig::seed, "seed (falls back to PRIVERI_SEED)"),
  };
  return table;
}

const Field* find_field(const std::string& name) {
  for (const auto& f : fields()) {
    if (f.flag == name || f.key() == name) return &f;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Helpers

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw ArgumentError(std::string("missing ") + flag);
  return value;
}

void emit(const Json& report, const RunConfig& cfg, std::ostream& out, bool write_out) {
  const std::string text = report.dump(2) + "\n";
  out << text;
  if (write_out && !cfg.out.empty()) io::write_text(cfg.out, text);
}

protocol2::NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "shared") return protocol2::NoiseMode::shared;
  if (s == "per-position") return protocol2::NoiseMode::per_position;
  throw ArgumentError("unknown noise mode '" + s + "'");
}

std::vector<TokenId> resolve_prompt(const RunConfig& cfg, const ModelParams& params, Prng& rng) {
  const std::size_t vocab = params.config.vocab_size;
  if (!cfg.prompt.empty()) {
    for (auto t : cfg.prompt) {
      if (t >= vocab) throw ArgumentError("prompt token " + std::to_string(t) + " out of range");
    }
    return {cfg.prompt.begin(), cfg.prompt.end()};
  }
  if (cfg.n == 0) throw ArgumentError("--n must be >= 1");
  std::vector<TokenId> prompt(cfg.n);
  for (auto& t : prompt) t = static_cast<TokenId>(rng.uniform_below(vocab));
  return prompt;
}

void check_cache_owner(const protocol1::SentinelCache& cache, const io::Digest& model_hash) {
  if (cache.model_hash() != model_hash) {
    throw IntegrityError("cache was generated for a different model");
  }
}

privacy::ProviderStrategy provider_strategy(const RunConfig& cfg, const ModelParams& params) {
  using privacy::ProviderStrategy;
  switch (privacy::parse_strategy(cfg.strategy)) {
    case privacy::StrategyKind::honest: return ProviderStrategy::honest();
    case privacy::StrategyKind::substitute_model:
      return ProviderStrategy::substitute_model(
          std::make_shared<const ModelParams>(harness::make_substitute(params, cfg.substitute)),
          cfg.substitute);
    case privacy::StrategyKind::position_guess: return ProviderStrategy::position_guess();
    case privacy::StrategyKind::cache_guess: return ProviderStrategy::cache_guess();
    case privacy::StrategyKind::subset_drop: return ProviderStrategy::subset_drop(cfg.drop);
    case privacy::StrategyKind::random_outputs: return ProviderStrategy::random_outputs();
    case privacy::StrategyKind::sampling_tamper: return ProviderStrategy::sampling_tamper();
  }
  throw ArgumentError("unknown strategy");
}

model::Corpus default_corpus(const ModelParams& params) {
  model::MarkovCorpusConfig cc;
  cc.vocab_size = params.config.vocab_size;
  return model::make_markov_corpus(cc);
}

Json optional_step(const std::optional<std::size_t>& step) {
  return step ? Json(*step) : Json(nullptr);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_model(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  require(cfg.out, "--out");
  const auto params = model::init_params(model::ModelConfig{}, cfg.resolved_seed());
  model::save_model(cfg.out, params);
  emit({{"model", cfg.out}, {"model_hash", params.hash_hex()}}, cfg, out, false);
  return kExitOk;
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto base = model::load_model(require(cfg.model, "--model"));
  require(cfg.out, "--out");
  const auto corpus = default_corpus(base);
  model::PretrainConfig pc;
  pc.steps = cfg.steps_or(pc.steps);
  pc.batch = cfg.batch;
  pc.lr = cfg.lr_or(pc.lr);
  pc.seed = cfg.resolved_seed();
  const double before = model::mean_log_loss(base, corpus.heldout);
  const auto trained = model::pretrain(base, corpus.train, pc);
  const double after = model::mean_log_loss(trained, corpus.heldout);
  model::save_model(cfg.out, trained);
  emit({{"model", cfg.out},
        {"model_hash", trained.hash_hex()},
        {"steps", pc.steps},
        {"lr", pc.lr},
        {"initial_heldout_log_loss", before},
        {"heldout_log_loss", after},
        {"uniform_log_loss", std::log(static_cast<double>(base.config.vocab_size))}},
       cfg, out, false);
  return kExitOk;
}

int cmd_gen_cache(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto params = model::load_model(require(cfg.model, "--model"));
  require(cfg.out, "--out");
  Prng rng(cfg.resolved_seed());
  const auto cache = protocol1::generate_cache(params, cfg.cache_size, cfg.k, rng);
  protocol1::save_cache(cfg.out, cache);
  emit({{"cache", cfg.out},
        {"entries", cache.size()},
        {"k", cache.k()},
        {"vocab_size", cache.vocab_size()},
        {"model_hash", io::to_hex(cache.model_hash())}},
       cfg, out, false);
  return kExitOk;
}

int cmd_request(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto params = model::load_model(require(cfg.model, "--model"));
  const auto cache = protocol1::load_cache(require(cfg.cache, "--cache"));
  require(cfg.out, "--out");
  check_cache_owner(cache, params.hash);
  if (cfg.protocol != 1 && cfg.protocol != 2) throw ArgumentError("--protocol must be 1 or 2");

  Prng rng(cfg.resolved_seed());
  const auto prompt = resolve_prompt(cfg, params, rng);
  const auto& sentinels = cache.draw(rng);
  RequestRecord record;
  record.protocol = cfg.protocol;
  record.model_hash = params.hash;
  if (cfg.protocol == 1) {
    record.request.base = protocol1::build_request(prompt, sentinels, rng);
  } else {
    const auto modules = protocol2::load_noise_modules(require(cfg.noise_params, "--noise-params"));
    protocol2::check_base(modules, params);
    record.request = protocol2::build_noisy_request(params, prompt, sentinels, modules.noise,
                                                    modules.embedder, rng,
                                                    parse_noise_mode(cfg.noise_mode));
  }
  save_request(cfg.out, record);
  emit({{"request", cfg.out},
        {"protocol", cfg.protocol},
        {"length", record.request.base.length()},
        {"prompt_length", prompt.size()},
        {"k", sentinels.size()}},
       cfg, out, false);
  return kExitOk;
}

int cmd_respond(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto record = load_request(require(cfg.request, "--request"));
  const auto params = model::load_model(require(cfg.model, "--model"));
  require(cfg.out, "--out");
  std::unique_ptr<protocol1::SentinelCache> cache;
  if (!cfg.cache.empty()) {
    cache = std::make_unique<protocol1::SentinelCache>(protocol1::load_cache(cfg.cache));
  }
  const auto strategy = provider_strategy(cfg, params);
  const auto view = privacy::make_view(record.request.base.length(),
                                       record.request.base.sentinel_positions.size(),
                                       privacy::parse_mode(cfg.mode), cache.get(), &params);
  if (strategy.kind == privacy::StrategyKind::cache_guess && !cache) {
    throw ArgumentError("cache-guess needs --cache");
  }
  Prng rng(cfg.resolved_seed());
  privacy::ProviderOptions options;
  options.want_hidden = record.protocol == 2;
  const auto resp = privacy::run_provider(strategy, record.seal(), view, params, rng, options);

  ResponseRecord response;
  response.request_digest = request_digest(record);
  response.label = resp.label;
  response.logits = resp.logits;
  response.hidden = resp.hidden;
  save_response(cfg.out, response);
  emit({{"response", cfg.out}, {"label", resp.label}, {"rows", resp.logits.rows()}}, cfg, out,
       false);
  return kExitOk;
}

int cmd_verify(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto record = load_request(require(cfg.request, "--request"));
  const auto response = load_response(require(cfg.response, "--response"));
  const auto cache = protocol1::load_cache(require(cfg.cache, "--cache"));
  if (response.request_digest != request_digest(record)) {
    throw IntegrityError("response answers a different request");
  }
  check_cache_owner(cache, record.model_hash);

  Json report;
  report["protocol"] = record.protocol;
  bool verified = false;
  if (record.protocol == 1) {
    const auto res = protocol1::verify(response.logits, record.request.base, cache, cfg.tol);
    verified = res.verified;
    report["per_sentinel_l1"] = res.per_sentinel_l1;
  } else {
    const auto params = model::load_model(require(cfg.model, "--model"));
    const auto modules = protocol2::load_noise_modules(require(cfg.noise_params, "--noise-params"));
    if (response.hidden.empty()) throw FormatError("response record has no hidden states");
    const auto res =
        protocol2::verify_noisy(response.hidden, record.request, cache, modules, params, cfg.tol);
    verified = res.verified;
    report["per_sentinel_l1"] = res.sentinel_check.per_sentinel_l1;
    report["sentinels_verified"] = res.sentinel_check.verified;
    report["noise_positions"] = res.noise_matches.size();
    report["noise_matches"] = std::count(res.noise_matches.begin(), res.noise_matches.end(), true);
  }
  report["tolerance"] = cfg.tol;
  report["verified"] = verified;
  emit(report, cfg, out, true);
  return verified ? kExitOk : kExitRejected;
}

int cmd_generate(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto params = model::load_model(require(cfg.model, "--model"));
  const auto cache = protocol1::load_cache(require(cfg.cache, "--cache"));
  check_cache_owner(cache, params.hash);
  const std::size_t steps = cfg.steps_or(8);
  if (steps == 0) throw ArgumentError("--steps must be >= 1");

  Prng rng(cfg.resolved_seed());
  const auto prompt = resolve_prompt(cfg, params, rng);
  const auto schedule = protocol1::pregenerate_schedule(prompt.size(), cache.k(), steps, cache, rng);
  Prng provider_rng = rng.fork();
  const auto strategy = provider_strategy(cfg, params);
  const auto gen = privacy::run_generation(strategy, prompt, schedule, steps,
                                           privacy::parse_mode(cfg.mode), cache, params,
                                           provider_rng);

  const auto transcript = protocol1::verify_transcript(gen.step_logits, schedule, cache, cfg.tol);
  std::vector<numerics::Tensor> rows;
  for (std::size_t s = 1; s <= gen.step_logits.size(); ++s) {
    const auto row = gen.step_logits[s - 1].row(schedule.last_original_row(s));
    rows.push_back(numerics::Tensor::vector({row.begin(), row.end()}));
  }
  const auto sampling = protocol1::verify_greedy_sampling(rows, gen.claimed_tokens);
  const auto plain = model::generate_greedy(params, prompt, steps);
  const bool verified = transcript.verified && sampling.verified;

  emit({{"prompt", prompt},
        {"steps", steps},
        {"emitted", gen.claimed_tokens},
        {"matches_plain_greedy", plain.emitted == gen.claimed_tokens},
        {"transcript_verified", transcript.verified},
        {"transcript_first_failure", optional_step(transcript.first_failure)},
        {"sampling_verified", sampling.verified},
        {"sampling_first_failure", optional_step(sampling.first_failure)},
        {"verified", verified}},
       cfg, out, true);
  return verified ? kExitOk : kExitRejected;
}

int cmd_train_noise(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto base = model::load_model(require(cfg.model, "--model"));
  require(cfg.out, "--out");
  protocol2::TrainConfig tc;
  tc.lambda = cfg.lambda;
  tc.lr = cfg.lr_or(tc.lr);
  tc.steps = cfg.steps_or(tc.steps);
  tc.batch = cfg.batch;
  tc.seed = cfg.resolved_seed();
  const auto corpus = default_corpus(base);
  protocol2::TrainMetrics metrics;
  const auto modules = protocol2::train_modules(
      base, protocol2::init_modules(base, protocol2::NoiseSet{cfg.noise_set}, tc.seed), corpus.train,
      corpus.heldout, tc, &metrics);
  protocol2::save_noise_modules(cfg.out, modules);
  emit({{"noise_params", cfg.out},
        {"base_model_hash", io::to_hex(modules.base_model_hash)},
        {"noise_set", modules.noise.size},
        {"lambda", tc.lambda},
        {"lr", tc.lr},
        {"steps", tc.steps},
        {"heldout_noise_accuracy", metrics.heldout_noise_accuracy},
        {"heldout_log_loss", metrics.heldout_log_loss},
        {"base_log_loss", metrics.base_log_loss},
        {"log_loss_ratio", metrics.heldout_log_loss / metrics.base_log_loss},
        {"final_train_loss", metrics.final_train_loss}},
       cfg, out, false);
  return kExitOk;
}

int cmd_attack(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  harness::ExperimentSpec spec;
  spec.protocol = cfg.protocol;
  spec.strategy = privacy::parse_strategy(cfg.strategy);
  spec.drop = cfg.drop;
  spec.substitute = cfg.substitute;
  spec.mode = privacy::parse_mode(cfg.mode);
  spec.n = cfg.n;
  spec.k = cfg.k;
  spec.cache_size = cfg.cache_size;
  spec.noise_set = cfg.noise_set;
  spec.noise_mode = parse_noise_mode(cfg.noise_mode);
  spec.steps = cfg.steps_or(1);
  spec.trials = cfg.trials;
  spec.master_seed = cfg.resolved_seed();
  spec.tol = cfg.tol;
  spec.workers = cfg.workers;
  spec.validate();

  harness::ExperimentContext ctx;
  if (!cfg.model.empty()) ctx.model = std::make_shared<const ModelParams>(model::load_model(cfg.model));
  if (!cfg.cache.empty()) {
    auto cache = protocol1::load_cache(cfg.cache);
    if (ctx.model) check_cache_owner(cache, ctx.model->hash);
    spec.cache_size = cache.size();
    ctx.cache = std::make_shared<const protocol1::SentinelCache>(std::move(cache));
  }
  if (!cfg.noise_params.empty()) {
    auto modules = protocol2::load_noise_modules(cfg.noise_params);
    spec.noise_set = modules.noise.size;
    ctx.modules = std::make_shared<const protocol2::NoiseModules>(std::move(modules));
  }
  if (ctx.modules && ctx.model) protocol2::check_base(*ctx.modules, *ctx.model);
  const auto report = harness::run_attack_experiment(spec, ctx);
  emit(harness::to_json(report), cfg, out, true);
  return kExitOk;
}

int cmd_bounds(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  harness::AttackParams p;
  p.n = cfg.n;
  p.k = cfg.k;
  p.cache_size = cfg.cache_size;
  p.noise_set = cfg.noise_set;
  p.drop = cfg.drop;
  p.accuracies = cfg.accuracies;
  auto rational = [&](harness::AnalyticKind kind) {
    const auto f = harness::analytic_fraction(kind, p);
    return Json{{"fraction", f.str()}, {"value", f.value()}};
  };

  Json report;
  if (cfg.kind == "comm-overhead") {
    report["kind"] = cfg.kind;
    report["length"] = cfg.length;
    report["bytes_per_element"] = cfg.bytes;
    report["bytes"] = harness::comm_overhead_bytes(cfg.length, cfg.bytes);
  } else if (cfg.kind == "completeness") {
    report["kind"] = cfg.kind;
    report["accuracies"] = cfg.accuracies;
    report["value"] = harness::analytic_attack_probability(harness::AnalyticKind::completeness, p);
  } else if (!cfg.kind.empty()) {
    const auto kind = harness::parse_analytic_kind(cfg.kind);
    report["kind"] = cfg.kind;
    report["n"] = p.n;
    report["k"] = p.k;
    if (kind == harness::AnalyticKind::cache_guess) report["cache_size"] = p.cache_size;
    if (kind == harness::AnalyticKind::noise_per_position) report["noise_set"] = p.noise_set;
    if (kind == harness::AnalyticKind::subset_drop) report["drop"] = p.drop;
    report.update(rational(kind));
  } else {
    report["n"] = p.n;
    report["k"] = p.k;
    report["cache_size"] = p.cache_size;
    report["noise_set"] = p.noise_set;
    report["cache_guess"] = rational(harness::AnalyticKind::cache_guess);
    report["position_guess"] = rational(harness::AnalyticKind::position_guess);
    report["subset_leave_one_out"] = rational(harness::AnalyticKind::subset_leave_one_out);
    report["noise_per_position"] = rational(harness::AnalyticKind::noise_per_position);
    if (!p.accuracies.empty()) {
      report["completeness"] =
          harness::analytic_attack_probability(harness::AnalyticKind::completeness, p);
    }
    report["comm_overhead_bytes"] = {{"length", cfg.length},
                                     {"bytes_per_element", cfg.bytes},
                                     {"bytes", harness::comm_overhead_bytes(cfg.length, cfg.bytes)}};
  }
  emit(report, cfg, out, true);
  return kExitOk;
}

int cmd_fingerprint_study(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const std::uint64_t seed = cfg.resolved_seed();
  const ModelParams base = cfg.model.empty() ? model::init_params(model::ModelConfig{}, 1)
                                             : model::load_model(cfg.model);
  const auto corpus = default_corpus(base);
  const std::span<const model::Sequence> batch(corpus.train.data(),
                                               std::min(cfg.batch, corpus.train.size()));
  const auto perturbations = harness::standard_perturbations(base, batch, seed + 1);
  Prng rng(seed);
  const auto table = harness::fingerprint_study(base, perturbations, cfg.sequences, cfg.k, rng);
  emit(harness::to_json(table), cfg, out, true);
  return kExitOk;
}

struct Command {
  const char* name;
  const char* help;
  std::vector<std::string> flags;
  int (*run)(const RunConfig&, std::ostream&, std::ostream&);
};

const std::vector<Command>& commands() {
  static const std::vector<Command> table = {
      {"gen-model", "initialise a model", {"seed", "out"}, cmd_gen_model},
      {"pretrain", "pretrain a model on the seeded Markov corpus",
       {"model", "steps", "lr", "batch", "seed", "out"}, cmd_pretrain},
      {"gen-cache", "generate a sentinel cache",
       {"model", "cache-size", "k", "seed", "out"}, cmd_gen_cache},
      {"request", "build a sentinel-augmented request record",
       {"model", "cache", "noise-params", "protocol", "n", "prompt", "noise-mode", "seed", "out"},
       cmd_request},
      {"respond", "run a provider strategy on a request record",
       {"request", "model", "cache", "strategy", "mode", "drop", "substitute", "seed", "out"},
       cmd_respond},
      {"verify", "verify a response record",
       {"request", "response", "model", "cache", "noise-params", "tol", "out"}, cmd_verify},
      {"generate", "non-interactive greedy generation with transcript and sampling checks",
       {"model", "cache", "n", "prompt", "steps", "strategy", "mode", "substitute", "seed", "tol",
        "out"},
       cmd_generate},
      {"train-noise", "train the noise embedder and predictor",
       {"model", "noise-set", "lambda", "lr", "steps", "batch", "seed", "out"}, cmd_train_noise},
      {"attack", "run a Monte Carlo attack experiment",
       {"model", "cache", "noise-params", "protocol", "mode", "strategy", "drop", "substitute",
        "noise-mode", "n", "k", "cache-size", "noise-set", "steps", "trials", "seed", "tol",
        "workers", "out"},
       cmd_attack},
      {"bounds", "analytic attack probabilities and communication size",
       {"kind", "n", "k", "cache-size", "noise-set", "drop", "accuracies", "length", "bytes",
        "out"},
       cmd_bounds},
      {"fingerprint-study", "fingerprint distances under model perturbations",
       {"model", "sequences", "k", "batch", "seed", "out"}, cmd_fingerprint_study},
  };
  return table;
}

}  // namespace

RunConfig config_from_json(const Json& j, std::ostream* warnings) {
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    const Field* f = find_field(key);
    if (f == nullptr || f->key() != key) {
      if (warnings) *warnings << "warning: ignoring unknown config key '" << key << "'\n";
      continue;
    }
    try {
      f->read(cfg, value);
    } catch (const Json::exception& e) {
      throw FormatError("config key '" + key + "': " + e.what());
    }
    cfg.given.insert(key);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, std::ostream* warnings) {
  const std::string text = io::read_text(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, warnings);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Verified private inference over a tiny deterministic transformer", "priveri"};
  app.require_subcommand(1, 1);

  RunConfig flags;
  std::string config_path;
  std::map<std::string, std::vector<std::pair<const Field*, CLI::Option*>>> registered;
  for (const auto& cmd : commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "JSON config; flags override its values");
    for (const auto& name : cmd.flags) {
      const Field* f = find_field(name);
      registered[cmd.name].emplace_back(f, f->add(*sub, flags));
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  const Command* chosen = nullptr;
  for (const auto& cmd : commands()) {
    if (app.got_subcommand(cmd.name)) chosen = &cmd;
  }
  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path, &err);
    for (const auto& [f, opt] : registered[chosen->name]) {
      if (opt->count() == 0) continue;
      f->copy(cfg, flags);
      cfg.given.insert(f->key());
    }
    return chosen->run(cfg, out, err);
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return kExitRejected;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace priveri::cli

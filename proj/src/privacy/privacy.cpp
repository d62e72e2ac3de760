#include "priveri/privacy/privacy.hpp"

#include <algorithm>
#include <limits>

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/sampling.hpp"

namespace priveri::privacy {

namespace nk = numerics;

namespace {

struct StrategyName {
  StrategyKind kind;
  const char* name;
};

constexpr StrategyName kStrategyNames[] = {
    {StrategyKind::honest, "honest"},
    {StrategyKind::substitute_model, "substitute-model"},
    {StrategyKind::position_guess, "position-guess"},
    {StrategyKind::cache_guess, "cache-guess"},
    {StrategyKind::subset_drop, "subset-drop"},
    {StrategyKind::random_outputs, "random-outputs"},
    {StrategyKind::sampling_tamper, "sampling-tamper"},
};

void fill_row_noise(Tensor& t, std::size_t row, Prng& rng) {
  for (double& v : t.row(row)) v = rng.normal();
}

Tensor nan_matrix(std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::zeros(rows, cols);
  std::fill(t.values().begin(), t.values().end(), std::numeric_limits<double>::quiet_NaN());
  return t;
}

// Rows `slots` (0-based) of the sealed input, as a standalone input.
model::ModelInput select_input(const model::ModelInput& input, std::span<const std::size_t> rows) {
  if (const auto* tokens = std::get_if<std::vector<TokenId>>(&input)) {
    std::vector<TokenId> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back((*tokens)[r]);
    return out;
  }
  return nk::gather_rows(std::get<Tensor>(input), rows);
}

struct Outputs {
  Tensor logits;
  Tensor hidden;
};

Outputs empty_outputs(std::size_t length, const ModelParams& params, bool want_hidden) {
  Outputs o;
  o.logits = nan_matrix(length, params.config.vocab_size);
  if (want_hidden) o.hidden = nan_matrix(length, params.config.hidden_dim);
  return o;
}

void fill_noise(Outputs& o, std::size_t row, Prng& rng, bool want_hidden) {
  fill_row_noise(o.logits, row, rng);
  if (want_hidden) fill_row_noise(o.hidden, row, rng);
}

void copy_row(Tensor& dst, std::size_t dst_row, const Tensor& src, std::size_t src_row) {
  std::copy_n(src.row(src_row).begin(), src.cols(), dst.row(dst_row).begin());
}

model::ForwardOutput evaluate(const ModelParams& params, const model::ModelInput& input,
                              const Tensor& mask, std::span<const model::PositionId> ids,
                              const std::optional<std::vector<std::size_t>>& rows) {
  if (rows) return model::forward_rows(params, input, mask, ids, *rows);
  return model::forward(params, input, mask, ids);
}

Outputs run_full(const ModelParams& params, const SealedRequest& request,
                 const ProviderOptions& options) {
  auto out = evaluate(params, request.input, request.mask, request.position_ids, options.rows_read);
  Outputs o{std::move(out.logits), {}};
  if (options.want_hidden) o.hidden = std::move(out.hidden);
  return o;
}

}  // namespace

std::string to_string(PrivacyMode mode) {
  return mode == PrivacyMode::structural ? "structural" : "opaque";
}

PrivacyMode parse_mode(const std::string& name) {
  if (name == "structural") return PrivacyMode::structural;
  if (name == "opaque") return PrivacyMode::opaque;
  throw ArgumentError("unknown privacy mode '" + name + "' (structural|opaque)");
}

std::string to_string(StrategyKind kind) {
  for (const auto& s : kStrategyNames) {
    if (s.kind == kind) return s.name;
  }
  return "unknown";
}

StrategyKind parse_strategy(const std::string& name) {
  for (const auto& s : kStrategyNames) {
    if (name == s.name) return s.kind;
  }
  throw ArgumentError("unknown strategy '" + name + "'");
}

ProviderStrategy ProviderStrategy::substitute_model(std::shared_ptr<const ModelParams> params,
                                                    std::string label) {
  if (!params) throw ArgumentError("substitute-model strategy needs a model");
  ProviderStrategy s;
  s.kind = StrategyKind::substitute_model;
  s.substitute = std::move(params);
  s.substitute_label = std::move(label);
  return s;
}

ProviderStrategy ProviderStrategy::subset_drop(std::size_t k) {
  if (k < 1) throw ArgumentError("subset-drop needs k >= 1");
  ProviderStrategy s;
  s.kind = StrategyKind::subset_drop;
  s.drop = k;
  return s;
}

std::string ProviderStrategy::label() const {
  std::string out = to_string(kind);
  if (kind == StrategyKind::subset_drop) out += "(" + std::to_string(drop) + ")";
  if (kind == StrategyKind::substitute_model && !substitute_label.empty()) {
    out += "(" + substitute_label + ")";
  }
  return out;
}

std::vector<StrategyKind> available_strategies(PrivacyMode mode) {
  std::vector<StrategyKind> out;
  for (const auto& s : kStrategyNames) {
    if (is_available(s.kind, mode)) out.push_back(s.kind);
  }
  return out;
}

bool is_available(StrategyKind kind, PrivacyMode mode) {
  if (mode == PrivacyMode::structural) return true;
  return kind != StrategyKind::subset_drop && kind != StrategyKind::position_guess;
}

SealedRequest seal(const protocol1::AugmentedRequest& request) {
  return {request.tokens, request.mask, request.position_ids};
}

SealedRequest seal(const protocol2::NoisyRequest& request) {
  return {request.embeddings, request.base.mask, request.base.position_ids};
}

AdversaryView make_view(std::size_t length, std::size_t sentinel_count, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model) {
  AdversaryView v;
  v.length = length;
  v.mode = mode;
  v.sentinel_count = sentinel_count;
  if (mode == PrivacyMode::structural) {
    v.slots.resize(length);
    for (std::size_t i = 0; i < length; ++i) v.slots[i] = i + 1;
  }
  v.cache = cache;
  v.model = model;
  return v;
}

AdversaryView make_view(const protocol1::AugmentedRequest& request, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model) {
  return make_view(request.length(), request.sentinel_positions.size(), mode, cache, model);
}

AdversaryView make_view(const protocol2::NoisyRequest& request, PrivacyMode mode,
                        const protocol1::SentinelCache* cache, const ModelParams* model) {
  return make_view(request.base, mode, cache, model);
}

ProviderResponse run_provider(const ProviderStrategy& strategy, const SealedRequest& request,
                              const AdversaryView& view, const ModelParams& params, Prng& rng,
                              const ProviderOptions& options) {
  if (!is_available(strategy.kind, view.mode)) {
    throw CapabilityError(strategy.label() + " needs a structure-preserving privacy mechanism, not " +
                          to_string(view.mode) + " mode");
  }
  const std::size_t length = view.length;
  if (request.length() != length) throw ArgumentError("view length does not match the request");
  const bool want_hidden = options.want_hidden;

  ProviderResponse resp;
  resp.label = strategy.label();
  Outputs o;

  switch (strategy.kind) {
    case StrategyKind::honest:
    case StrategyKind::sampling_tamper:
      o = run_full(params, request, options);
      resp.rows_computed = length;
      break;

    case StrategyKind::substitute_model:
      o = run_full(*strategy.substitute, request, options);
      resp.rows_computed = length;
      break;

    case StrategyKind::position_guess: {
      const std::size_t k = view.sentinel_count;
      const auto guess = nk::sample_without_replacement(length, k, rng);
      resp.decisions = guess;
      std::vector<std::size_t> rows;
      for (std::size_t p : guess) rows.push_back(p - 1);
      const auto sub = model::forward(params, select_input(request.input, rows),
                                      model::causal_mask(k), model::sequential_positions(k));
      resp.rows_computed = k;
      o = empty_outputs(length, params, want_hidden);
      std::size_t g = 0;
      for (std::size_t r = 0; r < length; ++r) {
        if (g < rows.size() && rows[g] == r) {
          copy_row(o.logits, r, sub.logits, g);
          if (want_hidden) copy_row(o.hidden, r, sub.hidden, g);
          ++g;
        } else {
          fill_noise(o, r, rng, want_hidden);
        }
      }
      break;
    }

    case StrategyKind::cache_guess: {
      if (want_hidden) {
        throw CapabilityError("cache-guess pastes cached logits and cannot produce hidden states");
      }
      if (view.cache == nullptr || view.cache->size() == 0) {
        throw ArgumentError("cache-guess needs the public cache in the view");
      }
      const auto& cache = *view.cache;
      const std::size_t entry = rng.uniform_below(cache.size());
      const auto slots = nk::sample_without_replacement(length, cache.k(), rng);
      resp.decisions.push_back(entry);
      resp.decisions.insert(resp.decisions.end(), slots.begin(), slots.end());
      const Tensor& pasted = cache.entries()[entry].logits;
      o = empty_outputs(length, params, false);
      std::size_t g = 0;
      for (std::size_t r = 0; r < length; ++r) {
        if (g < slots.size() && slots[g] == r + 1) {
          copy_row(o.logits, r, pasted, g);
          ++g;
        } else {
          fill_row_noise(o.logits, r, rng);
        }
      }
      break;
    }

    case StrategyKind::subset_drop: {
      if (strategy.drop >= length) {
        throw ArgumentError("subset-drop cannot drop " + std::to_string(strategy.drop) + " of " +
                            std::to_string(length) + " slots");
      }
      const auto dropped = nk::sample_without_replacement(length, strategy.drop, rng);
      resp.decisions = dropped;
      std::vector<char> is_dropped(length, 0);
      for (std::size_t p : dropped) is_dropped[p - 1] = 1;
      std::vector<std::size_t> kept;
      for (std::size_t r = 0; r < length; ++r) {
        if (!is_dropped[r]) kept.push_back(r);
      }
      Tensor sub_mask = Tensor::zeros(kept.size(), kept.size());
      std::vector<model::PositionId> sub_ids(kept.size());
      std::vector<char> orphan(kept.size(), 0);
      for (std::size_t a = 0; a < kept.size(); ++a) {
        bool any = false;
        for (std::size_t b = 0; b < kept.size(); ++b) {
          sub_mask(a, b) = request.mask(kept[a], kept[b]);
          any = any || sub_mask(a, b) != 0.0;
        }
        // A kept row whose every attention target was dropped has nothing to
        // compute from; it is fabricated like a dropped row.
        if (!any) {
          orphan[a] = 1;
          sub_mask(a, a) = 1.0;
        }
        sub_ids[a] = request.position_ids[kept[a]];
      }
      std::optional<std::vector<std::size_t>> sub_rows;
      if (options.rows_read) {
        std::vector<char> read(length, 0);
        for (std::size_t r : *options.rows_read) read.at(r) = 1;
        std::vector<std::size_t> local;
        for (std::size_t a = 0; a < kept.size(); ++a) {
          if (read[kept[a]] && !orphan[a]) local.push_back(a);
        }
        sub_rows = std::move(local);
      }
      o = empty_outputs(length, params, want_hidden);
      resp.rows_computed = kept.size() - static_cast<std::size_t>(std::count(orphan.begin(), orphan.end(), 1));
      if (!sub_rows || !sub_rows->empty()) {
        const auto sub = evaluate(params, select_input(request.input, kept), sub_mask, sub_ids, sub_rows);
        for (std::size_t a = 0; a < kept.size(); ++a) {
          if (orphan[a]) continue;
          copy_row(o.logits, kept[a], sub.logits, a);
          if (want_hidden) copy_row(o.hidden, kept[a], sub.hidden, a);
        }
      }
      for (std::size_t r = 0; r < length; ++r) {
        if (is_dropped[r]) fill_noise(o, r, rng, want_hidden);
      }
      for (std::size_t a = 0; a < kept.size(); ++a) {
        if (orphan[a]) fill_noise(o, kept[a], rng, want_hidden);
      }
      break;
    }

    case StrategyKind::random_outputs:
      o = empty_outputs(length, params, want_hidden);
      for (std::size_t r = 0; r < length; ++r) fill_noise(o, r, rng, want_hidden);
      break;
  }

  resp.logits = std::move(o.logits);
  resp.hidden = std::move(o.hidden);
  return resp;
}

GenerationResponse run_generation(const ProviderStrategy& strategy,
                                  std::span<const TokenId> prompt,
                                  const protocol1::PositionSchedule& schedule,
                                  std::size_t n_steps, PrivacyMode mode,
                                  const protocol1::SentinelCache& cache, const ModelParams& params,
                                  Prng& rng, bool read_all_rows) {
  if (n_steps < 1 || n_steps > schedule.steps()) {
    throw ArgumentError("run_generation: n_steps must be in [1, schedule length]");
  }
  GenerationResponse out;
  if (strategy.kind == StrategyKind::sampling_tamper) {
    out.tampered_step = static_cast<std::size_t>(rng.uniform_below(n_steps)) + 1;
    out.decisions.push_back(*out.tampered_step);
  }
  std::vector<TokenId> tokens(prompt.begin(), prompt.end());
  for (std::size_t step = 1; step <= n_steps; ++step) {
    const auto req = protocol1::step_request(schedule, step, tokens);
    const auto view = make_view(req, mode, &cache, &params);
    const std::size_t next_row = schedule.last_original_row(step);
    ProviderOptions options;
    if (!read_all_rows) {
      std::vector<std::size_t> rows;
      for (std::size_t p : req.sentinel_positions) rows.push_back(p - 1);
      rows.push_back(next_row);
      std::sort(rows.begin(), rows.end());
      options.rows_read = std::move(rows);
    }
    auto resp = run_provider(strategy, seal(req), view, params, rng, options);
    out.decisions.insert(out.decisions.end(), resp.decisions.begin(), resp.decisions.end());
    const auto row = resp.logits.row(next_row);
    auto token = static_cast<TokenId>(nk::argmax(row));
    if (out.tampered_step && *out.tampered_step == step) {
      token = static_cast<TokenId>(nk::second_argmax(row));
    }
    out.claimed_tokens.push_back(token);
    tokens.push_back(token);
    out.step_logits.push_back(std::move(resp.logits));
  }
  return out;
}

}  // namespace priveri::privacy

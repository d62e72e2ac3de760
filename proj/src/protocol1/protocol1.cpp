#include "priveri/protocol1/protocol1.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "priveri/error.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/sampling.hpp"

namespace priveri::protocol1 {

namespace {

constexpr char kCacheMagic[8] = {'P', 'V', 'C', 'A', 'C', 'H', 'E', '1'};

void check_positions(std::span<const std::size_t> positions, std::size_t length) {
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 1 || positions[i] > length) {
      throw ArgumentError("sentinel position " + std::to_string(positions[i]) + " outside [1, " +
                          std::to_string(length) + "]");
    }
    if (i > 0 && positions[i] <= positions[i - 1]) {
      throw ArgumentError("sentinel positions must be strictly ascending");
    }
  }
}

// Saturating V^K, enough to compare against a requested cache size.
std::size_t capped_power(std::size_t base, std::size_t exp, std::size_t cap) {
  std::size_t out = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    if (out > cap / base) return cap + 1;
    out *= base;
  }
  return out;
}

}  // namespace

SentinelCache::SentinelCache(io::Digest model_hash, std::size_t k, std::size_t vocab_size)
    : model_hash_(model_hash), k_(k), vocab_size_(vocab_size) {
  if (k == 0) throw ArgumentError("sentinel cache: K must be >= 1");
}

void SentinelCache::insert(SentinelSequence sequence, Tensor logits) {
  if (sequence.size() != k_) throw ArgumentError("sentinel cache: sequence length != K");
  if (logits.rank() != 2 || logits.rows() != k_ || logits.cols() != vocab_size_) {
    throw DimensionError("sentinel cache: entry logits must be K x V, got " +
                         numerics::shape_string(logits.shape()));
  }
  if (index_.count(sequence) != 0) throw ArgumentError("sentinel cache: duplicate sequence");
  index_.emplace(sequence, entries_.size());
  entries_.push_back({std::move(sequence), std::move(logits)});
}

const Tensor* SentinelCache::find(const SentinelSequence& sequence) const {
  const auto it = index_.find(sequence);
  return it == index_.end() ? nullptr : &entries_[it->second].logits;
}

const Tensor& SentinelCache::at(const SentinelSequence& sequence) const {
  const Tensor* t = find(sequence);
  if (t == nullptr) throw CacheMissError("sentinel sequence not in cache");
  return *t;
}

const SentinelSequence& SentinelCache::draw(Prng& rng) const {
  if (entries_.empty()) throw ArgumentError("sentinel cache is empty");
  return entries_[rng.uniform_below(entries_.size())].sequence;
}

Tensor sentinel_logits(const ModelParams& params, const SentinelSequence& sequence) {
  const std::size_t k = sequence.size();
  return model::forward(params, sequence, model::causal_mask(k), model::sequential_positions(k))
      .logits;
}

SentinelCache generate_cache(const ModelParams& params, std::size_t cache_size, std::size_t k,
                             Prng& rng) {
  if (cache_size < 1 || k < 1) throw ArgumentError("generate_cache: |C| and K must be >= 1");
  const std::size_t v = params.config.vocab_size;
  if (capped_power(v, k, cache_size) < cache_size) {
    throw ArgumentError("generate_cache: |C| = " + std::to_string(cache_size) +
                        " exceeds the V^K distinct sentinel sequences");
  }
  SentinelCache cache(params.hash, k, v);
  while (cache.size() < cache_size) {
    SentinelSequence seq(k);
    for (auto& t : seq) t = static_cast<TokenId>(rng.uniform_below(v));
    if (cache.find(seq) != nullptr) continue;
    Tensor logits = sentinel_logits(params, seq);
    cache.insert(std::move(seq), std::move(logits));
  }
  return cache;
}

std::vector<std::uint8_t> encode_cache(const SentinelCache& cache) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kCacheMagic, sizeof kCacheMagic));
  w.put_bytes(cache.model_hash());
  w.put_u32(static_cast<std::uint32_t>(cache.k()));
  w.put_u32(static_cast<std::uint32_t>(cache.vocab_size()));
  w.put_u64(cache.size());
  for (const auto& e : cache.entries()) {
    for (TokenId t : e.sequence) w.put_u32(t);
    for (double x : e.logits.values()) w.put_f64(x);
  }
  return w.take();
}

SentinelCache decode_cache(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  const auto magic = r.get_bytes(sizeof kCacheMagic);
  if (std::memcmp(magic.data(), kCacheMagic, sizeof kCacheMagic) != 0) {
    throw FormatError("cache file: bad magic");
  }
  io::Digest hash{};
  const auto h = r.get_bytes(hash.size());
  std::copy(h.begin(), h.end(), hash.begin());
  const std::size_t k = r.get_u32();
  const std::size_t v = r.get_u32();
  const std::uint64_t count = r.get_u64();
  if (k == 0 || v == 0) throw FormatError("cache file: K and V must be positive");
  const std::size_t entry_bytes = k * 4 + k * v * 8;
  if (count > r.remaining() / entry_bytes || count * entry_bytes != r.remaining()) {
    throw FormatError("cache file: length does not match " + std::to_string(count) + " entries");
  }
  SentinelCache cache(hash, k, v);
  for (std::uint64_t e = 0; e < count; ++e) {
    SentinelSequence seq(k);
    for (auto& t : seq) t = r.get_u32();
    Tensor logits = Tensor::zeros(k, v);
    for (double& x : logits.values()) x = r.get_f64();
    if (cache.find(seq) != nullptr) throw IntegrityError("cache file: duplicate sentinel sequence");
    cache.insert(std::move(seq), std::move(logits));
  }
  return cache;
}

void save_cache(const std::filesystem::path& path, const SentinelCache& cache) {
  io::write_file(path, encode_cache(cache));
}

SentinelCache load_cache(const std::filesystem::path& path) {
  return decode_cache(io::read_file(path));
}

void audit_cache(const SentinelCache& cache, const ModelParams& params) {
  if (cache.model_hash() != params.hash) {
    throw IntegrityError("cache was generated for model " + io::to_hex(cache.model_hash()) +
                         ", not " + params.hash_hex());
  }
  if (cache.vocab_size() != params.config.vocab_size) {
    throw IntegrityError("cache vocabulary size does not match the model");
  }
  for (const auto& e : cache.entries()) {
    for (TokenId t : e.sequence) {
      if (t >= params.config.vocab_size) throw IntegrityError("cache entry has out-of-range token");
    }
    if (!sentinel_logits(params, e.sequence).bit_equal(e.logits)) {
      throw IntegrityError("cache entry logits do not match the model");
    }
  }
}

std::vector<std::size_t> AugmentedRequest::original_positions() const {
  std::vector<std::size_t> out;
  out.reserve(prompt_length);
  std::size_t next_sentinel = 0;
  for (std::size_t slot = 1; slot <= length(); ++slot) {
    if (next_sentinel < sentinel_positions.size() && sentinel_positions[next_sentinel] == slot) {
      ++next_sentinel;
    } else {
      out.push_back(slot);
    }
  }
  return out;
}

AugmentedRequest assemble_request(std::span<const TokenId> prompt,
                                  const SentinelSequence& sentinels,
                                  std::span<const std::size_t> positions) {
  const std::size_t n = prompt.size();
  const std::size_t k = sentinels.size();
  if (n == 0) throw ArgumentError("request: prompt must be non-empty");
  if (k == 0) throw ArgumentError("request: sentinel sequence must be non-empty");
  if (positions.size() != k) throw ArgumentError("request: need one position per sentinel");
  const std::size_t length = n + k;
  check_positions(positions, length);

  AugmentedRequest req;
  req.prompt_length = n;
  req.sentinel_sequence = sentinels;
  req.sentinel_positions.assign(positions.begin(), positions.end());
  req.tokens.resize(length);
  req.position_ids.resize(length);

  // is_sentinel[slot] and the rank of each slot within its own block.
  std::vector<char> is_sentinel(length, 0);
  std::vector<std::size_t> rank(length, 0);
  for (std::size_t i = 0; i < k; ++i) is_sentinel[positions[i] - 1] = 1;
  std::size_t s = 0;
  std::size_t o = 0;
  for (std::size_t slot = 0; slot < length; ++slot) {
    if (is_sentinel[slot]) {
      req.tokens[slot] = sentinels[s];
      rank[slot] = s++;
    } else {
      req.tokens[slot] = prompt[o];
      rank[slot] = o++;
    }
    req.position_ids[slot] = static_cast<PositionId>(rank[slot] + 1);
  }

  req.mask = Tensor::zeros(length, length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      if (is_sentinel[i] == is_sentinel[j] && rank[j] <= rank[i]) req.mask(i, j) = 1.0;
    }
  }
  return req;
}

AugmentedRequest build_request(std::span<const TokenId> prompt, const SentinelSequence& sentinels,
                               Prng& rng) {
  if (prompt.empty()) throw ArgumentError("build_request: prompt must be non-empty (N >= 1)");
  if (sentinels.empty()) throw ArgumentError("build_request: K must be >= 1");
  const auto positions =
      numerics::sample_without_replacement(prompt.size() + sentinels.size(), sentinels.size(), rng);
  return assemble_request(prompt, sentinels, positions);
}

VerificationResult verify_sentinel_rows(const Tensor& logits,
                                        std::span<const std::size_t> sentinel_positions,
                                        const SentinelSequence& sentinels,
                                        const SentinelCache& cache, double tol) {
  if (!(tol >= 0.0)) throw ArgumentError("verify: tolerance must be non-negative");
  const Tensor& expected = cache.at(sentinels);
  if (sentinel_positions.size() != cache.k()) {
    throw ArgumentError("verify: sentinel position count does not match cache K");
  }
  if (logits.rank() != 2 || logits.cols() != cache.vocab_size()) {
    throw DimensionError("verify: logits must have V = " + std::to_string(cache.vocab_size()) +
                         " columns, got " + numerics::shape_string(logits.shape()));
  }
  VerificationResult out;
  out.tolerance = tol;
  out.verified = true;
  for (std::size_t i = 0; i < sentinel_positions.size(); ++i) {
    const std::size_t p = sentinel_positions[i];
    if (p < 1 || p > logits.rows()) throw DimensionError("verify: sentinel position out of range");
    const double d = numerics::l1_distance(logits.row(p - 1), expected.row(i));
    out.per_sentinel_l1.push_back(d);
    if (!(d <= tol)) out.verified = false;
  }
  return out;
}

VerificationResult verify(const Tensor& logits, const AugmentedRequest& request,
                          const SentinelCache& cache, double tol) {
  if (logits.rank() != 2 || logits.rows() != request.length()) {
    throw DimensionError("verify: logits must have " + std::to_string(request.length()) +
                         " rows, got " + numerics::shape_string(logits.shape()));
  }
  return verify_sentinel_rows(logits, request.sentinel_positions, request.sentinel_sequence, cache,
                              tol);
}

Tensor fingerprint(const ModelParams& params, const SentinelSequence& sequence) {
  if (sequence.empty()) throw ArgumentError("fingerprint: empty sequence");
  Tensor logits = sentinel_logits(params, sequence);
  return logits.reshaped({logits.size()});
}

double fingerprint_distance(const Tensor& f1, const Tensor& f2) {
  return numerics::l1_distance(f1.values(), f2.values());
}

std::size_t PositionSchedule::last_original_row(std::size_t step) const {
  const auto& pos = positions.at(step - 1);
  const std::size_t length = original_length(step) + k;
  // Walk back from the last slot past any sentinel slots.
  std::size_t slot = length;
  for (auto it = pos.rbegin(); it != pos.rend() && *it == slot; ++it) --slot;
  return slot - 1;
}

PositionSchedule pregenerate_schedule(std::size_t n, std::size_t k, std::size_t m, Prng& rng) {
  if (m < 1) throw ArgumentError("pregenerate_schedule: M must be >= 1");
  if (n < 1 || k < 1) throw ArgumentError("pregenerate_schedule: N and K must be >= 1");
  PositionSchedule s;
  s.prompt_length = n;
  s.k = k;
  for (std::size_t i = 1; i <= m; ++i) {
    s.positions.push_back(numerics::sample_without_replacement(n + (i - 1) + k, k, rng));
  }
  return s;
}

PositionSchedule pregenerate_schedule(std::size_t n, std::size_t k, std::size_t m,
                                      const SentinelCache& cache, Prng& rng) {
  if (m < 1) throw ArgumentError("pregenerate_schedule: M must be >= 1");
  if (n < 1 || k < 1) throw ArgumentError("pregenerate_schedule: N and K must be >= 1");
  if (cache.k() != k) throw ArgumentError("pregenerate_schedule: cache K differs from K");
  PositionSchedule s;
  s.prompt_length = n;
  s.k = k;
  for (std::size_t i = 1; i <= m; ++i) {
    s.positions.push_back(numerics::sample_without_replacement(n + (i - 1) + k, k, rng));
    s.sentinels.push_back(cache.draw(rng));
  }
  return s;
}

AugmentedRequest step_request(const PositionSchedule& schedule, std::size_t step,
                              std::span<const TokenId> tokens) {
  if (step < 1 || step > schedule.steps()) throw ArgumentError("step outside schedule");
  if (schedule.sentinels.size() < step) throw ArgumentError("schedule has no sentinel choices");
  if (tokens.size() != schedule.original_length(step)) {
    throw ArgumentError("step " + std::to_string(step) + " expects " +
                        std::to_string(schedule.original_length(step)) + " tokens, got " +
                        std::to_string(tokens.size()));
  }
  return assemble_request(tokens, schedule.sentinels[step - 1], schedule.positions[step - 1]);
}

TranscriptResult verify_transcript(std::span<const Tensor> transcript,
                                   const PositionSchedule& schedule, const SentinelCache& cache,
                                   double tol) {
  if (transcript.size() > schedule.steps()) {
    throw ArgumentError("verify_transcript: schedule covers " + std::to_string(schedule.steps()) +
                        " steps, transcript has " + std::to_string(transcript.size()));
  }
  if (!transcript.empty() && schedule.sentinels.size() < transcript.size()) {
    throw ArgumentError("verify_transcript: schedule has no sentinel choices");
  }
  TranscriptResult out;
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    const std::size_t step = i + 1;
    const Tensor& logits = transcript[i];
    if (logits.rank() != 2 || logits.rows() != schedule.original_length(step) + schedule.k) {
      throw DimensionError("verify_transcript: step " + std::to_string(step) +
                           " logits have the wrong number of rows");
    }
    out.steps.push_back(verify_sentinel_rows(logits, schedule.positions[i], schedule.sentinels[i],
                                             cache, tol));
    if (!out.steps.back().verified && out.verified) {
      out.verified = false;
      out.first_failure = step;
    }
  }
  return out;
}

SamplingResult verify_greedy_sampling(std::span<const Tensor> next_token_rows,
                                      std::span<const TokenId> emitted) {
  if (next_token_rows.size() != emitted.size()) {
    throw ArgumentError("verify_greedy_sampling: " + std::to_string(next_token_rows.size()) +
                        " logit rows for " + std::to_string(emitted.size()) + " tokens");
  }
  SamplingResult out;
  for (std::size_t i = 0; i < emitted.size(); ++i) {
    if (numerics::argmax(next_token_rows[i].values()) != emitted[i]) {
      out.verified = false;
      out.first_failure = i + 1;
      break;
    }
  }
  return out;
}

std::vector<Tensor> last_rows(std::span<const model::ForwardOutput> transcript) {
  std::vector<Tensor> out;
  out.reserve(transcript.size());
  for (const auto& step : transcript) {
    const auto row = step.logits.row(step.logits.rows() - 1);
    out.push_back(Tensor::vector({row.begin(), row.end()}));
  }
  return out;
}

PrivateGeneration generate_private(const ModelParams& params, std::span<const TokenId> prompt,
                                   const PositionSchedule& schedule, std::size_t n_steps) {
  if (n_steps < 1) throw ArgumentError("generate_private: n_steps must be >= 1");
  if (n_steps > schedule.steps()) throw ArgumentError("generate_private: schedule too short");
  if (schedule.prompt_length != prompt.size()) {
    throw ArgumentError("generate_private: schedule was drawn for a different prompt length");
  }
  PrivateGeneration out;
  std::vector<TokenId> tokens(prompt.begin(), prompt.end());
  for (std::size_t step = 1; step <= n_steps; ++step) {
    const AugmentedRequest req = step_request(schedule, step, tokens);
    Tensor logits = model::forward(params, req.tokens, req.mask, req.position_ids).logits;
    const auto row = logits.row(schedule.last_original_row(step));
    Tensor next = Tensor::vector({row.begin(), row.end()});
    const auto token = static_cast<TokenId>(numerics::argmax(next.values()));
    out.emitted.push_back(token);
    tokens.push_back(token);
    out.step_logits.push_back(std::move(logits));
    out.next_token_rows.push_back(std::move(next));
  }
  return out;
}

}  // namespace priveri::protocol1

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "priveri/io/bytes.hpp"
#include "priveri/model/forward.hpp"
#include "priveri/numerics/prng.hpp"

// Sentinel-token logit fingerprinting.
//
// Positions are 1-based slots of the augmented sequence. Sentinel tokens
// carry position ids 1..K and original tokens keep 1..N, so a sentinel block
// computes exactly what it computes standalone.
namespace priveri::protocol1 {

using model::ModelParams;
using model::PositionId;
using model::TokenId;
using numerics::Prng;
using numerics::Tensor;

using SentinelSequence = std::vector<TokenId>;

inline constexpr double kDefaultTolerance = 1e-9;

struct CacheEntry {
  SentinelSequence sequence;
  Tensor logits;  // K x V
};

/// Public mapping from sentinel sequence to its standalone logits. Entries
/// keep generation order so that the file encoding is deterministic.
class SentinelCache {
 public:
  SentinelCache(io::Digest model_hash, std::size_t k, std::size_t vocab_size);

  /// ArgumentError on duplicate sequences or wrong shapes.
  void insert(SentinelSequence sequence, Tensor logits);

  const Tensor* find(const SentinelSequence& sequence) const;
  /// CacheMissError when absent.
  const Tensor& at(const SentinelSequence& sequence) const;

  const io::Digest& model_hash() const noexcept { return model_hash_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<CacheEntry>& entries() const noexcept { return entries_; }

  /// Uniformly chosen entry's sequence.
  const SentinelSequence& draw(Prng& rng) const;

 private:
  io::Digest model_hash_;
  std::size_t k_;
  std::size_t vocab_size_;
  std::vector<CacheEntry> entries_;
  std::map<SentinelSequence, std::size_t> index_;
};

/// Standalone logits of `sequence`: causal mask, position ids 1..K.
Tensor sentinel_logits(const ModelParams& params, const SentinelSequence& sequence);

/// Samples `cache_size` distinct sequences of K tokens (tokens drawn with
/// replacement; repeated sequences are re-drawn) and stores their logits.
/// ArgumentError when cache_size exceeds V^K or either count is zero.
SentinelCache generate_cache(const ModelParams& params, std::size_t cache_size, std::size_t k,
                             Prng& rng);

std::vector<std::uint8_t> encode_cache(const SentinelCache& cache);
/// FormatError on bad magic, truncation or trailing bytes.
SentinelCache decode_cache(std::span<const std::uint8_t> bytes);
void save_cache(const std::filesystem::path& path, const SentinelCache& cache);
SentinelCache load_cache(const std::filesystem::path& path);

/// Checks that the cache belongs to `params` and that every entry is
/// recomputed bit-exactly. IntegrityError otherwise.
void audit_cache(const SentinelCache& cache, const ModelParams& params);

/// The sentinel-augmented request (plaintext; the provider only ever sees it
/// through the privacy layer).
struct AugmentedRequest {
  std::vector<TokenId> tokens;  // N + K
  Tensor mask;                  // (N+K) x (N+K)
  std::vector<PositionId> position_ids;
  std::vector<std::size_t> sentinel_positions;  // 1-based, ascending
  SentinelSequence sentinel_sequence;
  std::size_t prompt_length = 0;  // N

  std::size_t length() const noexcept { return tokens.size(); }
  /// 1-based slots of the original tokens, ascending.
  std::vector<std::size_t> original_positions() const;
};

/// Deterministic part of request construction: places sentinel i at slot
/// positions[i] and the prompt, in order, in the remaining slots. The
/// original block keeps the causal N x N mask, the sentinel block gets its
/// own causal mask, and the two never see each other.
AugmentedRequest assemble_request(std::span<const TokenId> prompt,
                                  const SentinelSequence& sentinels,
                                  std::span<const std::size_t> positions);

/// Samples K slots uniformly from [1, N+K] and assembles the request.
/// ArgumentError for an empty prompt or empty sentinel sequence.
AugmentedRequest build_request(std::span<const TokenId> prompt, const SentinelSequence& sentinels,
                               Prng& rng);

struct VerificationResult {
  bool verified = false;
  std::vector<double> per_sentinel_l1;
  double tolerance = 0.0;
};

/// L1 distance between each sentinel row of `logits` and the cached row;
/// verified iff every distance <= tol. A NaN distance never verifies.
VerificationResult verify_sentinel_rows(const Tensor& logits,
                                        std::span<const std::size_t> sentinel_positions,
                                        const SentinelSequence& sentinels,
                                        const SentinelCache& cache, double tol);

VerificationResult verify(const Tensor& logits, const AugmentedRequest& request,
                          const SentinelCache& cache, double tol = kDefaultTolerance);

/// Concatenated K x V standalone logits, flattened to length K * V.
Tensor fingerprint(const ModelParams& params, const SentinelSequence& sequence);

/// L1 distance over the first min(|f1|, |f2|) coordinates.
double fingerprint_distance(const Tensor& f1, const Tensor& f2);

/// Pre-generated sentinel placements for up to M generation steps. Step i
/// (1-based) covers N_i = N + i - 1 original tokens; its positions are K
/// distinct slots in [1, N_i + K]. When drawn against a cache, each step
/// also fixes the sentinel sequence it will use.
struct PositionSchedule {
  std::size_t prompt_length = 0;
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> positions;
  std::vector<SentinelSequence> sentinels;  // empty, or one per step

  std::size_t steps() const noexcept { return positions.size(); }
  std::size_t original_length(std::size_t step) const noexcept { return prompt_length + step - 1; }
  /// 0-based row of the last original token in step `step`'s augmented sequence.
  std::size_t last_original_row(std::size_t step) const;
};

PositionSchedule pregenerate_schedule(std::size_t n, std::size_t k, std::size_t m, Prng& rng);
/// Same positions as the overload above for the same rng state, with one
/// sentinel sequence drawn from `cache` after each step's positions.
PositionSchedule pregenerate_schedule(std::size_t n, std::size_t k, std::size_t m,
                                      const SentinelCache& cache, Prng& rng);

/// Augmented request for step `step` (1-based) over `tokens` (= prompt plus
/// the i-1 tokens emitted so far).
AugmentedRequest step_request(const PositionSchedule& schedule, std::size_t step,
                              std::span<const TokenId> tokens);

struct TranscriptResult {
  bool verified = true;
  std::optional<std::size_t> first_failure;  // 1-based step
  std::vector<VerificationResult> steps;
};

/// Per-step verification of a generation transcript (logits of each step's
/// augmented run). An empty transcript verifies. ArgumentError when the
/// schedule is shorter than the transcript or carries no sentinel choices.
TranscriptResult verify_transcript(std::span<const Tensor> transcript,
                                   const PositionSchedule& schedule, const SentinelCache& cache,
                                   double tol = kDefaultTolerance);

struct SamplingResult {
  bool verified = true;
  std::optional<std::size_t> first_failure;  // 1-based step
};

/// token_i == argmax(next_token_rows[i]) for every step, ties to the lowest
/// index. ArgumentError when the counts differ.
SamplingResult verify_greedy_sampling(std::span<const Tensor> next_token_rows,
                                      std::span<const TokenId> emitted);

/// Last logit row of every step of a plain greedy transcript.
std::vector<Tensor> last_rows(std::span<const model::ForwardOutput> transcript);

/// Honest non-interactive generation under a schedule: each step runs the
/// step's augmented request and emits the argmax of the last original row.
struct PrivateGeneration {
  std::vector<TokenId> emitted;
  std::vector<Tensor> step_logits;      // (N_i + K) x V per step
  std::vector<Tensor> next_token_rows;  // V per step
};

PrivateGeneration generate_private(const ModelParams& params, std::span<const TokenId> prompt,
                                   const PositionSchedule& schedule, std::size_t n_steps);

}  // namespace priveri::protocol1

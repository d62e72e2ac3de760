#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "priveri/error.hpp"
#include "priveri/io/bytes.hpp"
#include "priveri/model/generate.hpp"
#include "priveri/model/perturb.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/sampling.hpp"
#include <cmath>
#include "priveri/protocol1/protocol1.hpp"

using namespace priveri;
using namespace priveri::protocol1;
using model::PositionId;
using numerics::Prng;

namespace {

const ModelParams& desk_model() {
  static const ModelParams p = model::init_params(model::ModelConfig{}, 1);
  return p;
}

const SentinelCache& desk_cache() {
  static const SentinelCache c = [] {
    Prng rng(77);
    return generate_cache(desk_model(), 100, 3, rng);
  }();
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, Prng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.uniform_below(64));
  return t;
}

Tensor run(const ModelParams& p, const AugmentedRequest& r) {
  return model::forward(p, r.tokens, r.mask, r.position_ids).logits;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cache

TEST(Cache, DegenerateSingleEntry) {
  Prng rng(1);
  const auto c = generate_cache(desk_model(), 1, 1, rng);
  ASSERT_EQ(c.size(), 1u);
  const auto& e = c.entries()[0];
  const auto out = model::forward(desk_model(), e.sequence, model::causal_mask(1),
                                  model::sequential_positions(1));
  EXPECT_TRUE(e.logits.bit_equal(out.logits));
}

TEST(Cache, DistinctEntriesRecomputeExactly) {
  const auto& c = desk_cache();
  ASSERT_EQ(c.size(), 100u);
  std::set<SentinelSequence> seen;
  for (const auto& e : c.entries()) {
    EXPECT_TRUE(seen.insert(e.sequence).second);
    const auto out = model::forward(desk_model(), e.sequence, model::causal_mask(3),
                                    model::sequential_positions(3));
    ASSERT_TRUE(e.logits.bit_equal(out.logits));
  }
  EXPECT_NO_THROW(audit_cache(c, desk_model()));
}

TEST(Cache, InfeasibleSizeAndMisses) {
  Prng rng(2);
  model::ModelConfig small;
  small.vocab_size = 2;
  small.embed_dim = 8;
  small.hidden_dim = 8;
  small.n_heads = 2;
  small.max_positions = 8;
  const auto p = model::init_params(small, 1);
  EXPECT_NO_THROW(generate_cache(p, 4, 2, rng));
  EXPECT_THROW(generate_cache(p, 5, 2, rng), ArgumentError);
  EXPECT_THROW(desk_cache().at({63, 63, 63, 63}), CacheMissError);
}

TEST(Cache, FileFormatLayout) {
  const auto& c = desk_cache();
  const auto bytes = encode_cache(c);
  ASSERT_EQ(bytes.size(), 8u + 32 + 4 + 4 + 8 + 100 * (3 * 4 + 3 * 64 * 8));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "PVCACHE1");
  EXPECT_TRUE(std::equal(c.model_hash().begin(), c.model_hash().end(), bytes.begin() + 8));
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[off + i]) << (8 * i);
    return v;
  };
  EXPECT_EQ(u32(40), 3u);
  EXPECT_EQ(u32(44), 64u);
  EXPECT_EQ(u32(48), 100u);
  EXPECT_EQ(u32(52), 0u);
  const auto& first = c.entries()[0];
  EXPECT_EQ(u32(56), first.sequence[0]);
  double l0 = 0.0;
  std::memcpy(&l0, bytes.data() + 56 + 12, 8);
  EXPECT_EQ(l0, first.logits[0]);
}

TEST(Cache, RoundTripAndDeterminism) {
  const auto bytes = encode_cache(desk_cache());
  const auto back = decode_cache(bytes);
  EXPECT_EQ(encode_cache(back), bytes);
  Prng a(77);
  EXPECT_EQ(encode_cache(generate_cache(desk_model(), 100, 3, a)), bytes);

  const auto dir = std::filesystem::temp_directory_path() / "priveri_p1_cache";
  std::filesystem::create_directories(dir);
  save_cache(dir / "c.bin", desk_cache());
  EXPECT_EQ(io::read_file(dir / "c.bin"), bytes);
  EXPECT_EQ(encode_cache(load_cache(dir / "c.bin")), bytes);
}

TEST(Cache, DecodeRejectsDamage) {
  auto bytes = encode_cache(desk_cache());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_cache(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_cache(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_cache(trailing), FormatError);
  // A flipped logit byte still parses; the audit against the model catches it.
  auto flipped = bytes;
  flipped[56 + 12 + 3] ^= 0x10;
  const auto damaged = decode_cache(flipped);
  EXPECT_THROW(audit_cache(damaged, desk_model()), IntegrityError);
  EXPECT_THROW(audit_cache(desk_cache(), model::init_params(model::ModelConfig{}, 2)), IntegrityError);
}

// ---------------------------------------------------------------------------
// Requests

TEST(Request, HandExpandedInstance) {
  const std::vector<TokenId> prompt{5, 6, 7, 8};
  const SentinelSequence s{1, 2, 3};
  const std::vector<std::size_t> pos{1, 4, 6};
  const auto r = assemble_request(prompt, s, pos);
  EXPECT_EQ(r.tokens, (std::vector<TokenId>{1, 5, 6, 2, 7, 3, 8}));
  EXPECT_EQ(r.position_ids, (std::vector<PositionId>{1, 1, 2, 2, 3, 3, 4}));
  for (std::size_t j = 0; j < 7; ++j) {
    EXPECT_EQ(r.mask(3, j), (j == 0 || j == 3) ? 1.0 : 0.0) << j;
  }
  EXPECT_EQ(r.original_positions(), (std::vector<std::size_t>{2, 3, 5, 7}));
}

TEST(Request, AppendedSentinelsLeaveCausalBlock) {
  const std::vector<TokenId> prompt{5, 6, 7, 8};
  const auto r = assemble_request(prompt, {1, 2, 3}, std::vector<std::size_t>{5, 6, 7});
  const Tensor causal = model::causal_mask(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r.mask(i, j), causal(i, j));
}

TEST(Request, MaskInvariantsHoldOnRandomRequests) {
  Prng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.uniform_below(30);
    const auto prompt = random_tokens(n, rng);
    const auto& s = desk_cache().draw(rng);
    const auto r = build_request(prompt, s, rng);
    const auto& p = r.sentinel_positions;
    const auto orig = r.original_positions();
    ASSERT_EQ(r.length(), n + 3);
    for (std::size_t i = 0; i < 3; ++i) {
      ASSERT_EQ(r.position_ids[p[i] - 1], i + 1);
      ASSERT_EQ(r.tokens[p[i] - 1], s[i]);
      for (std::size_t j = 0; j < 3; ++j) ASSERT_EQ(r.mask(p[i] - 1, p[j] - 1), j <= i ? 1.0 : 0.0);
      for (std::size_t o : orig) {
        ASSERT_EQ(r.mask(p[i] - 1, o - 1), 0.0);
        ASSERT_EQ(r.mask(o - 1, p[i] - 1), 0.0);
      }
    }
    for (std::size_t a = 0; a < n; ++a) {
      ASSERT_EQ(r.position_ids[orig[a] - 1], a + 1);
      ASSERT_EQ(r.tokens[orig[a] - 1], prompt[a]);
      for (std::size_t b = 0; b < n; ++b) ASSERT_EQ(r.mask(orig[a] - 1, orig[b] - 1), b <= a ? 1.0 : 0.0);
    }
  }
}

TEST(Request, EmptyPromptRejected) {
  Prng rng(1);
  EXPECT_THROW(build_request({}, {1, 2, 3}, rng), ArgumentError);
  EXPECT_THROW(build_request(std::vector<TokenId>{1}, {}, rng), ArgumentError);
}

TEST(Request, NonInterferenceAndInSituEquality) {
  Prng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.uniform_below(64);
    const auto prompt = random_tokens(n, rng);
    const auto& s = desk_cache().draw(rng);
    const auto r = build_request(prompt, s, rng);
    const Tensor aug = run(desk_model(), r);
    const Tensor plain =
        model::forward(desk_model(), prompt, model::causal_mask(n), model::sequential_positions(n)).logits;
    const auto orig = r.original_positions();
    for (std::size_t a = 0; a < n; ++a) {
      const auto x = aug.row(orig[a] - 1), y = plain.row(a);
      ASSERT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    }
    const auto v = verify(aug, r, desk_cache(), 0.0);
    ASSERT_TRUE(v.verified);
    for (double d : v.per_sentinel_l1) ASSERT_EQ(d, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Verification

TEST(Verify, JitterWithinToleranceAndMonotonicity) {
  Prng rng(6);
  const auto r = build_request(random_tokens(10, rng), desk_cache().draw(rng), rng);
  Tensor logits = run(desk_model(), r);
  const double tol = 1e-6;
  for (auto& x : logits.data()) x += (2.0 * rng.uniform01() - 1.0) * tol / (2.0 * 64.0);
  const auto v = verify(logits, r, desk_cache(), tol);
  EXPECT_TRUE(v.verified);
  for (double d : v.per_sentinel_l1) EXPECT_LE(d, tol / 2.0);
  EXPECT_TRUE(verify(logits, r, desk_cache(), 2 * tol).verified);
  EXPECT_EQ(v.tolerance, tol);
}

TEST(Verify, LowRankSubstituteRejected) {
  Prng rng(7);
  const auto sub = model::perturb_low_rank(desk_model(), 63);
  for (int rep = 0; rep < 20; ++rep) {
    const auto r = build_request(random_tokens(8, rng), desk_cache().draw(rng), rng);
    EXPECT_FALSE(verify(run(sub, r), r, desk_cache(), 1e-6).verified);
  }
}

TEST(Verify, NanRowsAndUnknownSequence) {
  Prng rng(8);
  const auto r = build_request(random_tokens(5, rng), desk_cache().draw(rng), rng);
  Tensor logits = run(desk_model(), r);
  logits(r.sentinel_positions[0] - 1, 0) = std::nan("");
  EXPECT_FALSE(verify(logits, r, desk_cache()).verified);
  auto unknown = assemble_request(std::vector<TokenId>{1}, {63, 63, 62, 61}, std::vector<std::size_t>{1, 2, 3, 4});
  EXPECT_THROW(verify(Tensor::zeros(5, 64), unknown, desk_cache()), CacheMissError);
}

// ---------------------------------------------------------------------------
// Fingerprints

TEST(Fingerprint, MatchesCacheEntryAndDistances) {
  const auto& e = desk_cache().entries()[3];
  const Tensor f = fingerprint(desk_model(), e.sequence);
  ASSERT_EQ(f.size(), 3u * 64);
  for (std::size_t i = 0; i < f.size(); ++i) ASSERT_EQ(f[i], e.logits[i]);
  EXPECT_EQ(fingerprint_distance(f, f), 0.0);
  EXPECT_GT(fingerprint_distance(f, fingerprint(desk_model(), desk_cache().entries()[4].sequence)), 0.0);
  EXPECT_EQ(fingerprint_distance(Tensor::vector({1, 2}), Tensor::vector({0, 0})), 3.0);
  const Tensor single = fingerprint(desk_model(), {5});
  const auto row =
      model::forward(desk_model(), std::vector<TokenId>{5}, model::causal_mask(1), model::sequential_positions(1));
  EXPECT_TRUE(single.bit_equal(row.logits.reshaped({64})));
}

TEST(Fingerprint, TruncatesToShorter) {
  std::vector<double> a(192, 1.0), b(96, 0.0);
  EXPECT_EQ(fingerprint_distance(Tensor::vector(a), Tensor::vector(b)), 96.0);
}

// ---------------------------------------------------------------------------
// Non-interactive generation

TEST(Schedule, RangesAndDeterminism) {
  Prng a(9), b(9);
  const auto s = pregenerate_schedule(5, 3, 12, a);
  const auto t = pregenerate_schedule(5, 3, 12, b);
  EXPECT_EQ(s.positions, t.positions);
  ASSERT_EQ(s.steps(), 12u);
  for (std::size_t i = 1; i <= 12; ++i) {
    const auto& p = s.positions[i - 1];
    ASSERT_EQ(p.size(), 3u);
    EXPECT_LE(p.back(), s.original_length(i) + 3);
    EXPECT_GE(p.front(), 1u);
  }
  Prng c(9), d(9);
  const auto with_cache = pregenerate_schedule(5, 3, 12, desk_cache(), c);
  EXPECT_EQ(with_cache.sentinels.size(), 12u);
  Prng e(10), f(10);
  EXPECT_EQ(pregenerate_schedule(4, 3, 1, e).positions[0], numerics::sample_without_replacement(7, 3, f));
}

TEST(Transcript, HonestTamperedAndEmpty) {
  Prng rng(11);
  const auto prompt = random_tokens(6, rng);
  const auto schedule = pregenerate_schedule(6, 3, 10, desk_cache(), rng);
  const auto gen = generate_private(desk_model(), prompt, schedule, 10);
  const auto ok = verify_transcript(gen.step_logits, schedule, desk_cache());
  EXPECT_TRUE(ok.verified);
  EXPECT_FALSE(ok.first_failure.has_value());
  EXPECT_EQ(gen.emitted, model::generate_greedy(desk_model(), prompt, 10).emitted);

  auto tampered = gen.step_logits;
  tampered[6](schedule.positions[6][1] - 1, 5) += 1.0;
  const auto bad = verify_transcript(tampered, schedule, desk_cache());
  EXPECT_FALSE(bad.verified);
  EXPECT_EQ(bad.first_failure, 7u);

  EXPECT_TRUE(verify_transcript({}, schedule, desk_cache()).verified);
  const auto short_schedule = pregenerate_schedule(6, 3, 2, desk_cache(), rng);
  EXPECT_THROW(verify_transcript(gen.step_logits, short_schedule, desk_cache()), ArgumentError);
}

TEST(Sampling, GreedyChecks) {
  const auto run_ = model::generate_greedy(desk_model(), {3, 1, 4}, 5);
  const auto rows = last_rows(run_.transcript);
  EXPECT_TRUE(verify_greedy_sampling(rows, run_.emitted).verified);
  auto swapped = run_.emitted;
  swapped[2] = static_cast<TokenId>(numerics::second_argmax(rows[2].values()));
  const auto bad = verify_greedy_sampling(rows, swapped);
  EXPECT_FALSE(bad.verified);
  EXPECT_EQ(bad.first_failure, 3u);

  const std::vector<Tensor> tie{Tensor::vector({0.5, 2.0, 2.0})};
  EXPECT_TRUE(verify_greedy_sampling(tie, std::vector<TokenId>{1}).verified);
  EXPECT_FALSE(verify_greedy_sampling(tie, std::vector<TokenId>{2}).verified);
  EXPECT_THROW(verify_greedy_sampling(tie, std::vector<TokenId>{1, 1}), ArgumentError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "priveri/error.hpp"
#include "priveri/io/bytes.hpp"
#include "priveri/model/forward.hpp"
#include "priveri/model/generate.hpp"
#include "priveri/model/params.hpp"
#include "priveri/model/perturb.hpp"
#include "priveri/model/serialize.hpp"
#include "priveri/model/train.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/numerics/prng.hpp"

using namespace priveri;
using namespace priveri::model;
using numerics::Prng;
using numerics::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.embed_dim = 32;
  c.hidden_dim = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.max_positions = 64;
  return c;
}

const ModelParams& desk_model() {
  static const ModelParams p = init_params(ModelConfig{}, 1);
  return p;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Prng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.uniform_below(vocab));
  return t;
}

ForwardOutput plain(const ModelParams& p, const std::vector<TokenId>& tokens) {
  return forward(p, tokens, causal_mask(tokens.size()), sequential_positions(tokens.size()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(InitParams, DeterministicInSeed) {
  const auto a = init_params(small_config(), 5);
  const auto b = init_params(small_config(), 5);
  const auto c = init_params(small_config(), 6);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, c.hash);
  EXPECT_EQ(a.hash, compute_hash(a));
}

TEST(InitParams, ShapesFollowConfig) {
  const auto p = init_params(small_config(), 1);
  EXPECT_EQ(p.token_embedding.shape(), (std::vector<std::size_t>{32, 32}));
  EXPECT_EQ(p.position_embedding.shape(), (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(p.unembedding.shape(), (std::vector<std::size_t>{32, 32}));
  ASSERT_EQ(p.layers.size(), 2u);
  EXPECT_EQ(p.layers[0].w_up.shape(), (std::vector<std::size_t>{32, 128}));
  EXPECT_EQ(p.layers[0].w_down.shape(), (std::vector<std::size_t>{128, 32}));
  EXPECT_NO_THROW(check_shapes(p));
}

TEST(InitParams, InvalidConfigRejected) {
  ModelConfig c = small_config();
  c.n_heads = 5;
  EXPECT_THROW(init_params(c, 1), ArgumentError);
  c = small_config();
  c.vocab_size = 1;
  EXPECT_THROW(init_params(c, 1), ArgumentError);
}

TEST(Forward, SingleTokenLogitsAreHiddenTimesUnembedding) {
  const auto& p = desk_model();
  const auto out = forward(p, std::vector<TokenId>{9}, Tensor::matrix({{1}}), std::vector<PositionId>{1});
  EXPECT_TRUE(out.logits.bit_equal(numerics::matmul(out.hidden, p.unembedding)));
}

TEST(Forward, LogitsAlwaysEqualHiddenTimesUnembedding) {
  const auto& p = desk_model();
  Prng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const auto t = random_tokens(1 + rng.uniform_below(20), 64, rng);
    const auto out = plain(p, t);
    ASSERT_TRUE(out.logits.bit_equal(numerics::matmul(out.hidden, p.unembedding)));
  }
}

TEST(Forward, BlockDiagonalMaskEqualsStandaloneRuns) {
  const auto& p = desk_model();
  Prng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t a = 1 + rng.uniform_below(6), b = 1 + rng.uniform_below(6);
    const auto ta = random_tokens(a, 64, rng), tb = random_tokens(b, 64, rng);
    std::vector<TokenId> joined = ta;
    joined.insert(joined.end(), tb.begin(), tb.end());
    Tensor mask = Tensor::zeros(a + b, a + b);
    std::vector<PositionId> ids;
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask(i, j) = 1.0;
      ids.push_back(static_cast<PositionId>(i + 1));
    }
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask(a + i, a + j) = 1.0;
      ids.push_back(static_cast<PositionId>(i + 1));
    }
    const auto out = forward(p, joined, mask, ids);
    const auto oa = plain(p, ta), ob = plain(p, tb);
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t v = 0; v < 64; ++v) ASSERT_EQ(out.logits(i, v), oa.logits(i, v));
    }
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t v = 0; v < 64; ++v) ASSERT_EQ(out.logits(a + i, v), ob.logits(i, v));
    }
  }
}

TEST(Forward, PositionEmbeddingFollowsIdsNotIndex) {
  const auto& p = desk_model();
  const std::vector<TokenId> t{3, 4};
  const Tensor diag = Tensor::identity(2);
  const auto a = forward(p, t, diag, std::vector<PositionId>{1, 1});
  const auto single = forward(p, std::vector<TokenId>{4}, Tensor::matrix({{1}}), std::vector<PositionId>{1});
  for (std::size_t v = 0; v < 64; ++v) EXPECT_EQ(a.logits(1, v), single.logits(0, v));
}

TEST(Forward, EmbeddingInputMatchesTokenInput) {
  const auto& p = desk_model();
  const std::vector<TokenId> t{1, 2, 3, 4};
  const auto out_tokens = plain(p, t);
  const auto out_emb = forward(p, embed_tokens(p, t), causal_mask(4), sequential_positions(4));
  EXPECT_TRUE(out_tokens.logits.bit_equal(out_emb.logits));
}

TEST(Forward, RejectsBadInputs) {
  const auto& p = desk_model();
  const std::vector<TokenId> t{1, 2};
  EXPECT_THROW(forward(p, t, causal_mask(3), sequential_positions(2)), DimensionError);
  EXPECT_THROW(forward(p, t, causal_mask(2), std::vector<PositionId>{0, 1}), ArgumentError);
  EXPECT_THROW(forward(p, t, causal_mask(2), std::vector<PositionId>{1, 513}), ArgumentError);
  EXPECT_THROW(forward(p, std::vector<TokenId>{64}, causal_mask(1), sequential_positions(1)),
               ArgumentError);
  EXPECT_THROW(forward(p, t, Tensor::matrix({{1, 0}, {0, 0}}), sequential_positions(2)),
               DegenerateRowError);
}

TEST(Forward, RowsSubsetIsBitIdentical) {
  const auto& p = desk_model();
  Prng rng(8);
  const auto t = random_tokens(12, 64, rng);
  const auto full = plain(p, t);
  const std::vector<std::size_t> rows{3, 7};
  const auto part = forward_rows(p, t, causal_mask(12), sequential_positions(12), rows);
  for (std::size_t r : rows) {
    for (std::size_t v = 0; v < 64; ++v) ASSERT_EQ(part.logits(r, v), full.logits(r, v));
  }
  EXPECT_TRUE(std::isnan(part.logits(11, 0)));
}

TEST(Forward, ReentrantAcrossThreads) {
  const auto& p = desk_model();
  Prng rng(10);
  const auto t = random_tokens(16, 64, rng);
  const auto ref = plain(p, t);
  std::vector<Tensor> results(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) threads.emplace_back([&, i] { results[i] = plain(p, t).logits; });
  for (auto& th : threads) th.join();
  for (const auto& r : results) EXPECT_TRUE(r.bit_equal(ref.logits));
}

TEST(Generate, ForcedArgmaxAndBookkeeping) {
  ModelParams p = init_params(small_config(), 2);
  p.final_norm = Tensor::vector(std::vector<double>(32, 0.0));
  seal(p);
  const auto run = generate_greedy(p, {1, 2}, 4);
  EXPECT_EQ(run.emitted, (std::vector<TokenId>{0, 0, 0, 0}));
  EXPECT_EQ(generate_greedy(p, {1}, 1).transcript.size(), 1u);
}

TEST(Generate, TranscriptRowsReproduceByRecomputation) {
  const auto& p = desk_model();
  std::vector<TokenId> seq{5, 9, 2};
  const auto run = generate_greedy(p, seq, 6);
  ASSERT_EQ(run.emitted.size(), 6u);
  for (std::size_t s = 0; s < 6; ++s) {
    const auto out = plain(p, seq);
    const std::size_t last = seq.size() - 1;
    for (std::size_t v = 0; v < 64; ++v) ASSERT_EQ(run.transcript[s].logits(last, v), out.logits(last, v));
    EXPECT_EQ(run.emitted[s], numerics::argmax(out.logits.row(last)));
    seq.push_back(run.emitted[s]);
  }
}

TEST(Generate, Errors) {
  const auto& p = desk_model();
  EXPECT_THROW(generate_greedy(p, {}, 1), ArgumentError);
  EXPECT_THROW(generate_greedy(p, {1}, 0), ArgumentError);
  EXPECT_THROW(generate_greedy(p, std::vector<TokenId>(510, 1), 4), ArgumentError);
}

TEST(Pretrain, ZeroStepsIsNoOpAndDeterministic) {
  const auto p = init_params(small_config(), 3);
  MarkovCorpusConfig cc;
  cc.vocab_size = 32;
  cc.train_sequences = 32;
  cc.heldout_sequences = 8;
  const auto corpus = make_markov_corpus(cc);
  PretrainConfig pc;
  pc.steps = 0;
  EXPECT_EQ(pretrain(p, corpus.train, pc).hash, p.hash);
  pc.steps = 5;
  const auto a = pretrain(p, corpus.train, pc);
  const auto b = pretrain(p, corpus.train, pc);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, p.hash);
  EXPECT_LT(mean_log_loss(a, corpus.heldout), mean_log_loss(p, corpus.heldout));
}

TEST(Perturb, FullRankRecoversWeights) {
  const auto& p = desk_model();
  const auto q = perturb_low_rank(p, 64);
  EXPECT_LE(max_abs_diff(p.layers[0].wq, q.layers[0].wq), 1e-9);
  EXPECT_LE(max_abs_diff(p.layers[1].w_down, q.layers[1].w_down), 1e-9);
  EXPECT_EQ(q.token_embedding, p.token_embedding);
  EXPECT_THROW(perturb_low_rank(p, 0), ArgumentError);
  EXPECT_THROW(perturb_low_rank(p, 65), ArgumentError);
}

TEST(Perturb, LowerRankMeansLargerReconstructionError) {
  const auto& p = desk_model();
  double prev = -1.0;
  for (std::size_t r : {63u, 32u, 1u}) {
    const auto q = perturb_low_rank(p, r);
    double err = 0.0;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      err += numerics::frobenius_norm(numerics::subtract(q.layers[l].wv, p.layers[l].wv));
      err += numerics::frobenius_norm(numerics::subtract(q.layers[l].w_up, p.layers[l].w_up));
    }
    EXPECT_GT(err, prev);
    prev = err;
  }
}

TEST(Perturb, QuantizeExamples) {
  EXPECT_EQ(quantize_symmetric(Tensor::vector({-1, 0, 1}), 2), Tensor::vector({-1, 0, 1}));
  const Tensor grid = Tensor::vector({-32767, -5, 0, 12, 32767});
  EXPECT_EQ(quantize_symmetric(grid, 16), grid);
  EXPECT_EQ(quantize_symmetric(Tensor::vector({0, 0}), 8), Tensor::vector({0, 0}));
  EXPECT_THROW(quantize_symmetric(grid, 1), ArgumentError);
  EXPECT_THROW(quantize_symmetric(grid, 17), ArgumentError);

  const auto& p = desk_model();
  const auto q = perturb_quantize(p, 8);
  p.for_each_tensor([&](const std::string& name, const Tensor& w) {
    double mx = 0.0;
    for (double x : w.values()) mx = std::max(mx, std::fabs(x));
    Tensor qw;
    q.for_each_tensor([&](const std::string& n2, const Tensor& t) {
      if (n2 == name) qw = t;
    });
    EXPECT_LE(max_abs_diff(w, qw), mx / 254.0 + 1e-12) << name;
  });
}

TEST(Perturb, FinetuneStep) {
  const auto& p = desk_model();
  const auto corpus = make_markov_corpus(MarkovCorpusConfig{});
  const std::span<const Sequence> batch(corpus.train.data(), 4);
  EXPECT_EQ(perturb_finetune_step(p, batch, 0.0).hash, p.hash);
  const auto a = perturb_finetune_step(p, batch, 1e-3);
  EXPECT_EQ(a.hash, perturb_finetune_step(p, batch, 1e-3).hash);
  EXPECT_NE(a.hash, p.hash);
  EXPECT_THROW(perturb_finetune_step(p, batch, -1.0), ArgumentError);
}

TEST(Serialize, RoundTripIsBitExactAndByteStable) {
  const auto p = init_params(small_config(), 9);
  const auto enc = serialize(p);
  const auto q = deserialize(enc.manifest, enc.blob);
  EXPECT_EQ(q.hash, p.hash);
  q.for_each_tensor([&](const std::string& name, const Tensor& t) {
    p.for_each_tensor([&](const std::string& n2, const Tensor& u) {
      if (n2 == name) EXPECT_TRUE(t.bit_equal(u)) << name;
    });
  });
  const auto again = serialize(q);
  EXPECT_EQ(again.manifest, enc.manifest);
  EXPECT_EQ(again.blob, enc.blob);
}

TEST(Serialize, CorruptionIsDetected) {
  const auto p = init_params(small_config(), 9);
  auto enc = serialize(p);
  auto flipped = enc.blob;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize(enc.manifest, flipped), IntegrityError);
  auto truncated = enc.blob;
  truncated.pop_back();
  EXPECT_THROW(deserialize(enc.manifest, truncated), FormatError);
  EXPECT_THROW(deserialize("{not json", enc.blob), FormatError);
  std::string wrong_magic = enc.manifest;
  wrong_magic.replace(wrong_magic.find("PVMODEL1"), 8, "PVMODEL9");
  EXPECT_THROW(deserialize(wrong_magic, enc.blob), FormatError);
}

TEST(Serialize, ManifestConfigMismatchIsFormatError) {
  const auto p = init_params(small_config(), 9);
  auto b = to_bundle(p);
  b.header["config"]["n_layers"] = 3;
  EXPECT_THROW(from_bundle(b), FormatError);
}

TEST(Corpus, MarkovCorpusIsDeterministic) {
  const auto a = make_markov_corpus(MarkovCorpusConfig{});
  const auto b = make_markov_corpus(MarkovCorpusConfig{});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.train.size(), 512u);
  EXPECT_EQ(a.train[0].size(), 33u);
}

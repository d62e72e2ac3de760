#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "priveri/error.hpp"
#include "priveri/model/generate.hpp"
#include "priveri/numerics/kernels.hpp"
#include "priveri/protocol2/protocol2.hpp"

using namespace priveri;
using namespace priveri::protocol2;
namespace nk = priveri::numerics;

namespace {

const ModelParams& desk_model() {
  static const ModelParams p = model::init_params(model::ModelConfig{}, 1);
  return p;
}

const SentinelCache& desk_cache() {
  static const SentinelCache c = [] {
    Prng rng(31);
    return protocol1::generate_cache(desk_model(), 50, 3, rng);
  }();
  return c;
}

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.vocab_size = 16;
  c.embed_dim = 16;
  c.hidden_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_mult = 2;
  c.max_positions = 64;
  return c;
}

model::Corpus tiny_corpus() {
  model::MarkovCorpusConfig c;
  c.vocab_size = 16;
  c.sequence_length = 9;
  c.train_sequences = 32;
  c.heldout_sequences = 8;
  return model::make_markov_corpus(c);
}

Tensor random_tensor(std::size_t r, std::size_t c, Prng& rng) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& x : t.data()) x = rng.normal();
  return t;
}

std::vector<TokenId> random_tokens(std::size_t n, Prng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.uniform_below(64));
  return t;
}

}  // namespace

TEST(NoiseSet, Validation) {
  EXPECT_THROW(NoiseSet{1}.validate(), ArgumentError);
  EXPECT_NO_THROW(NoiseSet{2}.validate());
  EXPECT_DOUBLE_EQ(soundness_bound(NoiseSet{16}), 0.0625);
  EXPECT_DOUBLE_EQ(soundness_bound(NoiseSet{100}), 0.01);
}

TEST(Bounds, Completeness) {
  EXPECT_EQ(completeness_bound(std::vector<double>(10, 1.0)), 0.0);
  EXPECT_NEAR(completeness_bound(std::vector<double>(10, 0.99)), 0.0956179249911, 1e-12);
  EXPECT_EQ(completeness_bound(std::vector<double>{0.9, 0.0, 0.5}), 1.0);
  EXPECT_THROW(completeness_bound(std::vector<double>{1.5}), ArgumentError);
  EXPECT_THROW(completeness_bound(std::vector<double>{-0.1}), ArgumentError);
}

TEST(EmbedNoise, PassThroughAndNoiseOnly) {
  const auto ne = init_noise_embedder(8, NoiseSet{4}, 3);
  Prng rng(1);
  const Tensor e = random_tensor(1, 8, rng).reshaped({8});
  EXPECT_TRUE(embed_noise(ne, e, 2).bit_equal(e));

  auto swapped = ne;
  swapped.combiner = Tensor::zeros(16, 8);
  for (std::size_t i = 0; i < 8; ++i) swapped.combiner(8 + i, i) = 1.0;
  const Tensor out = embed_noise(swapped, e, 3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], ne.noise_embedding(3, i));
  EXPECT_THROW(embed_noise(ne, e, 4), ArgumentError);
}

TEST(EmbedNoise, MatchesScalarLoop) {
  Prng rng(2);
  NoiseEmbedderParams ne{random_tensor(5, 8, rng), random_tensor(16, 8, rng),
                         random_tensor(1, 8, rng).reshaped({8})};
  for (NoiseId b = 0; b < 5; ++b) {
    const Tensor e = random_tensor(1, 8, rng).reshaped({8});
    const Tensor out = embed_noise(ne, e, b);
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 8; ++k) s += e[k] * ne.combiner(k, j);
      for (std::size_t k = 0; k < 8; ++k) s += ne.noise_embedding(b, k) * ne.combiner(8 + k, j);
      s += ne.bias[j];
      EXPECT_NEAR(out[j], s, 1e-15 * std::max(1.0, std::abs(s)));
    }
  }
}

TEST(PredictNoise, ForcedTieAndOracle) {
  NoisePredictorParams np{Tensor::zeros(4, 6), Tensor::zeros(1, 6).reshaped({6})};
  const std::vector<double> h{0.0, 0.0, 2.0, 0.0};
  EXPECT_EQ(predict_noise(np, h), 0u);
  np.weight(2, 5) = 10.0;
  EXPECT_EQ(predict_noise(np, h), 5u);
  EXPECT_THROW(predict_noise(np, std::vector<double>{1.0}), DimensionError);

  Prng rng(3);
  NoisePredictorParams rp{random_tensor(16, 7, rng), random_tensor(1, 7, rng).reshaped({7})};
  for (int rep = 0; rep < 100; ++rep) {
    const Tensor x = random_tensor(1, 16, rng);
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t c = 0; c < 7; ++c) {
      double s = rp.bias[c];
      for (std::size_t k = 0; k < 16; ++k) s += x[k] * rp.weight(k, c);
      if (s > best_v) best_v = s, best = c;
    }
    EXPECT_EQ(predict_noise(rp, x.values()), best);
  }
}

TEST(NoisyRequest, SharedModeAndPurity) {
  const auto modules = init_modules(desk_model(), NoiseSet{16}, 4);
  Prng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const auto prompt = random_tokens(1 + rng.uniform_below(20), rng);
    const auto& s = desk_cache().draw(rng);
    Prng a = rng.fork();
    Prng b = a;
    const auto req = build_noisy_request(desk_model(), prompt, s, modules.noise, modules.embedder, a);
    const auto again = build_noisy_request(desk_model(), prompt, s, modules.noise, modules.embedder, b);
    EXPECT_TRUE(req.embeddings.bit_equal(again.embeddings));
    EXPECT_EQ(req.noise_cache, again.noise_cache);
    ASSERT_EQ(req.noise_cache.size(), prompt.size());
    for (NoiseId id : req.noise_cache) EXPECT_EQ(id, req.noise_cache[0]);

    // Pass-through initialisation leaves every embedding equal to the token lookup.
    const Tensor plain = model::embed_tokens(desk_model(), req.base.tokens);
    EXPECT_TRUE(req.embeddings.bit_equal(plain));
  }
}

TEST(NoisyRequest, SentinelRowsNeverNoised) {
  auto modules = init_modules(desk_model(), NoiseSet{16}, 4);
  Prng init(6);
  modules.embedder.combiner = random_tensor(128, 64, init);
  Prng rng(7);
  const auto prompt = random_tokens(12, rng);
  const auto req = build_noisy_request(desk_model(), prompt, desk_cache().draw(rng), modules.noise,
                                       modules.embedder, rng, NoiseMode::per_position);
  const Tensor plain = model::embed_tokens(desk_model(), req.base.tokens);
  for (std::size_t p : req.base.sentinel_positions) {
    const auto x = req.embeddings.row(p - 1), y = plain.row(p - 1);
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
  }
  for (std::size_t o : req.base.original_positions()) {
    const auto x = req.embeddings.row(o - 1), y = plain.row(o - 1);
    EXPECT_FALSE(std::equal(x.begin(), x.end(), y.begin()));
  }
  bool varied = false;
  for (NoiseId id : req.noise_cache) varied |= id != req.noise_cache[0];
  EXPECT_TRUE(varied);
}

TEST(VerifyNoisy, ConjunctionRule) {
  const auto modules = init_modules(desk_model(), NoiseSet{16}, 4);
  Prng rng(8);
  auto req = build_noisy_request(desk_model(), random_tokens(9, rng), desk_cache().draw(rng),
                                 modules.noise, modules.embedder, rng);
  const Tensor hidden = noisy_hidden(desk_model(), req);
  // Make the expected ids whatever the predictor reads off the honest run.
  const auto orig = req.base.original_positions();
  for (std::size_t a = 0; a < orig.size(); ++a) {
    req.noise_cache[a] = predict_noise(modules.predictor, hidden.row(orig[a] - 1));
  }
  const auto ok = verify_noisy(hidden, req, desk_cache(), modules, desk_model());
  EXPECT_TRUE(ok.verified);
  for (double d : ok.sentinel_check.per_sentinel_l1) EXPECT_EQ(d, 0.0);

  auto flipped = req;
  flipped.noise_cache[4] = (flipped.noise_cache[4] + 1) % 16;
  const auto noise_bad = verify_noisy(hidden, flipped, desk_cache(), modules, desk_model());
  EXPECT_TRUE(noise_bad.sentinel_check.verified);
  EXPECT_FALSE(noise_bad.noise_matches[4]);
  EXPECT_FALSE(noise_bad.verified);

  Tensor tampered = hidden;
  tampered(req.base.sentinel_positions[1] - 1, 0) += 1e-3;
  const auto sent_bad = verify_noisy(tampered, req, desk_cache(), modules, desk_model());
  EXPECT_FALSE(sent_bad.sentinel_check.verified);
  EXPECT_FALSE(sent_bad.verified);
  for (bool m : sent_bad.noise_matches) EXPECT_TRUE(m);
}

TEST(VerifyNoisy, RandomHiddenMatchesAtChance) {
  const auto modules = init_modules(desk_model(), NoiseSet{16}, 4);
  Prng rng(9);
  std::size_t hits = 0, total = 0;
  while (total < 10000) {
    const auto req = build_noisy_request(desk_model(), random_tokens(100, rng), desk_cache().draw(rng),
                                         modules.noise, modules.embedder, rng, NoiseMode::per_position);
    const Tensor hidden = random_tensor(req.base.length(), 64, rng);
    const auto r = verify_noisy(hidden, req, desk_cache(), modules.predictor, desk_model().unembedding);
    for (bool m : r.noise_matches) hits += m, ++total;
  }
  const double p = 1.0 / 16, se = std::sqrt(p * (1 - p) / total);
  EXPECT_NEAR(static_cast<double>(hits) / total, p, 3 * se);
}

TEST(VerifyNoisy, UntrainedPredictorAtChanceOnHonestRuns) {
  const auto modules = init_modules(desk_model(), NoiseSet{16}, 12);
  Prng rng(10);
  std::size_t hits = 0, total = 0;
  while (total < 10000) {
    const auto req = build_noisy_request(desk_model(), random_tokens(100, rng), desk_cache().draw(rng),
                                         modules.noise, modules.embedder, rng, NoiseMode::per_position);
    const auto r = verify_noisy(noisy_hidden(desk_model(), req), req, desk_cache(), modules, desk_model());
    EXPECT_TRUE(r.sentinel_check.verified);
    for (bool m : r.noise_matches) hits += m, ++total;
  }
  const double p = 1.0 / 16, se = std::sqrt(p * (1 - p) / total);
  EXPECT_NEAR(static_cast<double>(hits) / total, p, 3 * se);
}

TEST(NoiseModules, BaseBindingAndRoundTrip) {
  const auto modules = init_modules(desk_model(), NoiseSet{16}, 4);
  EXPECT_NO_THROW(check_base(modules, desk_model()));
  const auto other = model::init_params(model::ModelConfig{}, 2);
  EXPECT_THROW(check_base(modules, other), IntegrityError);

  const auto dir = std::filesystem::temp_directory_path() / "priveri_p2_modules";
  std::filesystem::create_directories(dir);
  save_noise_modules(dir / "noise.json", modules);
  const auto back = load_noise_modules(dir / "noise.json");
  EXPECT_EQ(back.base_model_hash, modules.base_model_hash);
  EXPECT_EQ(back.noise.size, 16u);
  EXPECT_TRUE(back.embedder.noise_embedding.bit_equal(modules.embedder.noise_embedding));
  EXPECT_TRUE(back.embedder.combiner.bit_equal(modules.embedder.combiner));
  EXPECT_TRUE(back.predictor.weight.bit_equal(modules.predictor.weight));

  auto blob = io::read_file(dir / "noise.bin");
  blob[100] ^= 1;
  io::write_file(dir / "noise.bin", blob);
  EXPECT_THROW(load_noise_modules(dir / "noise.json"), IntegrityError);

  Prng rng(11);
  const auto req = build_noisy_request(desk_model(), random_tokens(4, rng), desk_cache().draw(rng),
                                       modules.noise, modules.embedder, rng);
  EXPECT_THROW(verify_noisy(noisy_hidden(desk_model(), req), req, desk_cache(), modules, other),
               IntegrityError);
}

TEST(Training, ZeroStepsIsNoOpAndBaseStaysFrozen) {
  const auto base = model::init_params(tiny_config(), 3);
  const auto corpus = tiny_corpus();
  const auto modules = init_modules(base, NoiseSet{4}, 5);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.sequence_length = 8;
  const auto same = train_modules(base, modules, corpus.train, corpus.heldout, cfg);
  EXPECT_TRUE(same.embedder.combiner.bit_equal(modules.embedder.combiner));
  EXPECT_TRUE(same.predictor.weight.bit_equal(modules.predictor.weight));

  const auto hash_before = base.hash;
  cfg.steps = 5;
  TrainMetrics m;
  const auto trained = train_modules(base, modules, corpus.train, corpus.heldout, cfg, &m);
  EXPECT_EQ(base.hash, hash_before);
  EXPECT_EQ(model::compute_hash(base), hash_before);
  EXPECT_FALSE(trained.predictor.weight.bit_equal(modules.predictor.weight));
  EXPECT_TRUE(std::isfinite(m.final_train_loss));
  EXPECT_GT(m.base_log_loss, 0.0);
}

TEST(Training, ZeroLambdaLeavesPredictorToWeightDecay) {
  const auto base = model::init_params(tiny_config(), 3);
  const auto corpus = tiny_corpus();
  const auto modules = init_modules(base, NoiseSet{4}, 5);
  TrainConfig cfg;
  cfg.lambda = 0.0;
  cfg.steps = 10;
  cfg.sequence_length = 8;
  const auto trained = train_modules(base, modules, corpus.train, corpus.heldout, cfg);
  const double decay = std::pow(1.0 - cfg.lr * cfg.weight_decay, 10.0);
  for (std::size_t i = 0; i < modules.predictor.weight.size(); ++i) {
    EXPECT_NEAR(trained.predictor.weight[i], modules.predictor.weight[i] * decay,
                1e-12 * std::abs(modules.predictor.weight[i]));
  }
  for (double b : trained.predictor.bias.values()) EXPECT_EQ(b, 0.0);
  EXPECT_FALSE(trained.embedder.noise_embedding.bit_equal(modules.embedder.noise_embedding));
}

TEST(Training, JointObjectiveGradients) {
  const auto base = model::init_params(tiny_config(), 3);
  const auto corpus = tiny_corpus();
  auto modules = init_modules(base, NoiseSet{4}, 5);
  Prng rng(13);
  modules.embedder.combiner = nk::scale(random_tensor(32, 16, rng), 0.3);
  modules.embedder.bias = nk::scale(random_tensor(1, 16, rng), 0.1).reshaped({16});
  modules.predictor.weight = nk::scale(random_tensor(16, 4, rng), 0.1);
  modules.predictor.bias = nk::scale(random_tensor(1, 4, rng), 0.1).reshaped({4});
  const std::vector<model::Sequence> batch(corpus.train.begin(), corpus.train.begin() + 3);
  const std::vector<NoiseId> ids{0, 3, 1};
  const auto objective = [&](nk::GradTape& tape, std::span<const nk::Var> p) {
    return joint_objective(tape, base, p.subspan(0, 3), p.subspan(3, 2), batch, ids, 3.5, 2.0);
  };
  const std::vector<Tensor> params{modules.embedder.noise_embedding, modules.embedder.combiner,
                                   modules.embedder.bias, modules.predictor.weight,
                                   modules.predictor.bias};
  EXPECT_LE(nk::finite_difference_check(objective, params, 1e-4, 1, 200), 1e-6);
}

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "priveri/io/bytes.hpp"
#include "priveri/numerics/tensor.hpp"

namespace priveri::model {

using numerics::Tensor;
using TokenId = std::uint32_t;

/// Shape of the decoder-only transformer. hidden_dim must equal embed_dim.
struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_mult = 4;
  std::size_t max_positions = 512;
  double eps = 1e-6;

  std::size_t head_dim() const noexcept { return embed_dim / n_heads; }
  std::size_t mlp_dim() const noexcept { return embed_dim * mlp_mult; }

  /// ArgumentError on inconsistent fields.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor attn_norm;  // d
  Tensor wq, wk, wv, wo;  // d x d
  Tensor mlp_norm;  // d
  Tensor w_up;  // d x mlp
  Tensor w_down;  // mlp x d
};

/// Weights of the tiny transformer. `hash` is the SHA-256 of the canonical
/// weight blob; every function that produces a ModelParams leaves it sealed.
struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // V x d
  Tensor position_embedding;  // M x d
  std::vector<LayerParams> layers;
  Tensor final_norm;   // d
  Tensor unembedding;  // d x V
  io::Digest hash{};

  /// Visits every tensor in canonical order with its manifest name.
  template <typename F>
  void for_each_tensor(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    f(std::string("position_embedding"), position_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      LayerParams& l = layers[i];
      f(p + "attn_norm", l.attn_norm);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "mlp_norm", l.mlp_norm);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("unembedding"), unembedding);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& name, const Tensor& t) { f(name, t); });
  }

  std::string hash_hex() const { return io::to_hex(hash); }
};

/// Recomputes the content hash from the canonical blob.
io::Digest compute_hash(const ModelParams& params);
void seal(ModelParams& params);

/// Normal(0, 0.02) weights, output projections (wo, w_down) scaled by
/// 1/sqrt(2 * n_layers), norm gains at 1. Deterministic in (config, seed).
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Throws FormatError unless every tensor has the shape `config` implies.
void check_shapes(const ModelParams& params);

}  // namespace priveri::model

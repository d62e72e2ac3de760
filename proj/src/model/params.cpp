#include "priveri/model/params.hpp"

#include <cmath>

#include "priveri/error.hpp"
#include "priveri/io/bundle.hpp"
#include "priveri/numerics/prng.hpp"

namespace priveri::model {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ArgumentError("vocab_size must be >= 2");
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw ArgumentError("embed_dim must be a positive multiple of n_heads");
  }
  if (hidden_dim != embed_dim) throw ArgumentError("hidden_dim must equal embed_dim");
  if (n_layers < 1) throw ArgumentError("n_layers must be >= 1");
  if (mlp_mult < 1) throw ArgumentError("mlp_mult must be >= 1");
  if (max_positions < 1) throw ArgumentError("max_positions must be >= 1");
  if (!(eps > 0.0)) throw ArgumentError("eps must be positive");
}

io::Digest compute_hash(const ModelParams& params) {
  std::vector<io::NamedTensor> tensors;
  params.for_each_tensor(
      [&](const std::string& name, const Tensor& t) { tensors.push_back({name, t}); });
  return io::blob_digest(tensors);
}

void seal(ModelParams& params) { params.hash = compute_hash(params); }

namespace {

Tensor expected_shape(const ModelConfig& c, const std::string& name) {
  const std::size_t d = c.embed_dim;
  if (name == "token_embedding") return Tensor::zeros(c.vocab_size, d);
  if (name == "position_embedding") return Tensor::zeros(c.max_positions, d);
  if (name == "final_norm") return Tensor({d});
  if (name == "unembedding") return Tensor::zeros(c.hidden_dim, c.vocab_size);
  const std::string leaf = name.substr(name.rfind('.') + 1);
  if (leaf == "attn_norm" || leaf == "mlp_norm") return Tensor({d});
  if (leaf == "w_up") return Tensor::zeros(d, c.mlp_dim());
  if (leaf == "w_down") return Tensor::zeros(c.mlp_dim(), d);
  return Tensor::zeros(d, d);
}

}  // namespace

void check_shapes(const ModelParams& params) {
  if (params.layers.size() != params.config.n_layers) {
    throw FormatError("layer count does not match config");
  }
  params.for_each_tensor([&](const std::string& name, const Tensor& t) {
    if (t.shape() != expected_shape(params.config, name).shape()) {
      throw FormatError("tensor '" + name + "' has shape " + numerics::shape_string(t.shape()) +
                        ", config implies " +
                        numerics::shape_string(expected_shape(params.config, name).shape()));
    }
  });
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.layers.resize(config.n_layers);
  numerics::Prng rng(seed);
  const double std_base = 0.02;
  const double std_out = std_base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  p.for_each_tensor([&](const std::string& name, Tensor& t) {
    t = expected_shape(config, name);
    const std::string leaf = name.substr(name.rfind('.') + 1);
    if (leaf == "attn_norm" || leaf == "mlp_norm" || leaf == "final_norm") {
      for (double& v : t.values()) v = 1.0;
      return;
    }
    const double sd = (leaf == "wo" || leaf == "w_down") ? std_out : std_base;
    for (double& v : t.values()) v = sd * rng.normal();
  });
  seal(p);
  return p;
}

}  // namespace priveri::model

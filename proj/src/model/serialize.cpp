#include "priveri/model/serialize.hpp"

#include "priveri/error.hpp"

namespace priveri::model {

io::Json config_to_json(const ModelConfig& c) {
  return io::Json{{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
                  {"hidden_dim", c.hidden_dim}, {"n_layers", c.n_layers},
                  {"n_heads", c.n_heads},       {"mlp_mult", c.mlp_mult},
                  {"max_positions", c.max_positions}, {"eps", c.eps}};
}

ModelConfig config_from_json(const io::Json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.mlp_mult = j.at("mlp_mult").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.eps = j.at("eps").get<double>();
  } catch (const io::Json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

io::Bundle to_bundle(const ModelParams& params) {
  io::Bundle b;
  b.magic = kModelMagic;
  b.header["config"] = config_to_json(params.config);
  params.for_each_tensor(
      [&](const std::string& name, const Tensor& t) { b.tensors.push_back({name, t}); });
  return b;
}

ModelParams from_bundle(const io::Bundle& bundle) {
  if (!bundle.header.contains("config")) throw FormatError("model manifest has no config");
  ModelParams p;
  p.config = config_from_json(bundle.header.at("config"));
  p.layers.resize(p.config.n_layers);
  std::size_t expected = 0;
  p.for_each_tensor([&](const std::string&, const Tensor&) { ++expected; });
  if (bundle.tensors.size() != expected) {
    throw FormatError("model manifest lists " + std::to_string(bundle.tensors.size()) +
                      " tensors, config implies " + std::to_string(expected));
  }
  p.for_each_tensor([&](const std::string& name, Tensor& t) { t = bundle.tensor(name); });
  check_shapes(p);
  seal(p);
  return p;
}

io::EncodedBundle serialize(const ModelParams& params, const std::string& blob_name) {
  return io::encode_bundle(to_bundle(params), blob_name);
}

ModelParams deserialize(const std::string& manifest, std::span<const std::uint8_t> blob) {
  return from_bundle(io::decode_bundle(manifest, blob, kModelMagic));
}

void save_model(const std::filesystem::path& manifest_path, const ModelParams& params) {
  io::save_bundle(manifest_path, to_bundle(params));
}

ModelParams load_model(const std::filesystem::path& manifest_path) {
  return from_bundle(io::load_bundle(manifest_path, kModelMagic));
}

}  // namespace priveri::model

#include "priveri/cli/records.hpp"

#include <cmath>

#include "priveri/error.hpp"

namespace priveri::cli {

using numerics::Tensor;

namespace {

template <typename T>
Tensor ids_to_tensor(const std::vector<T>& ids) {
  std::vector<double> v(ids.begin(), ids.end());
  return Tensor::vector(std::move(v));
}

template <typename T>
std::vector<T> tensor_to_ids(const Tensor& t, const char* what) {
  if (t.rank() != 1) throw FormatError(std::string(what) + " must be a vector");
  std::vector<T> out;
  out.reserve(t.size());
  for (double x : t.values()) {
    if (!(x >= 0.0) || x != std::floor(x) || x > 4294967295.0) {
      throw FormatError(std::string(what) + " holds a non-integer id");
    }
    out.push_back(static_cast<T>(x));
  }
  return out;
}

template <typename T>
std::vector<T> json_array(const io::Json& header, const char* key) {
  try {
    return header.at(key).get<std::vector<T>>();
  } catch (const io::Json::exception& e) {
    throw FormatError(std::string("request record field ") + key + ": " + e.what());
  }
}

}  // namespace

privacy::SealedRequest RequestRecord::seal() const {
  return protocol == 2 ? privacy::seal(request) : privacy::seal(request.base);
}

io::Bundle to_bundle(const RequestRecord& r) {
  const auto& base = r.request.base;
  io::Bundle b;
  b.magic = kRequestMagic;
  b.header["protocol"] = r.protocol;
  b.header["model_hash"] = io::to_hex(r.model_hash);
  b.header["prompt_length"] = base.prompt_length;
  b.header["sentinel_positions"] = base.sentinel_positions;
  b.header["sentinel_sequence"] = base.sentinel_sequence;
  if (r.protocol == 2) {
    b.header["noise_mode"] =
        r.request.mode == protocol2::NoiseMode::shared ? "shared" : "per-position";
    b.header["noise_cache"] = r.request.noise_cache;
  }
  b.tensors.push_back({"tokens", ids_to_tensor(base.tokens)});
  b.tensors.push_back({"mask", base.mask});
  b.tensors.push_back({"position_ids", ids_to_tensor(base.position_ids)});
  if (r.protocol == 2) b.tensors.push_back({"embeddings", r.request.embeddings});
  return b;
}

RequestRecord request_from_bundle(const io::Bundle& b) {
  RequestRecord r;
  const auto& h = b.header;
  try {
    r.protocol = h.at("protocol").get<int>();
    r.model_hash = io::digest_from_hex(h.at("model_hash").get<std::string>());
    r.request.base.prompt_length = h.at("prompt_length").get<std::size_t>();
  } catch (const io::Json::exception& e) {
    throw FormatError(std::string("request record: ") + e.what());
  }
  if (r.protocol != 1 && r.protocol != 2) throw FormatError("request record: bad protocol");
  auto& base = r.request.base;
  base.sentinel_positions = json_array<std::size_t>(h, "sentinel_positions");
  base.sentinel_sequence = json_array<model::TokenId>(h, "sentinel_sequence");
  base.tokens = tensor_to_ids<model::TokenId>(b.tensor("tokens"), "tokens");
  base.mask = b.tensor("mask");
  base.position_ids = tensor_to_ids<model::PositionId>(b.tensor("position_ids"), "position_ids");

  const std::size_t L = base.tokens.size();
  const std::size_t K = base.sentinel_positions.size();
  if (K == 0 || base.sentinel_sequence.size() != K || base.prompt_length + K != L) {
    throw FormatError("request record: sentinel and prompt sizes disagree with the length");
  }
  if (base.mask.shape() != std::vector<std::size_t>{L, L} || base.position_ids.size() != L) {
    throw FormatError("request record: mask or position ids have the wrong shape");
  }
  for (std::size_t i = 0; i < K; ++i) {
    const std::size_t p = base.sentinel_positions[i];
    if (p < 1 || p > L || (i > 0 && p <= base.sentinel_positions[i - 1])) {
      throw FormatError("request record: sentinel positions must ascend within [1, L]");
    }
    if (base.tokens[p - 1] != base.sentinel_sequence[i]) {
      throw FormatError("request record: sentinel tokens disagree with their slots");
    }
  }
  if (r.protocol == 2) {
    std::string mode;
    try {
      mode = h.at("noise_mode").get<std::string>();
    } catch (const io::Json::exception& e) {
      throw FormatError(std::string("request record: ") + e.what());
    }
    if (mode == "shared") {
      r.request.mode = protocol2::NoiseMode::shared;
    } else if (mode == "per-position") {
      r.request.mode = protocol2::NoiseMode::per_position;
    } else {
      throw FormatError("request record: unknown noise mode '" + mode + "'");
    }
    r.request.noise_cache = json_array<protocol2::NoiseId>(h, "noise_cache");
    r.request.embeddings = b.tensor("embeddings");
    if (r.request.noise_cache.size() != base.prompt_length ||
        r.request.embeddings.rank() != 2 || r.request.embeddings.rows() != L) {
      throw FormatError("request record: noise fields disagree with the length");
    }
  }
  return r;
}

io::Digest request_digest(const RequestRecord& record) {
  return io::blob_digest(to_bundle(record).tensors);
}

io::Bundle to_bundle(const ResponseRecord& r) {
  io::Bundle b;
  b.magic = kResponseMagic;
  b.header["request_digest"] = io::to_hex(r.request_digest);
  b.header["label"] = r.label;
  b.tensors.push_back({"logits", r.logits});
  if (!r.hidden.empty()) b.tensors.push_back({"hidden", r.hidden});
  return b;
}

ResponseRecord response_from_bundle(const io::Bundle& b) {
  ResponseRecord r;
  try {
    r.request_digest = io::digest_from_hex(b.header.at("request_digest").get<std::string>());
    r.label = b.header.at("label").get<std::string>();
  } catch (const io::Json::exception& e) {
    throw FormatError(std::string("response record: ") + e.what());
  }
  r.logits = b.tensor("logits");
  for (const auto& t : b.tensors) {
    if (t.name == "hidden") r.hidden = t.tensor;
  }
  if (r.logits.rank() != 2) throw FormatError("response record: logits must be a matrix");
  if (!r.hidden.empty() && (r.hidden.rank() != 2 || r.hidden.rows() != r.logits.rows())) {
    throw FormatError("response record: hidden states disagree with the logits");
  }
  return r;
}

void save_request(const std::filesystem::path& manifest_path, const RequestRecord& record) {
  io::save_bundle(manifest_path, to_bundle(record));
}

RequestRecord load_request(const std::filesystem::path& manifest_path) {
  return request_from_bundle(io::load_bundle(manifest_path, kRequestMagic));
}

void save_response(const std::filesystem::path& manifest_path, const ResponseRecord& record) {
  io::save_bundle(manifest_path, to_bundle(record));
}

ResponseRecord load_response(const std::filesystem::path& manifest_path) {
  return response_from_bundle(io::load_bundle(manifest_path, kResponseMagic));
}

}  // namespace priveri::cli

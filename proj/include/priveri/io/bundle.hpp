#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "priveri/io/bytes.hpp"
#include "priveri/numerics/tensor.hpp"

namespace priveri::io {

using Json = nlohmann::ordered_json;

struct NamedTensor {
  std::string name;
  numerics::Tensor tensor;
};

/// Two-artifact container used by every model-like file: a UTF-8 JSON
/// manifest and a raw blob of little-endian f64 tensors concatenated in
/// manifest order.
///
/// Manifest layout (keys in this order):
///   magic, <header keys...>, blob, blob_bytes, blob_sha256,
///   tensors: [{name, shape, offset}]
struct Bundle {
  std::string magic;
  Json header = Json::object();
  std::vector<NamedTensor> tensors;

  const numerics::Tensor& tensor(const std::string& name) const;
};

struct EncodedBundle {
  std::string manifest;
  std::vector<std::uint8_t> blob;
};

/// `blob_name` is recorded in the manifest so the pair can be located on disk.
EncodedBundle encode_bundle(const Bundle& bundle, const std::string& blob_name);

/// Checks, in order: magic (FormatError), blob length against the tensor
/// index (FormatError), then the blob's SHA-256 (IntegrityError).
Bundle decode_bundle(const std::string& manifest, std::span<const std::uint8_t> blob,
                     const std::string& expected_magic);

/// Blob goes next to the manifest as <manifest stem>.bin.
void save_bundle(const std::filesystem::path& manifest_path, const Bundle& bundle);
Bundle load_bundle(const std::filesystem::path& manifest_path, const std::string& expected_magic);

/// SHA-256 of the blob that encode_bundle would produce.
Digest blob_digest(const std::vector<NamedTensor>& tensors);

}  // namespace priveri::io

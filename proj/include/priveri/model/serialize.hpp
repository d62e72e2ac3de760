#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "priveri/io/bundle.hpp"
#include "priveri/model/params.hpp"

namespace priveri::model {

inline constexpr const char* kModelMagic = "PVMODEL1";

io::Json config_to_json(const ModelConfig& config);
/// FormatError on missing or mistyped fields, ArgumentError if invalid.
ModelConfig config_from_json(const io::Json& j);

io::Bundle to_bundle(const ModelParams& params);
/// Rebuilds and re-seals params; FormatError if tensors disagree with the
/// config in the header.
ModelParams from_bundle(const io::Bundle& bundle);

io::EncodedBundle serialize(const ModelParams& params, const std::string& blob_name = "model.bin");
ModelParams deserialize(const std::string& manifest, std::span<const std::uint8_t> blob);

void save_model(const std::filesystem::path& manifest_path, const ModelParams& params);
ModelParams load_model(const std::filesystem::path& manifest_path);

}  // namespace priveri::model

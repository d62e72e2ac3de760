#include "priveri/io/bundle.hpp"

#include "priveri/error.hpp"

namespace priveri::io {

namespace {

std::vector<std::uint8_t> make_blob(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  for (const auto& t : tensors) {
    for (double v : t.tensor.values()) w.put_f64(v);
  }
  return w.take();
}

}  // namespace

const numerics::Tensor& Bundle::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw FormatError("bundle has no tensor named '" + name + "'");
}

Digest blob_digest(const std::vector<NamedTensor>& tensors) { return sha256(make_blob(tensors)); }

EncodedBundle encode_bundle(const Bundle& bundle, const std::string& blob_name) {
  EncodedBundle out;
  out.blob = make_blob(bundle.tensors);

  Json m = Json::object();
  m["magic"] = bundle.magic;
  for (const auto& [key, value] : bundle.header.items()) m[key] = value;
  m["blob"] = blob_name;
  m["blob_bytes"] = out.blob.size();
  m["blob_sha256"] = to_hex(sha256(out.blob));
  Json index = Json::array();
  std::size_t offset = 0;
  for (const auto& t : bundle.tensors) {
    index.push_back(Json{{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += t.tensor.size() * sizeof(double);
  }
  m["tensors"] = std::move(index);
  out.manifest = m.dump(2) + "\n";
  return out;
}

Bundle decode_bundle(const std::string& manifest, std::span<const std::uint8_t> blob,
                     const std::string& expected_magic) {
  Json m;
  try {
    m = Json::parse(manifest);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    Bundle b;
    b.magic = m.at("magic").get<std::string>();
    if (b.magic != expected_magic) {
      throw FormatError("bad magic '" + b.magic + "', expected '" + expected_magic + "'");
    }
    const auto declared = m.at("blob_bytes").get<std::size_t>();
    std::size_t expected = 0;
    for (const auto& entry : m.at("tensors")) {
      auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      numerics::Tensor probe(shape);
      if (entry.at("offset").get<std::size_t>() != expected) {
        throw FormatError("tensor '" + entry.at("name").get<std::string>() +
                          "' offset does not follow its predecessor");
      }
      expected += probe.size() * sizeof(double);
    }
    if (declared != expected || blob.size() != expected) {
      throw FormatError("blob length " + std::to_string(blob.size()) + " does not match index (" +
                        std::to_string(expected) + " bytes expected)");
    }
    const Digest want = digest_from_hex(m.at("blob_sha256").get<std::string>());
    if (sha256(blob) != want) {
      throw IntegrityError("blob SHA-256 does not match manifest");
    }
    ByteReader r(blob);
    for (const auto& entry : m.at("tensors")) {
      numerics::Tensor t(entry.at("shape").get<std::vector<std::size_t>>());
      for (double& v : t.values()) v = r.get_f64();
      b.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
    }
    for (const auto& [key, value] : m.items()) {
      if (key == "magic" || key == "blob" || key == "blob_bytes" || key == "blob_sha256" ||
          key == "tensors") {
        continue;
      }
      b.header[key] = value;
    }
    return b;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

void save_bundle(const std::filesystem::path& manifest_path, const Bundle& bundle) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  const auto enc = encode_bundle(bundle, blob_path.filename().string());
  write_text(manifest_path, enc.manifest);
  write_file(blob_path, enc.blob);
}

Bundle load_bundle(const std::filesystem::path& manifest_path, const std::string& expected_magic) {
  const std::string manifest = read_text(manifest_path);
  std::string blob_name;
  try {
    blob_name = Json::parse(manifest).at("blob").get<std::string>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  const auto blob = read_file(manifest_path.parent_path() / blob_name);
  return decode_bundle(manifest, blob, expected_magic);
}

}  // namespace priveri::io

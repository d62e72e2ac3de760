#pragma once

#include <filesystem>
#include <string>

#include "priveri/io/bundle.hpp"
#include "priveri/privacy/privacy.hpp"
#include "priveri/protocol2/protocol2.hpp"

// Request and response records exchanged between separate invocations of the
// tool. Both use the manifest + blob convention of model files.
namespace priveri::cli {

inline constexpr const char* kRequestMagic = "PVREQ1";
inline constexpr const char* kResponseMagic = "PVRESP1";

/// The user's side of one request. The provider only ever receives seal() of
/// it; the remaining fields (sentinel slots, noise ids) stay with the user.
struct RequestRecord {
  int protocol = 1;
  io::Digest model_hash{};
  /// Protocol 1 leaves embeddings and noise ids empty.
  protocol2::NoisyRequest request;

  privacy::SealedRequest seal() const;
};

struct ResponseRecord {
  io::Digest request_digest{};  // blob digest of the answered request
  std::string label;
  numerics::Tensor logits;
  numerics::Tensor hidden;  // protocol 2 only
};

io::Bundle to_bundle(const RequestRecord& record);
/// FormatError when fields disagree with each other.
RequestRecord request_from_bundle(const io::Bundle& bundle);
io::Digest request_digest(const RequestRecord& record);

io::Bundle to_bundle(const ResponseRecord& record);
ResponseRecord response_from_bundle(const io::Bundle& bundle);

void save_request(const std::filesystem::path& manifest_path, const RequestRecord& record);
RequestRecord load_request(const std::filesystem::path& manifest_path);
void save_response(const std::filesystem::path& manifest_path, const ResponseRecord& record);
ResponseRecord load_response(const std::filesystem::path& manifest_path);

}  // namespace priveri::cli

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "priveri/io/bundle.hpp"

namespace priveri::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRejected = 1;  // verification or integrity failure
inline constexpr int kExitUsage = 2;     // usage, format or argument error

/// Every setting a subcommand may read. Config-file keys are the flag names
/// with '-' replaced by '_' (e.g. "cache_size" for --cache-size).
struct RunConfig {
  std::string model;
  std::string cache;
  std::string noise_params;
  std::string request;
  std::string response;
  std::string out;

  int protocol = 1;
  std::string mode = "structural";
  std::string strategy = "honest";
  std::string noise_mode = "shared";
  std::string substitute = "low-rank:63";
  std::string kind;

  std::size_t n = 14;
  std::size_t k = 3;
  std::size_t cache_size = 100;
  std::size_t noise_set = 16;
  std::size_t drop = 1;
  std::size_t trials = 1000;
  std::size_t workers = 1;
  std::size_t sequences = 1000;
  std::size_t batch = 8;
  std::vector<std::uint32_t> prompt;  // empty: N random tokens under the seed
  std::vector<double> accuracies;
  std::uint64_t length = 131;
  std::uint64_t bytes = 4;

  double tol = 1e-9;
  double lambda = 3.5;
  // Defaults depend on the subcommand unless set explicitly.
  double lr = 0.0;
  std::size_t steps = 0;
  std::uint64_t seed = 1;

  /// Keys set by the config file or a flag.
  std::set<std::string> given;

  bool has(const std::string& key) const { return given.count(key) != 0; }
  double lr_or(double fallback) const { return has("lr") ? lr : fallback; }
  std::size_t steps_or(std::size_t fallback) const { return has("steps") ? steps : fallback; }
  /// --seed / config, then PRIVERI_SEED, then 1. ArgumentError on a bad env value.
  std::uint64_t resolved_seed() const;
};

/// Unknown keys produce a warning on `warnings` (when given); malformed JSON or
/// a mistyped value is a FormatError.
RunConfig config_from_json(const io::Json& j, std::ostream* warnings = nullptr);
RunConfig load_config(const std::filesystem::path& path, std::ostream* warnings = nullptr);

/// Runs one subcommand. `args` excludes the program name. Reports go to `out`
/// as JSON; diagnostics go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace priveri::cli

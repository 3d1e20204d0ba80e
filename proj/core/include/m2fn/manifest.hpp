#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace m2fn {

// 16 lowercase hex digits of a 64-bit FNV-1a digest.
std::string digest_hex(std::uint64_t digest);

// FNV-1a over the file's bytes.
std::string file_digest(const std::filesystem::path& path);

// Digest of every regular file under `root` keyed by its generic relative
// path. A file path yields a single entry keyed by its file name. Relative
// paths listed in `exclude` are skipped.
std::map<std::string, std::string> tree_digests(const std::filesystem::path& root,
                                                const std::vector<std::string>& exclude = {});

// Record written next to every CLI output. `options` holds the resolved
// value list of each option of the subcommand.
struct Manifest {
  std::string tool = "m2fn";
  std::string version;
  std::string command;
  std::map<std::string, std::vector<std::string>> options;
  std::uint64_t seed = 0;
  nlohmann::json config;    // effective configuration
  nlohmann::json versions;  // tool and library versions
  std::map<std::string, std::map<std::string, std::string>> inputs;  // option -> digests
  std::map<std::string, std::string> outputs;

  static constexpr const char* kFileName = "manifest.json";

  void write(const std::filesystem::path& dir) const;
  static Manifest read(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);

struct DigestDiff {
  std::vector<std::string> missing;     // expected but not produced
  std::vector<std::string> unexpected;  // produced but not expected
  std::vector<std::string> changed;
  bool empty() const { return missing.empty() && unexpected.empty() && changed.empty(); }
};

DigestDiff compare_digests(const std::map<std::string, std::string>& expected,
                           const std::map<std::string, std::string>& actual);

}  // namespace m2fn

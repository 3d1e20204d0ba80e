#include "m2fn/manifest.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

namespace fs = std::filesystem;

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("digest: cannot open " + path.string());
  std::array<char, 1 << 16> buf;
  std::uint64_t h = fnv1a64("");
  while (in) {
    in.read(buf.data(), buf.size());
    h = fnv1a64(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
  }
  return digest_hex(h);
}

std::map<std::string, std::string> tree_digests(const fs::path& root,
                                                const std::vector<std::string>& exclude) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(root)) {
    out[root.filename().generic_string()] = file_digest(root);
    return out;
  }
  if (!fs::is_directory(root)) throw DataError("digest: no such file or directory " + root.string());
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), root).generic_string();
    if (std::find(exclude.begin(), exclude.end(), rel) != exclude.end()) continue;
    out[rel] = file_digest(entry.path());
  }
  return out;
}

void to_json(nlohmann::json& j, const Manifest& m) {
  j = nlohmann::json{{"tool", m.tool},       {"version", m.version}, {"command", m.command},
                     {"options", m.options}, {"seed", m.seed},       {"config", m.config},
                     {"versions", m.versions}, {"inputs", m.inputs}, {"outputs", m.outputs}};
}

void from_json(const nlohmann::json& j, Manifest& m) {
  j.at("tool").get_to(m.tool);
  j.at("version").get_to(m.version);
  j.at("command").get_to(m.command);
  j.at("options").get_to(m.options);
  j.at("seed").get_to(m.seed);
  m.config = j.value("config", nlohmann::json::object());
  m.versions = j.value("versions", nlohmann::json::object());
  j.at("inputs").get_to(m.inputs);
  j.at("outputs").get_to(m.outputs);
}

void Manifest::write(const fs::path& dir) const {
  std::ofstream out(dir / kFileName);
  if (!out) throw DataError("manifest: cannot write " + (dir / kFileName).string());
  out << nlohmann::json(*this).dump(2) << '\n';
}

Manifest Manifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
}

DigestDiff compare_digests(const std::map<std::string, std::string>& expected,
                           const std::map<std::string, std::string>& actual) {
  DigestDiff diff;
  for (const auto& [name, digest] : expected) {
    const auto it = actual.find(name);
    if (it == actual.end()) diff.missing.push_back(name);
    else if (it->second != digest) diff.changed.push_back(name);
  }
  for (const auto& [name, digest] : actual) {
    if (!expected.contains(name)) diff.unexpected.push_back(name);
  }
  return diff;
}

}  // namespace m2fn

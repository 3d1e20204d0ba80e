#include "m2fn/aux.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

using nlohmann::json;

AttributeSpec AttributeSpec::categorical(std::string name, std::vector<std::string> levels,
                                         bool ordinal) {
  AttributeSpec s;
  s.name = std::move(name);
  s.kind = Kind::kCategorical;
  s.levels = std::move(levels);
  s.ordinal = ordinal;
  return s;
}

AttributeSpec AttributeSpec::embedding(std::string name, std::size_t dim) {
  AttributeSpec s;
  s.name = std::move(name);
  s.kind = Kind::kEmbedding;
  s.dim = dim;
  return s;
}

std::optional<std::size_t> AttributeSpec::level_index(const std::string& level) const {
  const auto it = std::find(levels.begin(), levels.end(), level);
  if (it == levels.end()) return std::nullopt;
  return static_cast<std::size_t>(it - levels.begin());
}

std::size_t AuxSchema::dim_aux() const {
  std::size_t d = 0;
  for (const AttributeSpec& a : attributes) d += a.width();
  return d;
}

const AttributeSpec* AuxSchema::find(const std::string& name) const {
  for (const AttributeSpec& a : attributes) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::vector<std::string> AuxSchema::names() const {
  std::vector<std::string> out;
  for (const AttributeSpec& a : attributes) out.push_back(a.name);
  return out;
}

std::map<std::string, std::size_t> AuxSchema::offsets() const {
  std::map<std::string, std::size_t> out;
  std::size_t offset = 0;
  for (const auto kind : {AttributeSpec::Kind::kCategorical, AttributeSpec::Kind::kEmbedding}) {
    for (const AttributeSpec& a : attributes) {
      if (a.kind != kind) continue;
      out[a.name] = offset;
      offset += a.width();
    }
  }
  return out;
}

void AuxSchema::validate() const {
  std::set<std::string> seen;
  for (const AttributeSpec& a : attributes) {
    if (a.name.empty()) throw SchemaError("schema: empty attribute name");
    if (!seen.insert(a.name).second) throw SchemaError("schema: duplicate attribute " + a.name);
    if (a.width() == 0) throw SchemaError("schema: attribute " + a.name + " has zero width");
    if (a.kind == AttributeSpec::Kind::kCategorical) {
      const std::set<std::string> unique(a.levels.begin(), a.levels.end());
      if (unique.size() != a.levels.size()) {
        throw SchemaError("schema: attribute " + a.name + " repeats a level");
      }
    }
  }
}

namespace {

std::vector<std::string> numbered(const std::string& prefix, int first, int last) {
  std::vector<std::string> out;
  for (int i = first; i <= last; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace

AuxSchema AuxSchema::real_ad_default() {
  using A = AttributeSpec;
  AuxSchema s;
  s.attributes = {
      A::categorical("gender", {"male", "female"}),
      A::categorical("age", {"<18", "18-24", "25-34", "35-44", "45-54", "55+"}, true),
      A::categorical("month", numbered("m", 1, 12), true),
      A::categorical("weekday", {"mon", "tue", "wed", "thu", "fri", "sat", "sun"}, true),
      A::categorical("time", {"00-04", "04-08", "08-12", "12-16", "16-20", "20-24"}, true),
      A::categorical("position", numbered("slot", 1, 8)),
      A::categorical("category2", numbered("c2_", 1, 8)),
      A::categorical("category3", numbered("c3_", 1, 20)),
      A::categorical("dominant_color", {"black", "white", "red", "orange", "yellow", "green",
                                        "cyan", "blue", "purple", "gray"}),
      A::embedding("title", 768),
      A::embedding("description", 768),
      A::embedding("ocr", 768),
  };
  return s;
}

void to_json(json& j, const AuxSchema& s) {
  j = json::array();
  for (const AttributeSpec& a : s.attributes) {
    json e{{"name", a.name}};
    if (a.kind == AttributeSpec::Kind::kCategorical) {
      e["kind"] = "categorical";
      e["levels"] = a.levels;
      e["ordinal"] = a.ordinal;
    } else {
      e["kind"] = "embedding";
      e["dim"] = a.dim;
    }
    j.push_back(std::move(e));
  }
}

void from_json(const json& j, AuxSchema& s) {
  s.attributes.clear();
  for (const json& e : j) {
    const std::string kind = e.at("kind").get<std::string>();
    if (kind == "categorical") {
      s.attributes.push_back(AttributeSpec::categorical(
          e.at("name").get<std::string>(), e.at("levels").get<std::vector<std::string>>(),
          e.value("ordinal", false)));
    } else if (kind == "embedding") {
      s.attributes.push_back(
          AttributeSpec::embedding(e.at("name").get<std::string>(), e.at("dim").get<std::size_t>()));
    } else {
      throw SchemaError("schema: unknown attribute kind '" + kind + "'");
    }
  }
  s.validate();
}

void EmbeddingStore::put(const std::string& text, std::vector<double> vector) {
  if (vector.size() != dim_) {
    throw ShapeError("embedding store: vector for '" + text + "' has width " +
                     std::to_string(vector.size()) + ", store dim is " + std::to_string(dim_));
  }
  vectors_[text] = std::move(vector);
}

std::span<const double> EmbeddingStore::get(const std::string& text) const {
  const auto it = vectors_.find(text);
  if (it == vectors_.end()) throw StoreError("embedding store: no vector for '" + text + "'");
  return it->second;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void EmbeddingStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::string bytes;
  bytes.reserve(vectors_.size() * dim_ * sizeof(double));
  json entries = json::array();
  for (const auto& [text, v] : vectors_) {
    entries.push_back(text);
    bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  std::ofstream bin(dir / "vectors.bin", std::ios::binary);
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw StoreError("embedding store: cannot write " + (dir / "vectors.bin").string());
  const json index{{"format", "m2fn-embeddings"}, {"version", 1},     {"dim", dim_},
                   {"count", vectors_.size()},    {"entries", entries}, {"fnv1a64", hex64(fnv1a64(bytes))}};
  std::ofstream idx(dir / "index.json");
  idx << index.dump(1) << '\n';
  if (!idx) throw StoreError("embedding store: cannot write " + (dir / "index.json").string());
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& dir) {
  std::ifstream idx(dir / "index.json");
  if (!idx) throw StoreError("embedding store: missing " + (dir / "index.json").string());
  json index;
  try {
    index = json::parse(idx);
  } catch (const json::exception& e) {
    throw StoreError(std::string("embedding store: bad index: ") + e.what());
  }
  std::ifstream bin(dir / "vectors.bin", std::ios::binary);
  if (!bin) throw StoreError("embedding store: missing " + (dir / "vectors.bin").string());
  std::ostringstream buf;
  buf << bin.rdbuf();
  const std::string bytes = buf.str();
  try {
    const std::size_t dim = index.at("dim").get<std::size_t>();
    const auto entries = index.at("entries").get<std::vector<std::string>>();
    if (index.at("count").get<std::size_t>() != entries.size()) {
      throw StoreError("embedding store: count does not match entries");
    }
    if (bytes.size() != entries.size() * dim * sizeof(double)) {
      throw StoreError("embedding store: vectors.bin has " + std::to_string(bytes.size()) +
                       " bytes, expected " + std::to_string(entries.size() * dim * sizeof(double)));
    }
    if (index.at("fnv1a64").get<std::string>() != hex64(fnv1a64(bytes))) {
      throw StoreError("embedding store: checksum mismatch");
    }
    EmbeddingStore store(dim);
    const auto* values = reinterpret_cast<const double*>(bytes.data());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      store.put(entries[i], std::vector<double>(values + i * dim, values + (i + 1) * dim));
    }
    return store;
  } catch (const json::exception& e) {
    throw StoreError(std::string("embedding store: bad index: ") + e.what());
  }
}

std::vector<double> encode_aux(const AttributeMap& attributes, const AuxSchema& schema,
                               const EmbeddingStore* store) {
  std::vector<double> out(schema.dim_aux(), 0.0);
  const auto offsets = schema.offsets();
  for (const AttributeSpec& a : schema.attributes) {
    const auto it = attributes.find(a.name);
    if (it == attributes.end()) throw SchemaError("encode_aux: missing attribute '" + a.name + "'");
    const std::size_t offset = offsets.at(a.name);
    if (a.kind == AttributeSpec::Kind::kCategorical) {
      const auto index = a.level_index(it->second);
      if (!index) {
        throw SchemaError("encode_aux: unknown level '" + it->second + "' for attribute '" +
                          a.name + "'");
      }
      out[offset + *index] = 1.0;
    } else {
      if (!store) throw StoreError("encode_aux: no embedding store for attribute '" + a.name + "'");
      if (store->dim() != a.dim) {
        throw SchemaError("encode_aux: store dim " + std::to_string(store->dim()) +
                          " does not match attribute '" + a.name + "' dim " +
                          std::to_string(a.dim));
      }
      const auto v = store->get(it->second);
      std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
    }
  }
  return out;
}

}  // namespace m2fn

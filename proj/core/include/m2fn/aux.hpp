#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2fn/records.hpp"

namespace m2fn {

struct AttributeSpec {
  enum class Kind { kCategorical, kEmbedding };

  std::string name;
  Kind kind = Kind::kCategorical;
  std::vector<std::string> levels;  // categorical only, in one-hot order
  bool ordinal = false;             // categorical only
  std::size_t dim = 0;              // embedding only

  static AttributeSpec categorical(std::string name, std::vector<std::string> levels,
                                   bool ordinal = false);
  static AttributeSpec embedding(std::string name, std::size_t dim);

  std::size_t width() const { return kind == Kind::kCategorical ? levels.size() : dim; }
  // Index of `level`, or nullopt.
  std::optional<std::size_t> level_index(const std::string& level) const;
};

// Ordered attribute list. Encoded vectors hold every categorical block (in
// list order) followed by every embedding block (in list order).
struct AuxSchema {
  std::vector<AttributeSpec> attributes;

  std::size_t dim_aux() const;
  const AttributeSpec* find(const std::string& name) const;
  std::vector<std::string> names() const;
  // Offset of each attribute's block in the encoded vector.
  std::map<std::string, std::size_t> offsets() const;
  // Throws SchemaError on duplicate names, empty level lists or zero dims.
  void validate() const;

  // Nine categorical attributes plus three 768-wide text slots (2383 wide).
  static AuxSchema real_ad_default();
};

void to_json(nlohmann::json& j, const AuxSchema& s);
void from_json(const nlohmann::json& j, AuxSchema& s);

// Text -> fixed-width vector lookup. On disk it is a directory holding
// `index.json` (dim, entries, checksum) and `vectors.bin` (raw little-endian
// doubles in entry order).
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::size_t dim = 768) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& text) const { return vectors_.contains(text); }

  // Throws ShapeError if the vector width differs from dim().
  void put(const std::string& text, std::vector<double> vector);
  // Throws StoreError for unknown text.
  std::span<const double> get(const std::string& text) const;

  void save(const std::filesystem::path& dir) const;
  // Throws StoreError on a missing file, size mismatch or checksum mismatch.
  static EmbeddingStore load(const std::filesystem::path& dir);

 private:
  std::size_t dim_;
  std::map<std::string, std::vector<double>> vectors_;
};

// Encodes an instance's attributes under `schema`. Unknown categorical
// levels and missing attributes throw SchemaError; missing embeddings throw
// StoreError. `store` may be null when the schema has no embedding slots.
std::vector<double> encode_aux(const AttributeMap& attributes, const AuxSchema& schema,
                               const EmbeddingStore* store);

}  // namespace m2fn

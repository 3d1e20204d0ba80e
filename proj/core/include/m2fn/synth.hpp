#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <vector>

#include "m2fn/aux.hpp"
#include "m2fn/pipeline.hpp"
#include "m2fn/records.hpp"

namespace m2fn::synth {

// CTR effect of each level of one campaign attribute.
struct AttributeEffect {
  std::string name;
  std::vector<std::string> levels;
  std::vector<double> effects;
  bool ordinal = false;
};

// How effects combine into a campaign CTR: base + sum(e) or base * prod(1 + e).
enum class Combine { kAdditive, kMultiplicative };

struct GenConfig {
  std::size_t n_images = 500;
  std::size_t campaigns_per_image = 4;
  std::uint64_t n_records = 500000;
  std::uint64_t seed = 0;
  std::size_t image_size = 16;
  double base_ctr = 0.2;
  Combine combine = Combine::kAdditive;
  std::vector<AttributeEffect> attributes = default_attributes();
  // Per palette entry, for the background color.
  std::array<double, 10> color_effects = default_color_effects();
  // Applied with a positive sign when the text block sits in the half
  // matching the campaign's `position`, negative in the other half.
  double text_saliency = 0.06;
  double text_probability = 0.75;
  // Images draw their title from a pool of this many (one advertiser, many
  // creatives).
  std::size_t n_titles = 100;
  std::size_t title_dim = 8;
  // Title effect is title_scale * tanh(<embedding, direction>).
  double title_scale = 0.02;
  double pixel_noise = 0.05;

  static std::vector<AttributeEffect> default_attributes();
  static std::array<double, 10> default_color_effects();
  // All effects zero: every campaign has CTR base_ctr.
  static GenConfig null_model();
  // Throws ConfigError when levels and effects disagree, when an attribute is
  // missing `position`, or when the extreme combination of effects leaves
  // (0, 1).
  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct TextBlock {
  bool present = false;
  bool top = false;
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // half-open rows/cols

  bool contains(std::size_t y, std::size_t x) const {
    return present && y >= y0 && y < y1 && x >= x0 && x < x1;
  }
};

struct ImageTruth {
  std::string id;
  std::size_t background = 0;  // palette index
  TextBlock text;
  std::string title;
  double title_effect = 0.0;
};

struct Campaign {
  std::size_t image = 0;
  AttributeMap attributes;  // campaign attributes plus `title`
  double ctr = 0.0;
  std::uint64_t first_record = 0;
  std::uint64_t impressions = 0;
};

struct GroundTruth {
  GenConfig config;
  std::vector<ImageTruth> images;
  std::vector<Campaign> campaigns;  // record ranges are contiguous and in order

  // Planted text-region mask of image `i`, row-major H*W.
  std::vector<std::uint8_t> mask(std::size_t i) const;
  // Campaign owning record index r.
  std::size_t campaign_of(std::uint64_t r) const;
};

void to_json(nlohmann::json& j, const GroundTruth& t);
void from_json(const nlohmann::json& j, GroundTruth& t);

struct Generated {
  GroundTruth truth;
  ImageSet images;
  EmbeddingStore titles;
};

Generated generate(const GenConfig& config);

// Record r for r in [first, last). Each record depends only on (truth, r),
// so shards may be produced independently and concatenated.
void emit_records(const GroundTruth& truth, std::uint64_t first, std::uint64_t last,
                  const RecordSink& sink);
ImpressionRecord make_record(const GroundTruth& truth, std::uint64_t r);

// Campaign attributes plus dominant_color and the title slot.
AuxSchema schema(const GenConfig& config);

// Writes records.jsonl, images/<id>.ppm, titles/ (an embedding store),
// truth.json and schema.json under `dir`.
void write(const Generated& data, const std::filesystem::path& dir);

// Spearman correlation of true versus empirical CTR over the instances that
// map to a campaign (matched on image id and campaign attributes).
double oracle_eval(const GroundTruth& truth, std::span<const AggregatedInstance> instances);

// True CTR of the campaign behind an instance; throws DataError if none.
double true_ctr(const GroundTruth& truth, const AggregatedInstance& instance);

}  // namespace m2fn::synth

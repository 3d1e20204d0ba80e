#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m2fn/aux.hpp"
#include "m2fn/image.hpp"
#include "m2fn/objectives.hpp"
#include "m2fn/records.hpp"
#include "m2fn/train.hpp"

namespace m2fn {

// Fixed CTR buckets: edges geometric over [lo, hi], representative values at
// the geometric bucket centers.
struct BucketGrid {
  std::vector<double> edges;   // size buckets + 1
  std::vector<double> values;  // size buckets

  std::size_t size() const { return values.size(); }
  // Bucket holding `ctr` (clamped into the grid range).
  std::size_t bucket_of(double ctr) const;

  static BucketGrid geometric(double lo, double hi, std::size_t buckets);
  // Ten buckets over [1e-6, 1].
  static BucketGrid ctr_default();
};

// Log-normal with median clamp(y, 1e-6, 1) and log-scale sigma = c / sqrt(w),
// integrated over the grid's buckets and renormalized.
ScoreDistribution ctr_to_distribution(double y, std::uint64_t w,
                                      const BucketGrid& grid = BucketGrid::ctr_default(),
                                      double c = 1.0);

using ImageSet = std::map<std::string, Image>;

// Sets `attribute` on every instance to the palette name of its image's
// dominant color. Images are processed on up to `threads` workers. Returns
// the warnings raised per image.
std::vector<std::string> annotate_dominant_colors(std::vector<AggregatedInstance>& instances,
                                                  const ImageSet& images,
                                                  const DominantColorOptions& options = {},
                                                  const std::string& attribute = "dominant_color",
                                                  std::size_t threads = 1);

struct BuildOptions {
  std::size_t image_size = 16;
  BucketGrid grid = BucketGrid::ctr_default();
  double sigma_scale = 1.0;
  // Divide loss weights by their mean so they average 1.
  bool normalize_weights = false;
};

// Model-ready samples: images resized to image_size, aux encoded under
// `schema`, targets y and bucketized distributions, weights w. Images are
// ordered by id. Throws DataError for an instance whose image is missing.
Dataset build_dataset(std::span<const AggregatedInstance> instances, const AuxSchema& schema,
                      const EmbeddingStore* store, const ImageSet& images,
                      const BuildOptions& options = {});

// Hash split keyed on image id, so every exposure of an image lands on the
// same side. Returns (train, test).
std::pair<Dataset, Dataset> split_by_image(const Dataset& data, double test_fraction,
                                           std::uint64_t seed);

}  // namespace m2fn

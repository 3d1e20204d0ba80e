#include "m2fn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <thread>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

BucketGrid BucketGrid::geometric(double lo, double hi, std::size_t buckets) {
  if (!(lo > 0.0 && hi > lo) || buckets == 0) {
    throw ContractError("bucket grid: need 0 < lo < hi and at least one bucket");
  }
  BucketGrid g;
  const double step = std::log(hi / lo) / static_cast<double>(buckets);
  for (std::size_t k = 0; k <= buckets; ++k) {
    g.edges.push_back(k == buckets ? hi : lo * std::exp(step * static_cast<double>(k)));
  }
  for (std::size_t k = 0; k < buckets; ++k) g.values.push_back(std::sqrt(g.edges[k] * g.edges[k + 1]));
  return g;
}

BucketGrid BucketGrid::ctr_default() { return geometric(1e-6, 1.0, 10); }

std::size_t BucketGrid::bucket_of(double ctr) const {
  const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, ctr);
  return static_cast<std::size_t>(it - (edges.begin() + 1));
}

namespace {

// P(a < Z <= b) for standard normal Z, using the tail on the side away from
// zero to keep relative accuracy.
double normal_mass(double a, double b) {
  if (a >= 0.0) return 0.5 * (std::erfc(a / std::sqrt(2.0)) - std::erfc(b / std::sqrt(2.0)));
  if (b <= 0.0) return 0.5 * (std::erfc(-b / std::sqrt(2.0)) - std::erfc(-a / std::sqrt(2.0)));
  return 1.0 - 0.5 * std::erfc(-a / std::sqrt(2.0)) - 0.5 * std::erfc(b / std::sqrt(2.0));
}

}  // namespace

ScoreDistribution ctr_to_distribution(double y, std::uint64_t w, const BucketGrid& grid, double c) {
  if (w == 0) throw ContractError("ctr_to_distribution: w must be at least 1");
  if (!(y >= 0.0 && y <= 1.0)) throw ContractError("ctr_to_distribution: y must be in [0,1]");
  if (!(c > 0.0)) throw ContractError("ctr_to_distribution: c must be positive");
  const double median = std::clamp(y, 1e-6, 1.0);
  const double sigma = c / std::sqrt(static_cast<double>(w));
  const double mu = std::log(median);
  ScoreDistribution d{std::vector<double>(grid.size()), grid.values};
  double total = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    d.probs[k] = normal_mass((std::log(grid.edges[k]) - mu) / sigma,
                             (std::log(grid.edges[k + 1]) - mu) / sigma);
    total += d.probs[k];
  }
  if (!(total > 0.0)) throw NumericError("ctr_to_distribution: no mass inside the grid");
  for (double& p : d.probs) p /= total;
  return d;
}

std::vector<std::string> annotate_dominant_colors(std::vector<AggregatedInstance>& instances,
                                                  const ImageSet& images,
                                                  const DominantColorOptions& options,
                                                  const std::string& attribute,
                                                  std::size_t threads) {
  std::vector<std::string> ids;
  for (const AggregatedInstance& inst : instances) ids.push_back(inst.image_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (const std::string& id : ids) {
    if (!images.contains(id)) throw DataError("dominant color: no image for id '" + id + "'");
  }
  std::vector<std::string> color(ids.size());
  std::vector<std::vector<std::string>> warnings(ids.size());
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < ids.size(); i += stride) {
      DominantColorOptions o = options;
      o.seed = derive_seed(options.seed, ids[i]);
      const DominantColorResult r = dominant_color(images.at(ids[i]), o);
      color[i] = default_palette()[r.palette_index].name;
      for (const std::string& w : r.warnings) warnings[i].push_back(ids[i] + ": " + w);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, ids.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (std::thread& th : pool) th.join();
  }
  std::map<std::string, std::string> by_id;
  for (std::size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = color[i];
  for (AggregatedInstance& inst : instances) inst.attributes[attribute] = by_id.at(inst.image_id);
  std::vector<std::string> flat;
  for (auto& w : warnings) flat.insert(flat.end(), w.begin(), w.end());
  return flat;
}

Dataset build_dataset(std::span<const AggregatedInstance> instances, const AuxSchema& schema,
                      const EmbeddingStore* store, const ImageSet& images,
                      const BuildOptions& options) {
  schema.validate();
  if (options.image_size == 0) throw ContractError("build_dataset: image_size must be positive");
  Dataset d;
  d.channels = 3;
  d.image_size = options.image_size;
  d.dim_aux = schema.dim_aux();
  d.bucket_values = options.grid.values;

  std::map<std::string, std::size_t> image_index;
  for (const AggregatedInstance& inst : instances) image_index.emplace(inst.image_id, 0);
  for (auto& [id, index] : image_index) {
    const auto it = images.find(id);
    if (it == images.end()) throw DataError("build_dataset: no image for id '" + id + "'");
    if (it->second.channels != 3) throw ShapeError("build_dataset: image '" + id + "' is not RGB");
    index = d.images.size();
    d.images.push_back(resize(it->second, options.image_size, options.image_size).data);
    d.image_ids.push_back(id);
  }
  double mean_w = 0.0;
  for (const AggregatedInstance& inst : instances) mean_w += static_cast<double>(inst.w);
  if (!instances.empty()) mean_w /= static_cast<double>(instances.size());
  for (const AggregatedInstance& inst : instances) {
    Sample s;
    s.image = image_index.at(inst.image_id);
    s.aux = encode_aux(inst.attributes, schema, store);
    s.y = inst.y;
    s.w = static_cast<double>(inst.w);
    if (options.normalize_weights) s.w /= mean_w;
    s.target_dist = ctr_to_distribution(inst.y, inst.w, options.grid, options.sigma_scale).probs;
    s.key = inst.key();
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::pair<Dataset, Dataset> split_by_image(const Dataset& data, double test_fraction,
                                           std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw ContractError("split_by_image: test_fraction must be in [0,1]");
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const std::string& id = data.image_ids.at(data.samples[i].image);
    (counter_uniform(seed, fnv1a64(id), 0x5b1d) < test_fraction ? test : train).push_back(i);
  }
  return {data.subset(train), data.subset(test)};
}

}  // namespace m2fn

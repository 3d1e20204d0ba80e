#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "m2fn/model.hpp"
#include "m2fn/pipeline.hpp"
#include "m2fn/synth.hpp"
#include "m2fn/train.hpp"

namespace m2fn {

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

// End-to-end synthetic run: generate, aggregate, annotate dominant colors,
// build, split by image, then train model rows.
struct SynthExperiment {
  synth::GenConfig data;
  std::uint64_t min_impressions = 100;
  double test_fraction = 0.2;
  BuildOptions build;
  ModelConfig model;  // image_size and dim_aux are filled in by prepare()
  TrainOptions train;

  // 16x16 images, three conv stages (8, 16, 32 channels; the last without
  // pooling), widths 32/32/64, SGD lr 0.03 with weight decay 1e-3, batch 32,
  // 80 epochs, normalized loss weights.
  static SynthExperiment desk(std::uint64_t seed);
  // 32x32 images, 250 images, 250k records, 30 epochs; the attention probe.
  static SynthExperiment saliency(std::uint64_t seed);
};

void to_json(nlohmann::json& j, const SynthExperiment& e);
void from_json(const nlohmann::json& j, SynthExperiment& e);

struct PreparedData {
  synth::Generated generated;
  std::vector<AggregatedInstance> instances;
  Dataset train;
  Dataset test;
  ModelConfig model;  // experiment model config completed for this data
};

PreparedData prepare(const SynthExperiment& experiment, std::size_t threads = 1);

struct AttentionOverlap {
  double overlap = 0.0;   // mean masked fraction of the top cells' footprint
  double baseline = 0.0;  // mean masked fraction of the whole image
  std::size_t samples = 0;
};

// For each sample whose image carries text, ranks the attention cells of the
// final feature map, keeps the top ceil(top_fraction * cells) of them and
// measures how much of their pixel footprint lies inside the planted text
// mask. Cell (i, j) of an e x e map covers rows [i*s/e, (i+1)*s/e) and the
// matching columns of the s x s image. Requires att on and the data image
// size to equal the generator's.
AttentionOverlap attention_overlap(Model& model, const Dataset& data,
                                   const synth::GroundTruth& truth, double top_fraction = 0.1);

}  // namespace m2fn

#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "m2fn/model.hpp"
#include "m2fn/objectives.hpp"

namespace m2fn {

// One model-ready example. Images are shared across samples by index.
struct Sample {
  std::size_t image = 0;
  std::vector<double> aux;
  double y = 0.0;                  // scalar target (CTR)
  double w = 1.0;                  // loss weight (impressions)
  std::vector<double> target_dist; // bucketized target for distribution heads
  std::string key;                 // provenance, e.g. the aggregation key
};

struct Dataset {
  std::size_t channels = 3;
  std::size_t image_size = 0;
  std::vector<std::vector<double>> images;  // each channels*size*size, [C,H,W]
  std::vector<std::string> image_ids;
  std::size_t dim_aux = 0;
  std::vector<double> bucket_values;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  // Gathers a mini-batch into ([B,C,H,W], [B,dim_aux]).
  std::pair<Tensor, Tensor> batch(const std::vector<std::size_t>& indices) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  std::vector<Prediction> targets(HeadKind head) const;
};

enum class LossKind { kWeightedMse, kKld, kEmd };

LossKind parse_loss(const std::string& name);
std::string loss_name(LossKind kind);

struct OptimizerSpec {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;  // L2 coefficient added to every gradient
};

struct TrainOptions {
  LossKind loss = LossKind::kWeightedMse;
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  // Evaluate on the held-out set every `eval_every` epochs (0 = last only).
  std::size_t eval_every = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<MetricReport> eval;
};

struct TrainReport {
  // Full-pass train-mode loss before the first and after the last update;
  // running statistics are left untouched by these passes.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<EpochRecord> epochs;
  std::optional<MetricReport> final_eval;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

// SGD with classical momentum: v = mu * v + g + wd * p; p -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(NamedTensors params, OptimizerSpec spec);
  void zero_grad();
  void step();

 private:
  NamedTensors params_;
  OptimizerSpec spec_;
  std::vector<std::vector<double>> velocity_;
};

// Loss of one batch through the differentiable loss matching `kind`.
Tensor batch_loss(const Tensor& output, const Dataset& data,
                  const std::vector<std::size_t>& indices, LossKind kind);

// Mean train-mode loss over the whole set. Parameters and running stats are
// left unchanged.
double dataset_loss(Model& model, const Dataset& data, LossKind kind, std::size_t batch_size);

TrainReport train(Model& model, const Dataset& train_set, const TrainOptions& options,
                  const Dataset* eval_set = nullptr);

std::vector<Prediction> predict(Model& model, const Dataset& data, std::size_t batch_size = 256);
MetricReport evaluate_model(Model& model, const Dataset& data, std::size_t batch_size = 256);

struct AblationRow {
  Toggles toggles;
  MetricReport metrics;
  TrainReport report;
};

// Trains every row of the module grid with the base config's seed and returns
// held-out metrics per row. Rows run on up to `threads` workers.
std::vector<AblationRow> ablate_grid(const ModelConfig& base, const Dataset& train_set,
                                     const Dataset& test_set, const TrainOptions& options,
                                     const std::vector<Toggles>& rows = ablation_rows(),
                                     std::size_t threads = 1);

// Worker cap from M2FN_THREADS (default 1, never above hardware threads).
std::size_t thread_cap();

}  // namespace m2fn

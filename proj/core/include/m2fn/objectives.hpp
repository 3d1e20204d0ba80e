#pragma once

#include <cstddef>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "m2fn/tensor.hpp"

namespace m2fn {

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kNormalizationTolerance = 1e-6;

// Bucketed score histogram. `values` are the representative scores of the
// buckets (1..10 for rating data, CTR bucket centers for click data).
struct ScoreDistribution {
  std::vector<double> probs;
  std::vector<double> values;

  // Throws ContractError unless probs are nonnegative, sum to 1 within
  // kNormalizationTolerance, and values are strictly increasing.
  void validate() const;
  static std::vector<double> rating_values(std::size_t buckets = 10);
};

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

Moments dist_moments(const ScoreDistribution& d);

// (1/N) * sum w_n (pred_n - target_n)^2
double weighted_mse(std::span<const double> pred, std::span<const double> target,
                    std::span<const double> weights);

// (1/N) * sum_n KL(target_n || pred_n), pred floor-clamped at kLogClamp.
double kld_loss(std::span<const ScoreDistribution> target,
                std::span<const ScoreDistribution> pred);

// (mean_k |CDF_p(k) - CDF_q(k)|^r)^(1/r)
double emd_loss(const ScoreDistribution& p, const ScoreDistribution& q, int r = 2);

// Pearson correlation of average ranks. Throws DegenerateDataError on
// constant input or N < 2.
double sprc(std::span<const double> a, std::span<const double> b);
double lcc(std::span<const double> a, std::span<const double> b);

// Average ranks, 1-based; ties share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> x);

using Prediction = std::variant<double, ScoreDistribution>;

struct MetricReport {
  double sprc_mean = 0.0;
  double lcc_mean = 0.0;
  std::optional<double> sprc_std;
  std::optional<double> lcc_std;
};

// Scalar predictions are correlated directly; distributions through their
// means and, separately, their standard deviations. The std entries are left
// empty when either side's stds are constant.
MetricReport evaluate(std::span<const Prediction> preds, std::span<const Prediction> targets);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

// Differentiable losses over model outputs.
// pred: [N] or [N,1].
Tensor weighted_mse_loss(const Tensor& pred, std::span<const double> target,
                         std::span<const double> weights);
// pred: [N,K] softmax output; target: N*K row-major probabilities.
Tensor kld_loss(const Tensor& pred, std::span<const double> target);
// Mean over samples of the per-sample EMD.
Tensor emd_loss(const Tensor& pred, std::span<const double> target, int r = 2);

}  // namespace m2fn

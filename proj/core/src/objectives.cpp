#include "m2fn/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <string>

#include "m2fn/errors.hpp"

namespace m2fn {

namespace {

void check_normalized(std::span<const double> probs, const char* what) {
  double total = 0.0;
  for (double p : probs) {
    if (p < 0.0 || !std::isfinite(p)) {
      throw ContractError(std::string(what) + ": negative or non-finite bucket mass");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > kNormalizationTolerance) {
    throw ContractError(std::string(what) + ": buckets sum to " + std::to_string(total) +
                        ", not 1");
  }
}

double pearson(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw ContractError(std::string(what) + ": length mismatch " + std::to_string(a.size()) +
                        " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw DegenerateDataError(std::string(what) + ": needs at least 2 samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw DegenerateDataError(std::string(what) + ": constant input");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace

void ScoreDistribution::validate() const {
  if (probs.empty() || probs.size() != values.size()) {
    throw ContractError("score distribution: probs/values length mismatch");
  }
  check_normalized(probs, "score distribution");
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (!(values[k] > values[k - 1])) {
      throw ContractError("score distribution: bucket values must be strictly increasing");
    }
  }
}

std::vector<double> ScoreDistribution::rating_values(std::size_t buckets) {
  std::vector<double> v(buckets);
  std::iota(v.begin(), v.end(), 1.0);
  return v;
}

Moments dist_moments(const ScoreDistribution& d) {
  d.validate();
  Moments m;
  for (std::size_t k = 0; k < d.probs.size(); ++k) m.mean += d.probs[k] * d.values[k];
  double var = 0.0;
  for (std::size_t k = 0; k < d.probs.size(); ++k) {
    var += d.probs[k] * (d.values[k] - m.mean) * (d.values[k] - m.mean);
  }
  m.std = std::sqrt(var);
  return m;
}

double weighted_mse(std::span<const double> pred, std::span<const double> target,
                    std::span<const double> weights) {
  if (pred.size() != target.size() || pred.size() != weights.size()) {
    throw ContractError("weighted_mse: length mismatch");
  }
  if (pred.empty()) throw ContractError("weighted_mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("weighted_mse: negative weight");
    const double d = pred[i] - target[i];
    acc += weights[i] * d * d;
  }
  return acc / static_cast<double>(pred.size());
}

double kld_loss(std::span<const ScoreDistribution> target,
                std::span<const ScoreDistribution> pred) {
  if (target.size() != pred.size() || target.empty()) {
    throw ContractError("kld_loss: length mismatch or empty input");
  }
  double acc = 0.0;
  for (std::size_t n = 0; n < target.size(); ++n) {
    check_normalized(target[n].probs, "kld_loss target");
    check_normalized(pred[n].probs, "kld_loss prediction");
    if (target[n].probs.size() != pred[n].probs.size()) {
      throw ContractError("kld_loss: bucket count mismatch");
    }
    for (std::size_t k = 0; k < target[n].probs.size(); ++k) {
      const double t = target[n].probs[k];
      if (t == 0.0) continue;
      acc += t * std::log(t / std::max(pred[n].probs[k], kLogClamp));
    }
  }
  return acc / static_cast<double>(target.size());
}

double emd_loss(const ScoreDistribution& p, const ScoreDistribution& q, int r) {
  if (r < 1) throw ContractError("emd_loss: r must be >= 1");
  check_normalized(p.probs, "emd_loss p");
  check_normalized(q.probs, "emd_loss q");
  if (p.probs.size() != q.probs.size()) throw ContractError("emd_loss: bucket count mismatch");
  double cp = 0.0, cq = 0.0, acc = 0.0;
  for (std::size_t k = 0; k < p.probs.size(); ++k) {
    cp += p.probs[k];
    cq += q.probs[k];
    acc += std::pow(std::abs(cp - cq), r);
  }
  return std::pow(acc / static_cast<double>(p.probs.size()), 1.0 / r);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double sprc(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("sprc: length mismatch");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb, "sprc");
}

double lcc(std::span<const double> a, std::span<const double> b) {
  return pearson(a, b, "lcc");
}

MetricReport evaluate(std::span<const Prediction> preds, std::span<const Prediction> targets) {
  if (preds.size() != targets.size()) throw ContractError("evaluate: length mismatch");
  if (preds.empty()) throw ContractError("evaluate: no predictions");
  const bool scalar = std::holds_alternative<double>(preds.front());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (std::holds_alternative<double>(preds[i]) != scalar ||
        std::holds_alternative<double>(targets[i]) != scalar) {
      throw ContractError("evaluate: mixed head kinds");
    }
  }
  MetricReport report;
  if (scalar) {
    std::vector<double> p, t;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      p.push_back(std::get<double>(preds[i]));
      t.push_back(std::get<double>(targets[i]));
    }
    report.sprc_mean = sprc(p, t);
    report.lcc_mean = lcc(p, t);
    return report;
  }
  std::vector<double> pm, ps, tm, ts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Moments a = dist_moments(std::get<ScoreDistribution>(preds[i]));
    const Moments b = dist_moments(std::get<ScoreDistribution>(targets[i]));
    pm.push_back(a.mean);
    ps.push_back(a.std);
    tm.push_back(b.mean);
    ts.push_back(b.std);
  }
  report.sprc_mean = sprc(pm, tm);
  report.lcc_mean = lcc(pm, tm);
  try {
    report.sprc_std = sprc(ps, ts);
    report.lcc_std = lcc(ps, ts);
  } catch (const DegenerateDataError&) {
    report.sprc_std.reset();
    report.lcc_std.reset();
  }
  return report;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"sprc_mean", r.sprc_mean}, {"lcc_mean", r.lcc_mean}};
  if (r.sprc_std) j["sprc_std"] = *r.sprc_std;
  if (r.lcc_std) j["lcc_std"] = *r.lcc_std;
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.sprc_mean = j.at("sprc_mean").get<double>();
  r.lcc_mean = j.at("lcc_mean").get<double>();
  if (j.contains("sprc_std")) r.sprc_std = j.at("sprc_std").get<double>();
  if (j.contains("lcc_std")) r.lcc_std = j.at("lcc_std").get<double>();
}

Tensor weighted_mse_loss(const Tensor& pred, std::span<const double> target,
                         std::span<const double> weights) {
  const std::size_t n = pred.dim(0);
  if (pred.size() != n || target.size() != n || weights.size() != n) {
    throw ContractError("weighted_mse_loss: prediction must be [N] or [N,1] matching targets");
  }
  std::vector<double> tv(target.begin(), target.end());
  std::vector<double> wv(weights.begin(), weights.end());
  Tensor result = Tensor::scalar(weighted_mse(pred.values(), tv, wv));
  Tape::record("weighted_mse", {pred}, result, [pred, result, tv, wv]() mutable {
    const double g = result.grad()[0];
    auto dp = pred.mutable_grad();
    const auto pv = pred.values();
    const double inv = 2.0 / static_cast<double>(tv.size());
    for (std::size_t i = 0; i < tv.size(); ++i) dp[i] += g * inv * wv[i] * (pv[i] - tv[i]);
  });
  check_finite(result, "weighted_mse");
  return result;
}

Tensor kld_loss(const Tensor& pred, std::span<const double> target) {
  if (pred.rank() != 2 || target.size() != pred.size()) {
    throw ContractError("kld_loss: prediction must be [N,K] matching target size");
  }
  const std::size_t n = pred.dim(0), k = pred.dim(1);
  const auto pv = pred.values();
  std::vector<double> tv(target.begin(), target.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    check_normalized(std::span(tv).subspan(i * k, k), "kld_loss target");
    check_normalized(pv.subspan(i * k, k), "kld_loss prediction");
    for (std::size_t j = 0; j < k; ++j) {
      const double t = tv[i * k + j];
      if (t == 0.0) continue;
      acc += t * std::log(t / std::max(pv[i * k + j], kLogClamp));
    }
  }
  Tensor result = Tensor::scalar(acc / static_cast<double>(n));
  Tape::record("kld_loss", {pred}, result, [pred, result, tv, n]() mutable {
    const double g = result.grad()[0] / static_cast<double>(n);
    auto dp = pred.mutable_grad();
    const auto pv = pred.values();
    for (std::size_t i = 0; i < tv.size(); ++i) {
      if (tv[i] == 0.0 || pv[i] <= kLogClamp) continue;
      dp[i] -= g * tv[i] / pv[i];
    }
  });
  check_finite(result, "kld_loss");
  return result;
}

Tensor emd_loss(const Tensor& pred, std::span<const double> target, int r) {
  if (r < 1) throw ContractError("emd_loss: r must be >= 1");
  if (pred.rank() != 2 || target.size() != pred.size()) {
    throw ContractError("emd_loss: prediction must be [N,K] matching target size");
  }
  const std::size_t n = pred.dim(0), k = pred.dim(1);
  const auto pv = pred.values();
  std::vector<double> diff(n * k);  // CDF_pred - CDF_target
  std::vector<double> per_sample(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    check_normalized(target.subspan(i * k, k), "emd_loss target");
    check_normalized(pv.subspan(i * k, k), "emd_loss prediction");
    double cp = 0.0, ct = 0.0, s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      cp += pv[i * k + j];
      ct += target[i * k + j];
      diff[i * k + j] = cp - ct;
      s += std::pow(std::abs(cp - ct), r);
    }
    per_sample[i] = std::pow(s / static_cast<double>(k), 1.0 / r);
    acc += per_sample[i];
  }
  Tensor result = Tensor::scalar(acc / static_cast<double>(n));
  Tape::record("emd_loss", {pred}, result, [pred, result, diff, per_sample, n, k, r]() mutable {
    const double g = result.grad()[0] / static_cast<double>(n);
    auto dp = pred.mutable_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double e = per_sample[i];
      if (e == 0.0) continue;
      // d e / d diff_j = e^(1-r) |d_j|^(r-1) sign(d_j) / K
      const double coef = std::pow(e, 1.0 - r) / static_cast<double>(k);
      double tail = 0.0;
      for (std::size_t j = k; j-- > 0;) {
        const double d = diff[i * k + j];
        const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        tail += coef * std::pow(std::abs(d), r - 1) * sign;
        dp[i * k + j] += g * tail;
      }
    }
  });
  check_finite(result, "emd_loss");
  return result;
}

}  // namespace m2fn

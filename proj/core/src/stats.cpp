#include "m2fn/stats.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "m2fn/errors.hpp"

namespace m2fn {

using nlohmann::json;

double f_survival(double f, double d1, double d2) {
  if (!(d1 > 0.0 && d2 > 0.0)) throw ContractError("f_survival: degrees of freedom must be positive");
  if (!(f > 0.0)) return 1.0;
  if (std::isinf(f)) return 0.0;
  return boost::math::ibeta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

double chi2_survival(double x, double df) {
  if (!(df > 0.0)) throw ContractError("chi2_survival: df must be positive");
  if (!(x > 0.0)) return 1.0;
  return boost::math::gamma_q(df / 2.0, x / 2.0);
}

AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw ContractError("anova: need at least two groups");
  std::size_t n = 0;
  double grand = 0.0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw ContractError("anova: every group needs at least two samples");
    n += g.size();
    grand += std::accumulate(g.begin(), g.end(), 0.0);
  }
  grand /= static_cast<double>(n);
  double ss_between = 0.0, ss_within = 0.0;
  for (const auto& g : groups) {
    const double mean = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    ss_between += static_cast<double>(g.size()) * (mean - grand) * (mean - grand);
    for (double v : g) ss_within += (v - mean) * (v - mean);
  }
  if (!(ss_within > 0.0)) throw DegenerateDataError("anova: zero within-group variance");
  AnovaResult r;
  r.df_between = groups.size() - 1;
  r.df_within = n - groups.size();
  r.f = (ss_between / static_cast<double>(r.df_between)) /
        (ss_within / static_cast<double>(r.df_within));
  r.p = f_survival(r.f, static_cast<double>(r.df_between), static_cast<double>(r.df_within));
  return r;
}

namespace {

// log(1 + exp(eta)) without overflow.
double softplus(double eta) { return std::max(eta, 0.0) + std::log1p(std::exp(-std::abs(eta))); }

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

double log_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& s, const Eigen::VectorXd& n,
                      const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = x * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += s[i] * eta[i] - n[i] * softplus(eta[i]);
  return ll;
}

}  // namespace

LogitResult logistic_fit(const std::vector<std::vector<double>>& rows,
                         std::span<const double> successes, std::span<const double> trials,
                         const LogitOptions& options) {
  if (rows.empty()) throw ContractError("logistic_fit: empty design");
  if (successes.size() != rows.size() || trials.size() != rows.size()) {
    throw ContractError("logistic_fit: outcome count does not match design rows");
  }
  const auto cols = static_cast<Eigen::Index>(rows.front().size());
  if (cols == 0) throw ContractError("logistic_fit: design has no columns");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), cols);
  Eigen::VectorXd s(x.rows()), n(x.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ContractError("logistic_fit: ragged design");
    for (Eigen::Index j = 0; j < cols; ++j) x(i, j) = row[static_cast<std::size_t>(j)];
    s[i] = successes[static_cast<std::size_t>(i)];
    n[i] = trials[static_cast<std::size_t>(i)];
    if (!(n[i] >= 0.0) || !(s[i] >= 0.0) || s[i] > n[i]) {
      throw ContractError("logistic_fit: need 0 <= successes <= trials");
    }
    total += n[i];
  }
  if (!(total > 0.0)) throw ContractError("logistic_fit: no trials");
  {
    Eigen::MatrixXd weighted = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (n[i] == 0.0) weighted.row(i).setZero();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(weighted);
    qr.setThreshold(1e-10);
    if (qr.rank() < cols) {
      throw DesignError("logistic_fit: design has rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(cols) + " columns");
    }
  }

  LogitResult r;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(cols);
  double ll = log_likelihood(x, s, n, beta);
  r.ll_history.push_back(ll);
  Eigen::MatrixXd hessian(cols, cols);
  const auto derivatives = [&](Eigen::VectorXd& grad) {
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd resid(x.rows()), weight(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double p = sigmoid(eta[i]);
      resid[i] = s[i] - n[i] * p;
      weight[i] = n[i] * p * (1.0 - p);
    }
    grad = x.transpose() * resid;
    hessian = x.transpose() * weight.asDiagonal() * x;
  };
  Eigen::VectorXd grad;
  derivatives(grad);
  r.gradient_norm = grad.norm() / total;
  while (!(r.converged = r.gradient_norm < options.tol) && r.iterations < options.max_iter) {
    const Eigen::VectorXd step = hessian.ldlt().solve(grad);
    double t = 1.0, next_ll = ll;
    Eigen::VectorXd next = beta;
    for (int halvings = 0; halvings < 40; ++halvings, t *= 0.5) {
      next = beta + t * step;
      next_ll = log_likelihood(x, s, n, next);
      if (next_ll >= ll) break;
    }
    if (next_ll < ll) break;  // no ascent possible at working precision
    beta = next;
    ll = next_ll;
    r.ll_history.push_back(ll);
    ++r.iterations;
    derivatives(grad);
    r.gradient_norm = grad.norm() / total;
  }

  r.log_likelihood = ll;
  const Eigen::MatrixXd cov = hessian.ldlt().solve(Eigen::MatrixXd::Identity(cols, cols));
  r.coefficients.assign(beta.data(), beta.data() + cols);
  r.covariance.resize(static_cast<std::size_t>(cols * cols));
  for (Eigen::Index i = 0; i < cols; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) r.covariance[static_cast<std::size_t>(i * cols + j)] = cov(i, j);
  }
  for (Eigen::Index j = 0; j < cols; ++j) {
    r.separation = r.separation || std::abs(beta[j]) > options.separation_bound;
    const double se = std::sqrt(std::max(cov(j, j), 0.0));
    r.std_errors.push_back(se);
    r.z.push_back(se > 0.0 ? beta[j] / se : 0.0);
  }
  if (!r.separation) {
    for (double z : r.z) r.p_values.push_back(std::clamp(std::erfc(std::abs(z) / std::sqrt(2.0)), 0.0, 1.0));
  }
  return r;
}

LogitResult logistic_fit(const std::vector<std::vector<double>>& x, std::span<const double> y,
                         const LogitOptions& options) {
  for (double v : y) {
    if (v != 0.0 && v != 1.0) throw ContractError("logistic_fit: outcomes must be 0 or 1");
  }
  const std::vector<double> ones(y.size(), 1.0);
  return logistic_fit(x, y, ones, options);
}

std::optional<WaldTest> wald_test(const LogitResult& fit, std::span<const std::size_t> indices) {
  if (fit.separation || indices.empty()) return std::nullopt;
  const std::size_t cols = fit.coefficients.size();
  const auto k = static_cast<Eigen::Index>(indices.size());
  Eigen::VectorXd b(k);
  Eigen::MatrixXd v(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const std::size_t i = indices[static_cast<std::size_t>(a)];
    if (i >= cols) throw ContractError("wald_test: coefficient index out of range");
    b[a] = fit.coefficients[i];
    for (Eigen::Index c = 0; c < k; ++c) {
      v(a, c) = fit.covariance[i * cols + indices[static_cast<std::size_t>(c)]];
    }
  }
  WaldTest w;
  w.statistic = b.dot(v.ldlt().solve(b));
  w.df = indices.size();
  w.p = std::clamp(chi2_survival(w.statistic, static_cast<double>(w.df)), 0.0, 1.0);
  return w;
}

double AttributeTest::min_p() const {
  double p = 1.0;
  if (anova) p = std::min(p, anova->p);
  if (wald) p = std::min(p, wald->p);
  return p;
}

std::vector<std::string> SelectionReport::selected() const {
  std::vector<std::string> out;
  for (const AttributeTest& t : tests) {
    if (t.selected) out.push_back(t.attribute);
  }
  return out;
}

std::string SelectionReport::text_table() const {
  std::ostringstream out;
  const auto p_text = [](std::optional<double> p) {
    if (!p) return std::string("-");
    std::ostringstream s;
    s << std::scientific << std::setprecision(3) << *p;
    return s.str();
  };
  out << std::left << std::setw(16) << "attribute" << std::right << std::setw(7) << "levels"
      << std::setw(12) << "anova F" << std::setw(12) << "anova p" << std::setw(12) << "wald chi2"
      << std::setw(12) << "wald p" << "  " << "kept" << '\n';
  for (const AttributeTest& t : tests) {
    std::ostringstream f, chi;
    f << std::fixed << std::setprecision(3);
    chi << std::fixed << std::setprecision(3);
    if (t.anova) f << t.anova->f; else f << "-";
    if (t.wald) chi << t.wald->statistic; else chi << "-";
    out << std::left << std::setw(16) << t.attribute << std::right << std::setw(7) << t.levels.size()
        << std::setw(12) << f.str()
        << std::setw(12) << p_text(t.anova ? std::optional(t.anova->p) : std::nullopt)
        << std::setw(12) << chi.str()
        << std::setw(12) << p_text(t.wald ? std::optional(t.wald->p) : std::nullopt) << "  "
        << (t.selected ? "yes" : "no");
    if (!t.note.empty()) out << "  (" << t.note << ")";
    out << '\n';
  }
  out << "alpha " << alpha << ", " << instances << " instances, " << impressions << " impressions";
  if (!logit_converged) out << ", logistic fit did not converge";
  if (logit_separation) out << ", separation flagged";
  out << '\n';
  return out.str();
}

void to_json(json& j, const AnovaResult& r) {
  j = json{{"F", r.f}, {"df_between", r.df_between}, {"df_within", r.df_within}, {"p", r.p}};
}

void to_json(json& j, const LogitResult& r) {
  j = json{{"coefficients", r.coefficients}, {"std_errors", r.std_errors}, {"z", r.z},
           {"p_values", r.p_values},         {"log_likelihood", r.log_likelihood},
           {"gradient_norm", r.gradient_norm}, {"iterations", r.iterations},
           {"converged", r.converged},       {"separation", r.separation}};
}

void to_json(json& j, const SelectionReport& r) {
  json tests = json::array();
  for (const AttributeTest& t : r.tests) {
    json e{{"attribute", t.attribute}, {"levels", t.levels}, {"reference", t.reference},
           {"selected", t.selected}, {"anova", nullptr}, {"wald", nullptr}};
    if (t.anova) e["anova"] = *t.anova;
    if (t.wald) e["wald"] = json{{"chi2", t.wald->statistic}, {"df", t.wald->df}, {"p", t.wald->p}};
    if (!t.note.empty()) e["note"] = t.note;
    tests.push_back(std::move(e));
  }
  j = json{{"alpha", r.alpha},
           {"instances", r.instances},
           {"impressions", r.impressions},
           {"logit_converged", r.logit_converged},
           {"logit_separation", r.logit_separation},
           {"selected", r.selected()},
           {"tests", std::move(tests)}};
}

SelectionReport select_attributes(std::span<const AggregatedInstance> instances,
                                  const AuxSchema& schema, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("select_attributes: alpha must be in (0,1)");
  SelectionReport report;
  report.alpha = alpha;
  report.instances = instances.size();
  for (const AggregatedInstance& inst : instances) report.impressions += inst.w;

  struct Column {
    std::size_t test;
    std::string level;
  };
  std::vector<Column> columns;
  for (const AttributeSpec& spec : schema.attributes) {
    if (spec.kind != AttributeSpec::Kind::kCategorical) continue;
    AttributeTest t;
    t.attribute = spec.name;
    std::map<std::string, std::vector<double>> ctr;
    std::map<std::string, std::uint64_t> impressions;
    bool missing = false;
    for (const AggregatedInstance& inst : instances) {
      const auto it = inst.attributes.find(spec.name);
      if (it == inst.attributes.end()) {
        missing = true;
        continue;
      }
      ctr[it->second].push_back(inst.y);
      impressions[it->second] += inst.w;
    }
    for (const std::string& level : spec.levels) {
      if (ctr.contains(level)) t.levels.push_back(level);
    }
    for (const auto& [level, values] : ctr) {
      if (!spec.level_index(level)) t.levels.push_back(level);
    }
    if (missing) t.note = "absent from some instances";
    if (t.levels.size() < 2) {
      t.note = t.levels.empty() ? "absent" : "single level";
      report.tests.push_back(std::move(t));
      continue;
    }
    std::vector<std::vector<double>> groups;
    for (const std::string& level : t.levels) {
      if (ctr[level].size() >= 2) groups.push_back(ctr[level]);
    }
    if (groups.size() >= 2) {
      try {
        t.anova = one_way_anova(groups);
      } catch (const DegenerateDataError&) {
        t.note = "zero within-level variance";
      }
    }
    t.reference = t.levels.front();
    for (const std::string& level : t.levels) {
      if (impressions[level] > impressions[t.reference]) t.reference = level;
    }
    if (!missing) {
      for (const std::string& level : t.levels) {
        if (level != t.reference) columns.push_back(Column{report.tests.size(), level});
      }
    }
    report.tests.push_back(std::move(t));
  }

  if (!columns.empty() && !instances.empty()) {
    std::vector<std::vector<double>> x;
    std::vector<double> s, n;
    for (const AggregatedInstance& inst : instances) {
      std::vector<double> row(columns.size() + 1, 0.0);
      row[0] = 1.0;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        const auto it = inst.attributes.find(report.tests[columns[c].test].attribute);
        if (it != inst.attributes.end() && it->second == columns[c].level) row[c + 1] = 1.0;
      }
      x.push_back(std::move(row));
      s.push_back(static_cast<double>(inst.clicks));
      n.push_back(static_cast<double>(inst.w));
    }
    try {
      const LogitResult fit = logistic_fit(x, s, n);
      report.logit_converged = fit.converged;
      report.logit_separation = fit.separation;
      std::map<std::size_t, std::vector<std::size_t>> indices;
      for (std::size_t c = 0; c < columns.size(); ++c) indices[columns[c].test].push_back(c + 1);
      for (const auto& [test, idx] : indices) report.tests[test].wald = wald_test(fit, idx);
    } catch (const DesignError&) {
      for (AttributeTest& t : report.tests) {
        if (t.note.empty()) t.note = "logistic design rank deficient";
      }
    }
  }

  for (AttributeTest& t : report.tests) {
    t.selected = (t.anova && t.anova->p < alpha) || (t.wald && t.wald->p < alpha);
  }
  std::stable_sort(report.tests.begin(), report.tests.end(),
                   [](const AttributeTest& a, const AttributeTest& b) {
                     if (a.min_p() != b.min_p()) return a.min_p() < b.min_p();
                     return a.attribute < b.attribute;
                   });
  return report;
}

}  // namespace m2fn

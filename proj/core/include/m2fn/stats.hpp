#pragma once

#include <cstddef>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2fn/aux.hpp"
#include "m2fn/records.hpp"

namespace m2fn {

struct AnovaResult {
  double f = 0.0;
  std::size_t df_between = 0;
  std::size_t df_within = 0;
  double p = 1.0;
};

// P(F > f) for F ~ F(d1, d2), via the regularized incomplete beta function.
double f_survival(double f, double d1, double d2);

// Classical one-way ANOVA. Needs at least two groups of at least two
// samples (ContractError); zero within-group variance throws
// DegenerateDataError.
AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups);

struct LogitOptions {
  std::size_t max_iter = 50;
  double tol = 1e-8;
  double separation_bound = 30.0;
};

struct LogitResult {
  std::vector<double> coefficients;
  std::vector<double> std_errors;
  std::vector<double> z;
  std::vector<double> p_values;      // empty when separation is flagged
  std::vector<double> covariance;    // cols x cols, row-major inverse Hessian
  std::vector<double> ll_history;    // log-likelihood after each iteration, starting at beta = 0
  double log_likelihood = 0.0;
  double gradient_norm = 0.0;        // of the mean per-trial log-likelihood
  std::size_t iterations = 0;
  bool converged = false;
  bool separation = false;
};

// Binomial logistic regression by iteratively reweighted least squares with
// step halving. Row i has design x[i], `successes[i]` out of `trials[i]`.
// Include a column of ones for an intercept. Converged means the gradient
// norm of the mean log-likelihood dropped below tol. Rank-deficient designs
// throw DesignError.
LogitResult logistic_fit(const std::vector<std::vector<double>>& x,
                         std::span<const double> successes, std::span<const double> trials,
                         const LogitOptions& options = {});
// 0/1 outcomes, one trial per row.
LogitResult logistic_fit(const std::vector<std::vector<double>>& x, std::span<const double> y,
                         const LogitOptions& options = {});

// Upper tail of the chi-square distribution.
double chi2_survival(double x, double df);

// Joint Wald statistic for coefficients `indices` = 0, with its chi-square
// p-value. Returns nullopt when the fit flagged separation.
struct WaldTest {
  double statistic = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};
std::optional<WaldTest> wald_test(const LogitResult& fit, std::span<const std::size_t> indices);

struct AttributeTest {
  std::string attribute;
  std::vector<std::string> levels;  // observed, in schema order
  std::string reference;            // level dropped from the logistic design
  std::optional<AnovaResult> anova;
  std::optional<WaldTest> wald;
  bool selected = false;
  std::string note;

  // Smallest available p-value, or 1.
  double min_p() const;
};

struct SelectionReport {
  double alpha = 0.05;
  std::size_t instances = 0;
  std::uint64_t impressions = 0;
  bool logit_converged = false;
  bool logit_separation = false;
  std::vector<AttributeTest> tests;  // ranked by min_p, then name

  std::vector<std::string> selected() const;
  std::string text_table() const;
};

void to_json(nlohmann::json& j, const AnovaResult& r);
void to_json(nlohmann::json& j, const LogitResult& r);
void to_json(nlohmann::json& j, const SelectionReport& r);

// Tests every categorical attribute of `schema`: one-way ANOVA over the
// per-instance CTRs grouped by level, and a joint Wald test of the
// attribute's terms in one logistic regression over all tested attributes
// (most frequent level as reference, instances as binomial rows). An
// attribute is kept when either p-value is below alpha.
SelectionReport select_attributes(std::span<const AggregatedInstance> instances,
                                  const AuxSchema& schema, double alpha = 0.05);

}  // namespace m2fn

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibermap/measures.hpp"
#include "fibermap/taxonomy.hpp"

namespace fibermap {

// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
// Student t cumulative distribution.
double student_t_cdf(double t, double df);
// Two-sided tail probability P(|T| >= |t|).
double student_t_two_sided_p(double t, double df);
// Quantile of the t distribution, p in (0, 1).
double student_t_quantile(double p, double df);

enum class Response { fa, md, nos };
const char* to_string(Response r);
Response parse_response(const std::string& s);

struct GLMResult {
  std::string tract;
  double beta = 0.0;  // response units per age unit
  double intercept = 0.0;
  std::map<std::string, double> covariate_betas;
  double std_error = 0.0;
  double t_stat = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  double p_bonferroni = 1.0;
  double ci_low = 0.0;  // 95% interval for beta
  double ci_high = 0.0;
  std::size_t n = 0;
  std::size_t dropped_missing = 0;  // rows without a response or covariate
};

// OLS of response on [1, age, mean-centered covariates] over the given rows
// (normally all rows of one tract). p is two-sided for the age coefficient.
GLMResult glm_fit(std::span<const TractMeasureRow> rows, Response response,
                  std::span<const std::string> covariates = {});

// min(1, p * m) elementwise; requires m >= p_values.size().
std::vector<double> bonferroni(std::span<const double> p_values, std::size_t m);

// Fits every tract in the table and Bonferroni-corrects across the fitted tracts.
// Tracts that cannot be fitted are listed in `skipped`.
struct TractFits {
  std::vector<GLMResult> fits;
  std::map<std::string, std::string> skipped;  // tract -> reason
};
TractFits glm_all_tracts(const TractMeasureTable& table, Response response,
                         std::span<const std::string> covariates = {});

struct PairedTTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  double mean_difference = 0.0;
};

PairedTTest paired_ttest(std::span<const double> x, std::span<const double> y);

struct GroupComparisonRow {
  std::string tract;
  GLMResult a;
  GLMResult b;
};

struct CategoryMean {
  double mean_beta_a = 0.0;
  double mean_beta_b = 0.0;
  std::size_t tracts = 0;
};

struct GroupComparison {
  std::vector<GroupComparisonRow> rows;
  std::map<TractCategory, CategoryMean> categories;
  std::map<std::string, std::string> excluded;  // tract -> reason
};

GroupComparison compare_groups(const TractMeasureTable& a, const TractMeasureTable& b, Response response,
                               std::span<const std::string> covariates = {});

}  // namespace fibermap

#include "fibermap/stats.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "fibermap/error.hpp"

namespace fibermap {

namespace {

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericalError("incomplete beta continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw ValidationError("degrees of freedom must be > 0");
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw ValidationError("degrees of freedom must be > 0");
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (t * t < df) {
    // Near the centre the complementary form keeps full relative precision.
    const double centre = 0.5 * incomplete_beta(0.5, df / 2.0, t * t / (df + t * t));
    return t < 0.0 ? 0.5 - centre : 0.5 + centre;
  }
  const double tail = 0.5 * student_t_two_sided_p(t, df);
  return t > 0.0 ? 1.0 - tail : tail;
}

double student_t_quantile(double p, double df) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("quantile probability must be in (0, 1)");
  if (p == 0.5) return 0.0;
  double lo = -1.0, hi = 1.0;
  while (student_t_cdf(lo, df) > p) lo *= 2.0;
  while (student_t_cdf(hi, df) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (student_t_cdf(mid, df) < p)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

const char* to_string(Response r) {
  switch (r) {
    case Response::fa: return "FA";
    case Response::md: return "MD";
    default: return "NoS";
  }
}

Response parse_response(const std::string& s) {
  if (s == "FA" || s == "fa") return Response::fa;
  if (s == "MD" || s == "md") return Response::md;
  if (s == "NoS" || s == "nos") return Response::nos;
  throw ValidationError("unknown response measure '" + s + "'");
}

GLMResult glm_fit(std::span<const TractMeasureRow> rows, Response response, std::span<const std::string> covariates) {
  GLMResult res;
  if (!rows.empty()) res.tract = rows.front().tract;
  std::vector<double> y, age;
  std::vector<std::vector<double>> cov(covariates.size());
  for (const auto& r : rows) {
    std::optional<double> v;
    switch (response) {
      case Response::fa: v = r.mean_fa; break;
      case Response::md: v = r.mean_md; break;
      default: v = static_cast<double>(r.nos); break;
    }
    bool ok = v.has_value();
    for (const auto& c : covariates) ok = ok && r.meta.covariates.count(c) != 0;
    if (!ok) {
      ++res.dropped_missing;
      continue;
    }
    y.push_back(*v);
    age.push_back(r.meta.age_at_scan);
    for (std::size_t c = 0; c < covariates.size(); ++c) cov[c].push_back(r.meta.covariates.at(covariates[c]));
  }
  const std::size_t n = y.size();
  const std::size_t p = 2 + covariates.size();
  res.n = n;
  if (n <= p)
    throw ValidationError("GLM for '" + res.tract + "' needs more than " + std::to_string(p) +
                          " complete rows, found " + std::to_string(n));

  std::vector<std::string> names{"intercept", "age"};
  names.insert(names.end(), covariates.begin(), covariates.end());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Eigen::VectorXd yy(static_cast<Eigen::Index>(n));
  // Age is centred too so the intercept column is never the one named as
  // collinear; the reported intercept is mapped back to age 0.
  double age_mean = 0.0;
  for (double a : age) age_mean += a;
  age_mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    x(ii, 0) = 1.0;
    x(ii, 1) = age[i] - age_mean;
    yy(ii) = y[i];
  }
  for (std::size_t c = 0; c < covariates.size(); ++c) {
    double mean = 0.0;
    for (double v : cov[c]) mean += v;
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 + c)) = cov[c][i] - mean;
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (static_cast<std::size_t>(qr.rank()) < p) {
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < static_cast<Eigen::Index>(p); ++k)
      cols += (cols.empty() ? "" : ", ") + names[static_cast<std::size_t>(perm(k))];
    throw NumericalError("GLM design for '" + res.tract + "' is rank deficient; collinear columns: " + cols);
  }

  res.df = static_cast<double>(n - p);
  const double ymin = yy.minCoeff(), ymax = yy.maxCoeff();
  if (ymin == ymax) {
    // A constant response is fitted exactly by the intercept alone.
    res.intercept = ymin;
    for (const auto& c : covariates) res.covariate_betas[c] = 0.0;
    res.p_value = res.p_bonferroni = 1.0;
    return res;
  }
  const Eigen::VectorXd beta = qr.solve(yy);
  const Eigen::VectorXd resid = yy - x * beta;
  const double sigma2 = resid.squaredNorm() / res.df;
  const Eigen::MatrixXd xtx_inv = (x.transpose() * x).inverse();
  res.beta = beta(1);
  res.intercept = beta(0) - res.beta * age_mean;
  for (std::size_t c = 0; c < covariates.size(); ++c) res.covariate_betas[covariates[c]] = beta(static_cast<Eigen::Index>(2 + c));
  res.std_error = std::sqrt(std::max(0.0, sigma2 * xtx_inv(1, 1)));
  if (res.std_error > 0.0) {
    res.t_stat = res.beta / res.std_error;
    res.p_value = student_t_two_sided_p(res.t_stat, res.df);
  } else {
    res.t_stat = res.beta == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), res.beta);
    res.p_value = res.beta == 0.0 ? 1.0 : 0.0;
  }
  res.p_bonferroni = res.p_value;
  const double q = student_t_quantile(0.975, res.df);
  res.ci_low = res.beta - q * res.std_error;
  res.ci_high = res.beta + q * res.std_error;
  return res;
}

std::vector<double> bonferroni(std::span<const double> p_values, std::size_t m) {
  if (m < p_values.size())
    throw ValidationError("Bonferroni test count " + std::to_string(m) + " is smaller than the number of p-values");
  std::vector<double> out;
  out.reserve(p_values.size());
  for (double p : p_values) out.push_back(std::min(1.0, p * static_cast<double>(m)));
  return out;
}

namespace {

std::map<std::string, std::vector<TractMeasureRow>> by_tract(const TractMeasureTable& table) {
  std::map<std::string, std::vector<TractMeasureRow>> out;
  for (const auto& r : table) out[r.tract].push_back(r);
  return out;
}

}  // namespace

TractFits glm_all_tracts(const TractMeasureTable& table, Response response, std::span<const std::string> covariates) {
  TractFits out;
  for (const auto& [tract, rows] : by_tract(table)) {
    try {
      out.fits.push_back(glm_fit(rows, response, covariates));
    } catch (const Error& e) {
      out.skipped[tract] = e.what();
    }
  }
  std::vector<double> p;
  for (const auto& f : out.fits) p.push_back(f.p_value);
  const auto corrected = bonferroni(p, p.size());
  for (std::size_t i = 0; i < out.fits.size(); ++i) out.fits[i].p_bonferroni = corrected[i];
  return out;
}

PairedTTest paired_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("paired t-test needs equal-length samples");
  const std::size_t n = x.size();
  if (n < 3) throw ValidationError("paired t-test needs at least 3 pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw NumericalError("degenerate paired sample: differences have zero variance");
  PairedTTest r;
  r.mean_difference = mean;
  r.df = static_cast<double>(n - 1);
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

GroupComparison compare_groups(const TractMeasureTable& a, const TractMeasureTable& b, Response response,
                               std::span<const std::string> covariates) {
  GroupComparison out;
  const auto ta = by_tract(a);
  const auto tb = by_tract(b);
  std::map<std::string, bool> tracts;
  for (const auto& [t, _] : ta) tracts[t] = true;
  for (const auto& [t, _] : tb) tracts[t] = true;
  for (const auto& [tract, _] : tracts) {
    auto ia = ta.find(tract);
    auto ib = tb.find(tract);
    if (ia == ta.end()) {
      out.excluded[tract] = "absent from group A";
      continue;
    }
    if (ib == tb.end()) {
      out.excluded[tract] = "absent from group B";
      continue;
    }
    try {
      out.rows.push_back({tract, glm_fit(ia->second, response, covariates), glm_fit(ib->second, response, covariates)});
    } catch (const Error& e) {
      out.excluded[tract] = e.what();
    }
  }
  for (const auto& r : out.rows) {
    const auto cat = category_of(r.tract);
    if (!cat) continue;
    auto& c = out.categories[*cat];
    c.mean_beta_a += r.a.beta;
    c.mean_beta_b += r.b.beta;
    ++c.tracts;
  }
  for (auto& [_, c] : out.categories) {
    c.mean_beta_a /= static_cast<double>(c.tracts);
    c.mean_beta_b /= static_cast<double>(c.tracts);
  }
  return out;
}

}  // namespace fibermap

#include "fibermap/registration.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "fibermap/error.hpp"
#include "fibermap/kernels.hpp"
#include "fibermap/rng.hpp"

namespace fibermap {

const char* to_string(TransformFamily f) {
  switch (f) {
    case TransformFamily::rigid: return "rigid";
    case TransformFamily::similarity: return "similarity";
    default: return "affine";
  }
}

TransformFamily parse_transform_family(const std::string& s) {
  if (s == "rigid") return TransformFamily::rigid;
  if (s == "similarity") return TransformFamily::similarity;
  if (s == "affine") return TransformFamily::affine;
  throw ValidationError("unknown transform family '" + s + "'");
}

const char* to_string(RegistrationObjective o) {
  return o == RegistrationObjective::entropy ? "entropy" : "pairwise";
}

RegistrationObjective parse_registration_objective(const std::string& s) {
  if (s == "entropy") return RegistrationObjective::entropy;
  if (s == "pairwise") return RegistrationObjective::pairwise;
  throw ValidationError("unknown registration objective '" + s + "'");
}

void RegistrationConfig::validate() const {
  if (sigma_schedule.empty()) throw ValidationError("sigma_schedule is empty");
  for (std::size_t i = 0; i < sigma_schedule.size(); ++i) {
    if (!(sigma_schedule[i] > 0.0)) throw ValidationError("sigma_schedule entries must be > 0");
    if (i > 0 && !(sigma_schedule[i] < sigma_schedule[i - 1]))
      throw ValidationError("sigma_schedule must be strictly decreasing");
  }
  if (fibers_per_subject_sample < 10)
    throw ValidationError("fibers_per_subject_sample must be >= 10");
  if (max_iters_per_scale < 1) throw ValidationError("max_iters_per_scale must be >= 1");
  if (!(convergence_tol >= 0.0)) throw ValidationError("convergence_tol must be >= 0");
  if (points < 2) throw ValidationError("resample point count must be >= 2");
}

namespace {

enum class ParamKind { rotation, translation, scale, shear };

std::size_t param_count(TransformFamily f) {
  switch (f) {
    case TransformFamily::rigid: return 6;
    case TransformFamily::similarity: return 7;
    default: return 12;
  }
}

// Layout: rotation vector [0,3), translation [3,6), then either one uniform
// log-scale (similarity) or three axis log-scales [6,9) and shears [9,12).
ParamKind kind_of(std::size_t i) {
  if (i < 3) return ParamKind::rotation;
  if (i < 6) return ParamKind::translation;
  if (i < 9) return ParamKind::scale;
  return ParamKind::shear;
}

// x -> R * Shear * diag(exp(log_scale)) * (x - c) + c + t
AffineTransform build_transform(TransformFamily family, const std::vector<double>& p,
                                const Vec3& center) {
  const Mat3 rot = rotation_matrix(Vec3(p[0], p[1], p[2]));
  Mat3 lin = rot;
  if (family == TransformFamily::similarity) {
    lin = rot * std::exp(p[6]);
  } else if (family == TransformFamily::affine) {
    Mat3 shear = Mat3::Identity();
    shear(0, 1) = p[9];
    shear(0, 2) = p[10];
    shear(1, 2) = p[11];
    const Vec3 scale(std::exp(p[6]), std::exp(p[7]), std::exp(p[8]));
    lin = rot * shear * scale.asDiagonal();
  }
  const Vec3 t(p[3], p[4], p[5]);
  return {lin, center - lin * center + t};
}

struct LineResult {
  double x;
  double f;
};

double parabola_vertex(double a, double fa, double b, double fb, double c, double fc) {
  const double num = (b - a) * (b - a) * (fb - fc) - (b - c) * (b - c) * (fb - fa);
  const double den = (b - a) * (fb - fc) - (b - c) * (fb - fa);
  if (den == 0.0) return b;
  return b - 0.5 * num / den;
}

// Bracketing expands by doubling at most this many times, so one line search
// moves a parameter by no more than 4h. Wide kernels barely constrain
// rotation, and unbounded expansion there can jump to a flipped pose.
constexpr int kMaxExpansions = 2;

// Minimizes f along one coordinate starting from offset 0 with value f0.
// Only strict improvements are returned, so accepted steps never increase f.
LineResult line_search(const std::function<double(double)>& f, double f0, double h) {
  LineResult best{0.0, f0};
  const double fp = f(h);
  double dir;
  if (fp < f0) {
    dir = 1.0;
    best = {h, fp};
  } else {
    const double fm = f(-h);
    if (fm < f0) {
      dir = -1.0;
      best = {-h, fm};
    } else {
      const double x = parabola_vertex(-h, fm, 0.0, f0, h, fp);
      if (std::isfinite(x) && std::abs(x) < h && x != 0.0) {
        const double fx = f(x);
        if (fx < f0) return {x, fx};
      }
      return best;
    }
  }
  LineResult prev{0.0, f0};
  double step = h;
  for (int k = 0; k < kMaxExpansions; ++k) {
    step *= 2.0;
    const double x = best.x + dir * step / 2.0;
    const double fx = f(x);
    if (fx < best.f) {
      prev = best;
      best = {x, fx};
      continue;
    }
    const double v = parabola_vertex(prev.x, prev.f, best.x, best.f, x, fx);
    const double lo = std::min(prev.x, x), hi = std::max(prev.x, x);
    if (std::isfinite(v) && v > lo && v < hi && v != best.x) {
      const double fv = f(v);
      if (fv < best.f) best = {v, fv};
    }
    return best;
  }
  return best;
}

struct SubjectFrame {
  Vec3 center;
  double radius;
};

SubjectFrame frame_of(const Tractogram& t) {
  const Vec3 c = t.centroid();
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& s : t.streamlines)
    for (const auto& p : s.points()) {
      ss += (p - c).squaredNorm();
      ++n;
    }
  const double r = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
  if (!(r > 0.0))
    throw NumericalError("degenerate subject '" + t.subject_id + "': all points coincide");
  return {c, r};
}

std::vector<ResampledFiber> transformed(const std::vector<ResampledFiber>& raw,
                                        const AffineTransform& t) {
  std::vector<ResampledFiber> out;
  out.reserve(raw.size());
  for (const auto& f : raw) out.push_back(apply_transform(f, t));
  return out;
}

std::vector<ResampledFiber> draw_sample(const Tractogram& t, std::size_t n, std::size_t points,
                                        std::uint64_t seed, std::uint64_t stream) {
  const auto idx = subsample_indices(t.size(), n, Rng::split(seed, stream).next());
  std::vector<ResampledFiber> out;
  out.reserve(n);
  for (std::size_t i : idx) out.push_back(resample(t.streamlines[i], points));
  return out;
}

double step_for(ParamKind k, double sigma, double radius) {
  const double disp = sigma / 4.0;  // mm of displacement per trial step
  switch (k) {
    case ParamKind::translation: return disp;
    default: return disp / radius;
  }
}

FiberDistanceParams kernel_params(double sigma) {
  FiberDistanceParams p;
  p.variant = McpVariant::symmetric_mean;
  p.sigma = sigma;
  return p;
}

// Sufficient statistics of one ordered subject pair (s, t): per fiber of s
// the affinity sum over t, and the pairwise -log(affinity + eps) total.
struct PairStats {
  std::vector<double> row_sums;
  double neg_log = 0.0;
};

// Fills stats for (a, b) and (b, a) from one affinity matrix.
void pair_stats(std::span<const ResampledFiber> a, std::span<const ResampledFiber> b,
                const FiberDistanceParams& kp, PairStats& ab, PairStats& ba) {
  const Eigen::MatrixXd w = kernels::omp::affinity_matrix(a, b, kp);
  ab.row_sums.assign(a.size(), 0.0);
  ba.row_sums.assign(b.size(), 0.0);
  double nl = 0.0;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const double v = w(i, j);
      ab.row_sums[static_cast<std::size_t>(i)] += v;
      ba.row_sums[static_cast<std::size_t>(j)] += v;
      nl -= std::log(v + kLogEpsilon);
    }
  ab.neg_log = nl;
  ba.neg_log = nl;
}

// All ordered pairs of a group, stats[s][t] for s != t.
using GroupStats = std::vector<std::vector<PairStats>>;

double objective_from(const GroupStats& st, std::span<const std::vector<ResampledFiber>> xf,
                      RegistrationObjective kind) {
  const std::size_t n = xf.size();
  if (kind == RegistrationObjective::pairwise) {
    double total = 0.0, pairs = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < n; ++t) {
        if (s == t) continue;
        total += st[s][t].neg_log;
        pairs += static_cast<double>(xf[s].size() * xf[t].size());
      }
    return total / pairs;
  }
  double total = 0.0, fibers = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double others = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      if (t != s) others += static_cast<double>(xf[t].size());
    for (std::size_t i = 0; i < xf[s].size(); ++i) {
      double a = 0.0;
      for (std::size_t t = 0; t < n; ++t)
        if (t != s) a += st[s][t].row_sums[i];
      total -= std::log(a / others + kLogEpsilon);
    }
    fibers += static_cast<double>(xf[s].size());
  }
  return total / fibers;
}

GroupStats all_stats(std::span<const std::vector<ResampledFiber>> xf, const FiberDistanceParams& kp) {
  const std::size_t n = xf.size();
  GroupStats st(n, std::vector<PairStats>(n));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = s + 1; t < n; ++t) pair_stats(xf[s], xf[t], kp, st[s][t], st[t][s]);
  return st;
}

// Stats after the subjects in `moved` take new fibers; other pairs are reused.
GroupStats updated_stats(const GroupStats& st, std::span<const std::vector<ResampledFiber>> xf,
                         const std::vector<std::size_t>& moved, const FiberDistanceParams& kp) {
  GroupStats out = st;
  const std::size_t n = xf.size();
  auto is_moved = [&](std::size_t s) {
    return std::find(moved.begin(), moved.end(), s) != moved.end();
  };
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = s + 1; t < n; ++t)
      if (is_moved(s) || is_moved(t)) pair_stats(xf[s], xf[t], kp, out[s][t], out[t][s]);
  return out;
}

std::vector<std::vector<ResampledFiber>> transform_all(std::span<const std::vector<ResampledFiber>> samples,
                                                       std::span<const AffineTransform> transforms) {
  if (samples.size() < 2) throw ValidationError("group objective needs at least 2 subjects");
  if (samples.size() != transforms.size())
    throw ValidationError("one transform per subject is required");
  std::vector<std::vector<ResampledFiber>> xf;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s].empty()) throw ValidationError("group objective needs nonempty samples");
    xf.push_back(transformed(samples[s], transforms[s]));
  }
  return xf;
}

}  // namespace

double group_objective(std::span<const std::vector<ResampledFiber>> samples,
                       std::span<const AffineTransform> transforms, double sigma) {
  const auto xf = transform_all(samples, transforms);
  const auto params = kernel_params(sigma);
  double total = 0.0, pairs = 0.0;
  for (std::size_t s = 0; s < xf.size(); ++s)
    for (std::size_t t = s + 1; t < xf.size(); ++t) {
      total += 2.0 * kernels::omp::neg_log_affinity_sum(xf[s], xf[t], params, kLogEpsilon);
      pairs += 2.0 * static_cast<double>(xf[s].size() * xf[t].size());
    }
  return total / pairs;
}

double group_entropy(std::span<const std::vector<ResampledFiber>> samples,
                     std::span<const AffineTransform> transforms, double sigma) {
  const auto xf = transform_all(samples, transforms);
  return objective_from(all_stats(xf, kernel_params(sigma)), xf, RegistrationObjective::entropy);
}

GroupRegistrationResult register_group(std::span<const Tractogram> tractograms,
                                       const RegistrationConfig& cfg) {
  cfg.validate();
  const std::size_t n = tractograms.size();
  if (n < 2) throw ValidationError("groupwise registration needs at least 2 subjects");
  const std::size_t m = cfg.fibers_per_subject_sample;
  std::vector<SubjectFrame> frames;
  double mean_radius = 0.0;
  for (const auto& t : tractograms) {
    t.validate();
    if (t.size() < m)
      throw ValidationError("subject '" + t.subject_id + "' has " + std::to_string(t.size()) +
                            " streamlines, fewer than the registration sample " + std::to_string(m));
    frames.push_back(frame_of(t));
    mean_radius += frames.back().radius / static_cast<double>(n);
  }

  const std::size_t np = param_count(cfg.family);
  std::vector<std::vector<double>> params(n, std::vector<double>(np, 0.0));
  auto transform_of = [&](std::size_t s) { return build_transform(cfg.family, params[s], frames[s].center); };

  GroupRegistrationResult result;
  bool scale_converged = false;
  for (std::size_t k = 0; k < cfg.sigma_schedule.size(); ++k) {
    const double sigma = cfg.sigma_schedule[k];
    const auto kp = kernel_params(sigma);
    std::vector<std::vector<ResampledFiber>> raw(n), xf(n);
    for (std::size_t s = 0; s < n; ++s) {
      raw[s] = draw_sample(tractograms[s], m, cfg.points, cfg.seed, k * 1000003ULL + s);
      xf[s] = transformed(raw[s], transform_of(s));
    }
    GroupStats stats = all_stats(xf, kp);
    double obj = objective_from(stats, xf, cfg.objective);
    result.objective_trace.push_back({k, sigma, obj});

    // Objective with the subjects in `moved` displaced along parameter p;
    // scale moves are transfers from s to its neighbour so the mean
    // log-scale stays at zero and the group cannot shrink as a whole.
    auto trial = [&](std::size_t s, std::size_t p, double dx, GroupStats* keep) {
      const bool transfer = kind_of(p) == ParamKind::scale;
      const std::size_t u = (s + 1) % n;
      const double base_s = params[s][p], base_u = params[u][p];
      params[s][p] = base_s + dx;
      if (transfer) params[u][p] = base_u - dx;
      auto moved_xf = xf;
      moved_xf[s] = transformed(raw[s], transform_of(s));
      std::vector<std::size_t> moved{s};
      if (transfer) {
        moved_xf[u] = transformed(raw[u], transform_of(u));
        moved.push_back(u);
      }
      params[s][p] = base_s;
      params[u][p] = base_u;
      GroupStats next = updated_stats(stats, moved_xf, moved, kp);
      const double v = objective_from(next, moved_xf, cfg.objective);
      if (keep) *keep = std::move(next);
      return v;
    };

    double step_scale = 1.0;
    scale_converged = false;
    for (std::size_t iter = 0; iter < cfg.max_iters_per_scale; ++iter) {
      const double before = obj;
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t p = 0; p < np; ++p) {
          const double h = step_scale * step_for(kind_of(p), sigma, mean_radius);
          const auto r = line_search([&](double dx) { return trial(s, p, dx, nullptr); }, obj, h);
          if (r.x == 0.0) continue;
          trial(s, p, r.x, &stats);
          params[s][p] += r.x;
          if (kind_of(p) == ParamKind::scale) params[(s + 1) % n][p] -= r.x;
          xf[s] = transformed(raw[s], transform_of(s));
          xf[(s + 1) % n] = transformed(raw[(s + 1) % n], transform_of((s + 1) % n));
          obj = r.f;
        }
      }
      // Gauge: a common translation leaves the objective unchanged, so it is
      // removed; the stats are recomputed so the trace stays exact.
      Vec3 mean_t = Vec3::Zero();
      for (std::size_t s = 0; s < n; ++s) mean_t += Vec3(params[s][3], params[s][4], params[s][5]);
      mean_t /= static_cast<double>(n);
      for (std::size_t s = 0; s < n; ++s) {
        for (int d = 0; d < 3; ++d) params[s][3 + d] -= mean_t(d);
        xf[s] = transformed(raw[s], transform_of(s));
      }
      stats = all_stats(xf, kp);
      obj = objective_from(stats, xf, cfg.objective);
      result.objective_trace.push_back({k, sigma, obj});
      step_scale *= 0.7;
      if (std::abs(before - obj) <= cfg.convergence_tol * std::abs(before)) {
        scale_converged = true;
        break;
      }
    }
  }
  result.converged = scale_converged;
  for (std::size_t s = 0; s < n; ++s) result.transforms.push_back(transform_of(s));
  return result;
}

AtlasRegistrationResult register_to_atlas_detailed(const Tractogram& subject,
                                                   std::span<const ResampledFiber> atlas_fibers,
                                                   const RegistrationConfig& cfg) {
  cfg.validate();
  subject.validate();
  if (atlas_fibers.empty()) throw ValidationError("atlas fiber sample is empty");
  for (const auto& f : atlas_fibers)
    if (f.size() != cfg.points) throw ValidationError("atlas fibers must be resampled to the configured point count");
  const SubjectFrame frame = frame_of(subject);
  const std::size_t m = std::min(cfg.fibers_per_subject_sample, subject.size());
  const std::size_t np = param_count(cfg.family);
  std::vector<double> params(np, 0.0);
  auto transform_of = [&]() { return build_transform(cfg.family, params, frame.center); };
  const std::vector<ResampledFiber> atlas(atlas_fibers.begin(), atlas_fibers.end());

  AtlasRegistrationResult result;
  bool scale_converged = false;
  for (std::size_t k = 0; k < cfg.sigma_schedule.size(); ++k) {
    const double sigma = cfg.sigma_schedule[k];
    const auto kp = kernel_params(sigma);
    const auto raw = draw_sample(subject, m, cfg.points, cfg.seed, k * 1000003ULL);
    auto eval_at = [&](const std::vector<double>& p) {
      const auto xs = transformed(raw, build_transform(cfg.family, p, frame.center));
      PairStats sa, as;
      pair_stats(xs, atlas, kp, sa, as);
      if (cfg.objective == RegistrationObjective::pairwise)
        return sa.neg_log / (static_cast<double>(xs.size()) * static_cast<double>(atlas.size()));
      double total = 0.0;
      for (double a : sa.row_sums) total -= std::log(a / static_cast<double>(atlas.size()) + kLogEpsilon);
      return total / static_cast<double>(xs.size());
    };
    double obj = eval_at(params);
    result.objective_trace.push_back({k, sigma, obj});
    double step_scale = 1.0;
    scale_converged = false;
    for (std::size_t iter = 0; iter < cfg.max_iters_per_scale; ++iter) {
      const double before = obj;
      for (std::size_t p = 0; p < np; ++p) {
        const double h = step_scale * step_for(kind_of(p), sigma, frame.radius);
        const double base = params[p];
        auto eval = [&](double dx) {
          params[p] = base + dx;
          const double v = eval_at(params);
          params[p] = base;
          return v;
        };
        const auto r = line_search(eval, obj, h);
        if (r.x != 0.0) {
          params[p] = base + r.x;
          obj = r.f;
        }
      }
      result.objective_trace.push_back({k, sigma, obj});
      step_scale *= 0.7;
      if (std::abs(before - obj) <= cfg.convergence_tol * std::abs(before)) {
        scale_converged = true;
        break;
      }
    }
  }
  result.converged = scale_converged;
  result.transform = transform_of();
  return result;
}

AffineTransform register_to_atlas(const Tractogram& subject,
                                  std::span<const ResampledFiber> atlas_fibers,
                                  const RegistrationConfig& cfg) {
  return register_to_atlas_detailed(subject, atlas_fibers, cfg).transform;
}

}  // namespace fibermap

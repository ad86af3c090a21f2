#include "fibermap/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>
#include <map>

#include "fibermap/error.hpp"
#include "fibermap/kernels.hpp"
#include "fibermap/rng.hpp"

namespace fibermap {

NystromModel fit_nystrom(std::span<const ResampledFiber> fibers, const NystromConfig& cfg) {
  const std::size_t n = fibers.size();
  const std::size_t m = cfg.sample_size;
  const std::size_t keep = cfg.dims + (cfg.drop_trivial ? 1 : 0);
  if (m == 0 || m > n)
    throw ValidationError("Nystrom sample size " + std::to_string(m) + " must be in [1, " +
                          std::to_string(n) + "]");
  if (cfg.dims == 0 || keep > m)
    throw ValidationError("embedding dimension " + std::to_string(cfg.dims) +
                          " too large for sample size " + std::to_string(m));

  NystromModel model;
  model.kernel.variant = McpVariant::symmetric_mean;
  model.kernel.sigma = cfg.sigma;
  model.kernel.validate();
  model.dropped_trivial = cfg.drop_trivial;
  model.eigenvalue_weighted = cfg.weight_by_eigenvalue;
  model.sample_indices = subsample_indices(n, m, cfg.seed);
  for (std::size_t i : model.sample_indices) model.sample_fibers.push_back(fibers[i]);

  const Eigen::MatrixXd w = kernels::omp::affinity_matrix(model.sample_fibers, model.sample_fibers, model.kernel);
  model.degrees = w.rowwise().sum();
  for (Eigen::Index i = 0; i < model.degrees.size(); ++i)
    if (!(model.degrees(i) > 0.0)) throw NumericalError("affinity row has zero degree");
  const Eigen::VectorXd inv_sqrt = model.degrees.array().rsqrt();
  const Eigen::MatrixXd normalized = inv_sqrt.asDiagonal() * w * inv_sqrt.asDiagonal();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(normalized);
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const Eigen::VectorXd& evals = solver.eigenvalues();  // ascending
  const double top = evals.cwiseAbs().maxCoeff();
  const double tol = 1e-10 * top;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < evals.size(); ++i)
    if (evals(i) > tol) ++rank;
  if (rank < keep)
    throw NumericalError("affinity matrix has numerical rank " + std::to_string(rank) +
                         " (positive spectrum); cannot retain " + std::to_string(keep) +
                         " eigenvectors");

  const std::size_t first = cfg.drop_trivial ? 1 : 0;
  const Eigen::Index mm = static_cast<Eigen::Index>(m);
  model.eigenvalues.resize(static_cast<Eigen::Index>(cfg.dims));
  model.sample_eigenvectors.resize(mm, static_cast<Eigen::Index>(cfg.dims));
  for (std::size_t k = 0; k < cfg.dims; ++k) {
    const Eigen::Index src = mm - 1 - static_cast<Eigen::Index>(first + k);
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    model.eigenvalues(static_cast<Eigen::Index>(k)) = evals(src);
    model.sample_eigenvectors.col(static_cast<Eigen::Index>(k)) = v;
  }
  return model;
}

Eigen::MatrixXd embed_all(std::span<const ResampledFiber> fibers, const NystromModel& model) {
  const Eigen::Index e = static_cast<Eigen::Index>(model.dims());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(fibers.size()), e);
  if (fibers.empty()) return out;
  const Eigen::MatrixXd a = kernels::omp::affinity_matrix(fibers, model.sample_fibers, model.kernel);
  const Eigen::VectorXd inv_sqrt_dj = model.degrees.array().rsqrt();
  const Eigen::VectorXd scale =
      model.eigenvalue_weighted ? Eigen::VectorXd::Ones(e) : Eigen::VectorXd(model.eigenvalues.cwiseInverse());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double dx = a.row(i).sum();
    if (!(dx > std::numeric_limits<double>::min())) continue;  // far from every sample fiber
    const Eigen::RowVectorXd row = a.row(i).cwiseProduct(inv_sqrt_dj.transpose()) / std::sqrt(dx);
    out.row(i) = (row * model.sample_eigenvectors).cwiseProduct(scale.transpose());
  }
  return out;
}

FiberEmbedding embed(const ResampledFiber& fiber, const NystromModel& model) {
  return embed_all(std::span<const ResampledFiber>(&fiber, 1), model).row(0).transpose();
}

namespace {

double inertia_of(const Eigen::MatrixXd& x, const Eigen::MatrixXd& c, const std::vector<std::size_t>& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    s += (x.row(i) - c.row(static_cast<Eigen::Index>(a[static_cast<std::size_t>(i)]))).squaredNorm();
  return s;
}

Eigen::MatrixXd kmeans_pp(const Eigen::MatrixXd& x, std::size_t k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd c(static_cast<Eigen::Index>(k), x.cols());
  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  std::size_t first = rng.index(static_cast<std::size_t>(n));
  c.row(0) = x.row(static_cast<Eigen::Index>(first));
  chosen[first] = true;
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = (x.row(i) - c.row(0)).squaredNorm();
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = static_cast<std::size_t>(n) - 1;
      for (std::size_t i = 0; i < d2.size(); ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      // All remaining points coincide with a chosen center.
      while (pick + 1 < chosen.size() && chosen[pick]) ++pick;
      rng.uniform();
    }
    chosen[pick] = true;
    c.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(pick));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (x.row(i) - c.row(static_cast<Eigen::Index>(j))).squaredNorm();
      if (d < d2[static_cast<std::size_t>(i)]) d2[static_cast<std::size_t>(i)] = d;
    }
  }
  return c;
}

ClusterResult lloyd(const Eigen::MatrixXd& x, Eigen::MatrixXd c, std::size_t max_iters) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t k = static_cast<std::size_t>(c.rows());
  ClusterResult r;
  std::vector<std::size_t> assign = kernels::omp::nearest_centroids(x, c);
  r.inertia_trace.push_back(inertia_of(x, c, assign));
  for (std::size_t it = 0; it < max_iters; ++it) {
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(c.rows(), c.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assign[i])) += x.row(static_cast<Eigen::Index>(i));
      ++counts[assign[i]];
    }
    for (std::size_t j = 0; j < k; ++j)
      if (counts[j] > 0) c.row(static_cast<Eigen::Index>(j)) = sums.row(static_cast<Eigen::Index>(j)) / static_cast<double>(counts[j]);
    // An empty cluster takes over the point worst served by its centroid.
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) continue;
      double worst = 0.0;
      std::size_t arg = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] < 2) continue;
        const double d = (x.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(assign[i]))).squaredNorm();
        if (d > worst) {
          worst = d;
          arg = i;
        }
      }
      if (arg == n) continue;
      --counts[assign[arg]];
      c.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(arg));
      assign[arg] = j;
      counts[j] = 1;
    }
    auto next = kernels::omp::nearest_centroids(x, c);
    const bool stable = next == assign;
    assign = std::move(next);
    r.inertia_trace.push_back(inertia_of(x, c, assign));
    if (stable) break;
  }
  r.model.centroids = std::move(c);
  r.model.member_counts.assign(k, 0);
  for (std::size_t a : assign) ++r.model.member_counts[a];
  r.assignments = std::move(assign);
  return r;
}

}  // namespace

ClusterResult cluster(const Eigen::MatrixXd& embeddings, std::size_t k, std::uint64_t seed,
                      const KMeansConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(embeddings.rows());
  if (k == 0) throw ValidationError("cluster count must be >= 1");
  if (k > n)
    throw ValidationError("cluster count " + std::to_string(k) + " exceeds fiber count " + std::to_string(n));
  if (!embeddings.allFinite()) throw NumericalError("embedding has non-finite entries");
  ClusterResult best;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, cfg.restarts); ++r) {
    Rng rng = r == 0 ? Rng(seed) : Rng::split(seed, r);
    auto res = lloyd(embeddings, kmeans_pp(embeddings, k, rng), cfg.max_iters);
    if (r == 0 || res.inertia_trace.back() < best.inertia_trace.back()) best = std::move(res);
  }
  return best;
}

std::size_t assign(const FiberEmbedding& embedding, const ClusterModel& clusters) {
  if (embedding.size() != clusters.centroids.cols())
    throw ValidationError("embedding dimension does not match cluster model");
  double best = std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (Eigen::Index k = 0; k < clusters.centroids.rows(); ++k) {
    const double d = (embedding.transpose() - clusters.centroids.row(k)).squaredNorm();
    if (d < best) {
      best = d;
      arg = static_cast<std::size_t>(k);
    }
  }
  return arg;
}

std::vector<std::size_t> assign_all(const Eigen::MatrixXd& embeddings, const ClusterModel& clusters) {
  return kernels::omp::nearest_centroids(embeddings, clusters.centroids);
}

double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ValidationError("label vectors differ in length");
  const double n = static_cast<double>(a.size());
  std::map<std::pair<std::size_t, std::size_t>, double> cells;
  std::map<std::size_t, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cells[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, v] : cells) index += c2(v);
  for (const auto& [_, v] : ra) sa += c2(v);
  for (const auto& [_, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace fibermap

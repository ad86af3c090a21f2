#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <vector>

#include "fibermap/fiber_metric.hpp"

namespace fibermap {

struct NystromConfig {
  std::size_t sample_size = 100;  // m
  std::size_t dims = 10;          // E
  double sigma = 30.0;            // mm
  std::uint64_t seed = 0;
  bool drop_trivial = true;  // discard the leading (degree) eigenvector
  // Scale coordinate k by lambda_k so near-null eigenvectors, which carry
  // within-bundle noise, do not weigh as much as the separating ones.
  bool weight_by_eigenvalue = true;
};

// Spectral embedding fitted on a fiber sample. Embedding of a fiber x:
//   a_j = affinity(mcp(x, s_j)),  d_x = sum_j a_j
//   e_k = sum_j a_j / sqrt(d_x d_j) * V_jk / lambda_k
// which reproduces V's row for every sample fiber. With eigenvalue weighting
// e_k is multiplied by lambda_k.
struct NystromModel {
  std::vector<ResampledFiber> sample_fibers;
  std::vector<std::size_t> sample_indices;  // positions in the fitted fiber list
  FiberDistanceParams kernel;
  Eigen::VectorXd eigenvalues;          // E, descending
  Eigen::MatrixXd sample_eigenvectors;  // m x E
  Eigen::VectorXd degrees;              // m, all > 0
  bool dropped_trivial = true;
  bool eigenvalue_weighted = true;

  std::size_t dims() const { return static_cast<std::size_t>(eigenvalues.size()); }
  std::size_t points() const { return sample_fibers.empty() ? 0 : sample_fibers.front().size(); }
};

NystromModel fit_nystrom(std::span<const ResampledFiber> fibers, const NystromConfig& cfg);

using FiberEmbedding = Eigen::VectorXd;

FiberEmbedding embed(const ResampledFiber& fiber, const NystromModel& model);
// One row per fiber; row i equals embed(fibers[i], model) exactly.
Eigen::MatrixXd embed_all(std::span<const ResampledFiber> fibers, const NystromModel& model);

struct ClusterModel {
  Eigen::MatrixXd centroids;  // K x E
  std::vector<std::size_t> member_counts;

  std::size_t k() const { return static_cast<std::size_t>(centroids.rows()); }
};

struct ClusterResult {
  ClusterModel model;
  std::vector<std::size_t> assignments;
  std::vector<double> inertia_trace;  // within-cluster sum of squares per iteration
};

struct KMeansConfig {
  std::size_t max_iters = 300;
  std::size_t restarts = 1;  // best-inertia of this many k-means++ runs
};

// k-means with k-means++ seeding; deterministic for a fixed seed.
ClusterResult cluster(const Eigen::MatrixXd& embeddings, std::size_t k, std::uint64_t seed,
                      const KMeansConfig& cfg = {});

// Nearest centroid; ties go to the lowest index.
std::size_t assign(const FiberEmbedding& embedding, const ClusterModel& clusters);
std::vector<std::size_t> assign_all(const Eigen::MatrixXd& embeddings, const ClusterModel& clusters);

double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b);

}  // namespace fibermap

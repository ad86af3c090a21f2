#pragma once

// Data-parallel inner loops. Each kernel has a serial reference in
// kernels::serial and an OpenMP version in kernels::omp with bitwise
// identical output: parallel loops only write disjoint slots and every
// reduction is finished serially in a fixed order.

#include <Eigen/Core>
#include <span>
#include <vector>

#include "fibermap/fiber_metric.hpp"

namespace fibermap::kernels {

#define FIBERMAP_KERNEL_DECLS                                                              \
  Eigen::MatrixXd distance_matrix(std::span<const ResampledFiber> a,                       \
                                  std::span<const ResampledFiber> b,                       \
                                  const FiberDistanceParams& params);                      \
  /* Gaussian affinity of every fiber in `a` against every fiber in `b`. */                \
  Eigen::MatrixXd affinity_matrix(std::span<const ResampledFiber> a,                       \
                                  std::span<const ResampledFiber> b,                       \
                                  const FiberDistanceParams& params);                      \
  /* Sum over all (i, j) of -log(affinity(mcp(a_i, b_j)) + eps). */                        \
  double neg_log_affinity_sum(std::span<const ResampledFiber> a,                           \
                              std::span<const ResampledFiber> b,                           \
                              const FiberDistanceParams& params, double eps);              \
  /* Row-wise nearest centroid (Euclidean); ties go to the lower index. */                 \
  std::vector<std::size_t> nearest_centroids(const Eigen::MatrixXd& points,                \
                                             const Eigen::MatrixXd& centroids);

namespace serial {
FIBERMAP_KERNEL_DECLS
}
namespace omp {
FIBERMAP_KERNEL_DECLS
// Number of worker threads the OpenMP kernels will use (1 without OpenMP).
int max_threads();
void set_threads(int n);
}

#undef FIBERMAP_KERNEL_DECLS

}  // namespace fibermap::kernels

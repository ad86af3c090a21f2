#pragma once

#include <Eigen/Core>
#include <span>

#include "fibermap/streamline.hpp"

namespace fibermap {

enum class McpVariant { directed_mean, symmetric_mean };

struct FiberDistanceParams {
  McpVariant variant = McpVariant::symmetric_mean;
  // Mean closest point distance compares point sets, so it is already
  // independent of either fiber's orientation; the flag is kept so callers
  // can state the requirement explicitly.
  bool flip_invariant = true;
  double sigma = 30.0;  // mm

  void validate() const;
};

// Mean over the points of `a` of the distance to the nearest point of `b`.
double mcp_directed(const ResampledFiber& a, const ResampledFiber& b);
double mcp(const ResampledFiber& a, const ResampledFiber& b, const FiberDistanceParams& params = {});

// exp(-d^2 / sigma^2)
double affinity(double distance, double sigma);

// Entry (i, j) = mcp(a[i], b[j]). Runs the OpenMP kernel.
Eigen::MatrixXd pairwise_distance_matrix(std::span<const ResampledFiber> a,
                                         std::span<const ResampledFiber> b,
                                         const FiberDistanceParams& params = {});

}  // namespace fibermap

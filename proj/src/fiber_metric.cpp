#include "fibermap/fiber_metric.hpp"

#include <array>
#include <cmath>
#include <limits>

#include "fibermap/error.hpp"
#include "fibermap/kernels.hpp"

namespace fibermap {

void FiberDistanceParams::validate() const {
  if (!(sigma > 0.0)) throw ValidationError("kernel sigma must be > 0");
}

namespace {

void check_sizes(const ResampledFiber& a, const ResampledFiber& b) {
  if (a.size() != b.size())
    throw ValidationError("fiber point counts differ (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  if (a.size() == 0) throw ValidationError("empty fiber");
}

inline double sq_dist(const Vec3& p, const Vec3& q) {
  const double dx = p.x() - q.x();
  const double dy = p.y() - q.y();
  const double dz = p.z() - q.z();
  return dx * dx + dy * dy + dz * dz;
}

// One P x P pass yields both directed distances.
template <typename Buf>
void both_directions(const ResampledFiber& a, const ResampledFiber& b, Buf& row, Buf& col,
                     double* ab, double* ba) {
  const std::size_t n = a.size();
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) col[j] = inf;
  for (std::size_t i = 0; i < n; ++i) {
    double best = inf;
    const Vec3& p = a.points[i];
    for (std::size_t j = 0; j < n; ++j) {
      const double d = sq_dist(p, b.points[j]);
      if (d < best) best = d;
      if (d < col[j]) col[j] = d;
    }
    row[i] = best;
  }
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < n; ++i) sa += std::sqrt(row[i]);
  for (std::size_t j = 0; j < n; ++j) sb += std::sqrt(col[j]);
  *ab = sa / static_cast<double>(n);
  *ba = sb / static_cast<double>(n);
}

}  // namespace

double mcp_directed(const ResampledFiber& a, const ResampledFiber& b) {
  check_sizes(a, b);
  double sum = 0.0;
  for (const auto& p : a.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b.points) {
      const double d = sq_dist(p, q);
      if (d < best) best = d;
    }
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(a.size());
}

double mcp(const ResampledFiber& a, const ResampledFiber& b, const FiberDistanceParams& params) {
  if (params.variant == McpVariant::directed_mean) return mcp_directed(a, b);
  check_sizes(a, b);
  double ab, ba;
  if (a.size() <= 64) {
    std::array<double, 64> row, col;
    both_directions(a, b, row, col, &ab, &ba);
  } else {
    std::vector<double> row(a.size()), col(a.size());
    both_directions(a, b, row, col, &ab, &ba);
  }
  return (ab + ba) / 2.0;
}

double affinity(double distance, double sigma) {
  return std::exp(-(distance * distance) / (sigma * sigma));
}

Eigen::MatrixXd pairwise_distance_matrix(std::span<const ResampledFiber> a,
                                         std::span<const ResampledFiber> b,
                                         const FiberDistanceParams& params) {
  return kernels::omp::distance_matrix(a, b, params);
}

}  // namespace fibermap

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fibermap/fiber_metric.hpp"
#include "fibermap/streamline.hpp"

namespace fibermap {

enum class TransformFamily { rigid, similarity, affine };

const char* to_string(TransformFamily f);
TransformFamily parse_transform_family(const std::string& s);

// Cost minimized by the registration optimizer.
//  entropy:  -mean over fibers i of log(mean over other-subject fibers j of
//            affinity(i, j) + eps), a Parzen-window entropy estimate.
//  pairwise: -mean over cross-subject pairs of log(affinity(i, j) + eps),
//            see group_objective.
enum class RegistrationObjective { entropy, pairwise };
const char* to_string(RegistrationObjective o);
RegistrationObjective parse_registration_objective(const std::string& s);

struct RegistrationConfig {
  TransformFamily family = TransformFamily::similarity;
  std::vector<double> sigma_schedule{30.0, 20.0, 10.0, 5.0};  // mm, strictly decreasing
  std::size_t fibers_per_subject_sample = 200;
  std::size_t max_iters_per_scale = 10;
  double convergence_tol = 1e-4;  // relative objective change per sweep
  std::uint64_t seed = 0;
  std::size_t points = kDefaultResamplePoints;
  RegistrationObjective objective = RegistrationObjective::entropy;

  void validate() const;
};

struct ObjectiveSample {
  std::size_t scale = 0;  // index into sigma_schedule
  double sigma = 0.0;
  double value = 0.0;
};

struct GroupRegistrationResult {
  std::vector<AffineTransform> transforms;  // one per input subject
  std::vector<ObjectiveSample> objective_trace;
  bool converged = false;
};

inline constexpr double kLogEpsilon = 1e-12;

// Negative mean over ordered cross-subject fiber pairs of
// log(affinity(mcp(T_s f_i, T_t f_j)) + 1e-12), using symmetric MCP.
double group_objective(std::span<const std::vector<ResampledFiber>> samples,
                       std::span<const AffineTransform> transforms, double sigma);

// Parzen-window entropy of the same samples: -mean over fibers i of
// log(mean over fibers j of every other subject of affinity + 1e-12).
double group_entropy(std::span<const std::vector<ResampledFiber>> samples,
                     std::span<const AffineTransform> transforms, double sigma);

// Groupwise alignment by derivative-free coordinate descent over each
// subject's transform parameters, coarse to fine over sigma_schedule.
// The gauge is fixed by keeping mean log-scale and mean translation at zero.
GroupRegistrationResult register_group(std::span<const Tractogram> tractograms,
                                       const RegistrationConfig& cfg);

struct AtlasRegistrationResult {
  AffineTransform transform;
  std::vector<ObjectiveSample> objective_trace;
  bool converged = false;
};

// Aligns one subject onto a fixed fiber sample; the atlas side never moves.
AtlasRegistrationResult register_to_atlas_detailed(const Tractogram& subject,
                                                   std::span<const ResampledFiber> atlas_fibers,
                                                   const RegistrationConfig& cfg);
AffineTransform register_to_atlas(const Tractogram& subject,
                                  std::span<const ResampledFiber> atlas_fibers,
                                  const RegistrationConfig& cfg);

}  // namespace fibermap

#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "fibermap/streamline.hpp"

namespace fibermap {

struct FaProfile {
  double intercept = 0.2;
  double slope = 0.01;  // per age unit (weeks for neonates)
  double noise = 0.02;  // per-point standard deviation
};

struct BundleSpec {
  std::vector<Vec3> centerline;  // control points, mm
  double radius = 3.0;           // mm
  std::size_t fiber_count = 100;
  std::string label;  // tract name from the taxonomy
  FaProfile fa;

  void validate() const;
};

struct CohortSpec {
  std::string id_prefix = "sub";
  std::vector<BundleSpec> bundles;
  std::size_t subjects = 20;
  Group group = Group::neonate;
  double age_min = 29.0;  // uniform scan age range
  double age_max = 45.0;
  double female_fraction = 0.5;    // subjects alternate to approach this ratio
  double preterm_fraction = 0.0;   // birth age < 32 weeks
  // Keys "female", "male", "preterm", "term": slope replacing every bundle's
  // FA slope for that group. Birth status overrides sex.
  std::map<std::string, double> slope_overrides;
  double subject_fa_sd = 0.0;      // per subject-and-bundle FA offset
  double md_intercept = 1.6e-3;    // mm^2/s
  double md_slope = -1.0e-5;
  double md_noise = 5.0e-5;
  double fiber_jitter = 1.0;       // per-subject fiber displacement, mm
  double point_spacing = 2.0;      // mm between generated points
  double max_translation = 0.0;    // mm
  double max_rotation_deg = 0.0;
  double scale = 1.0;              // uniform scale about the origin
  double scale_jitter = 0.0;       // log-uniform relative jitter on scale
  std::uint64_t seed = 0;

  void validate() const;
};

struct GroundTruth {
  std::string subject_id;
  std::vector<std::string> fiber_tracts;  // per streamline
  AffineTransform true_transform;         // template space -> subject space
  std::map<std::string, double> fa_slopes;
  double age = 0.0;
};

struct SyntheticSubject {
  Tractogram tractogram;
  GroundTruth truth;
};

SyntheticSubject generate_subject(const CohortSpec& spec, std::size_t index);
std::vector<SyntheticSubject> generate_cohort(const CohortSpec& spec);

// Eight well-separated bundles in a neonate/adult-sized template space.
std::vector<BundleSpec> default_bundles(std::size_t fibers_per_bundle = 100);

nlohmann::json to_json(const GroundTruth& g);
GroundTruth ground_truth_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CohortSpec& s);
CohortSpec cohort_spec_from_json(const nlohmann::json& j);

// Writes <dir>/<id>.tck/.json/.f64 files plus <dir>/<id>.truth.json per subject;
// returns the tractogram sidecar paths.
std::vector<std::filesystem::path> write_cohort(const std::vector<SyntheticSubject>& cohort,
                                                const std::filesystem::path& dir);

}  // namespace fibermap

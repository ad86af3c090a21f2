#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fibermap/atlas.hpp"

namespace fibermap {

struct ParcellationConfig {
  bool register_subject = true;
  RegistrationConfig registration;
  // Atlas-side fibers used for subject registration (taken from the Nystrom sample).
  std::size_t atlas_registration_fibers = 300;
  // Drop fibers whose embedding distance to their centroid exceeds
  // mean + outlier_c * sd of that cluster's training members.
  bool reject_outliers = false;
  double outlier_c = 3.0;
};

inline constexpr std::size_t kRejected = static_cast<std::size_t>(-1);

struct Parcellation {
  std::string subject_id;
  std::vector<std::size_t> cluster_of_fiber;  // kRejected for rejected outliers
  std::map<std::string, std::vector<std::size_t>> tracts;  // every atlas tract, possibly empty
  std::vector<std::size_t> unlabeled;                       // fibers in unlabeled clusters
  std::vector<std::size_t> rejected;
  AffineTransform transform_used;

  std::size_t fiber_count() const { return cluster_of_fiber.size(); }
  std::size_t tract_count(const std::string& tract) const;
};

// Fibers of atlas-space tractography assigned to the nearest cluster of the
// atlas' spectral embedding and grouped by cluster label.
Parcellation parcellate(const Tractogram& subject, const Atlas& atlas, const ParcellationConfig& cfg);
// Variant with a known subject-to-atlas transform; no registration is run.
Parcellation parcellate_with_transform(const Tractogram& subject, const Atlas& atlas,
                                       const AffineTransform& to_atlas, const ParcellationConfig& cfg = {});

inline constexpr std::size_t kDefaultIdentificationThreshold = 10;

struct IdentificationResult {
  std::string subject_id;
  std::size_t threshold = kDefaultIdentificationThreshold;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, bool> identified;  // counts >= threshold
};

IdentificationResult identify(const Parcellation& parc, std::size_t threshold = kDefaultIdentificationThreshold);

// 100 * (subjects where the tract is identified) / (subjects).
double identification_rate(std::span<const IdentificationResult> results, const std::string& tract);
// identification_rate for every tract present in the first result.
std::map<std::string, double> identification_rates(std::span<const IdentificationResult> results);

nlohmann::json to_json(const Parcellation& p);
Parcellation parcellation_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ParcellationConfig& c);
ParcellationConfig parcellation_config_from_json(const nlohmann::json& j);

}  // namespace fibermap

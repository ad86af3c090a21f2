#pragma once

#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "fibermap/error.hpp"
#include "fibermap/registration.hpp"
#include "fibermap/spectral.hpp"
#include "fibermap/taxonomy.hpp"

namespace fibermap {

struct AtlasBuildConfig {
  std::size_t downsample_per_subject = 210000;
  std::size_t points = kDefaultResamplePoints;
  bool register_subjects = true;
  RegistrationConfig registration;
  NystromConfig nystrom{1500, 10, 30.0, 0, true};
  std::size_t clusters = 800;
  KMeansConfig kmeans;
  std::size_t representatives = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Atlas {
  NystromModel nystrom;
  ClusterModel clusters;
  std::vector<AnatomicalLabel> labels;                           // one per cluster
  std::vector<std::vector<ResampledFiber>> representative_fibers;  // one set per cluster
  // Embedding distance of training members to their centroid, per cluster.
  std::vector<double> member_distance_mean;
  std::vector<double> member_distance_sd;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t k() const { return clusters.k(); }
  std::size_t points() const { return nystrom.points(); }
  bool any_labeled() const;
  // Distinct tract names carried by the labels, taxonomy order.
  std::vector<std::string> tract_names() const;
  void validate() const;
};

struct AtlasBuildResult {
  Atlas atlas;
  std::vector<AffineTransform> transforms;  // per subject, into atlas space
  GroupRegistrationResult registration;
  // The pooled (downsampled, registered, resampled) training fibers.
  std::vector<ResampledFiber> pooled;
  std::vector<std::size_t> pooled_subject;  // subject index per pooled fiber
  std::vector<std::size_t> pooled_source;   // streamline index within its subject
  std::vector<std::size_t> assignments;     // cluster per pooled fiber
};

// subsample -> register_group -> pool and resample -> fit_nystrom -> cluster.
// Every cluster starts unlabeled. Stage failures surface as StageError.
AtlasBuildResult build_atlas(std::span<const Tractogram> tractograms, const AtlasBuildConfig& cfg);

// Mean pairwise MCP between the representative sets of every new cluster
// (rows) and every reference cluster (columns).
Eigen::MatrixXd cluster_correspondence(const Atlas& new_atlas, const Atlas& reference,
                                       const FiberDistanceParams& params);

// Copies each new cluster's label from its nearest reference cluster
// (ties -> lowest reference index). The reference must be fully labeled.
Atlas transfer_labels(const Atlas& new_atlas, const Atlas& reference, const FiberDistanceParams& params);

// Curation from known per-fiber tract names: each cluster takes the most
// frequent name among its members (ties -> first in taxonomy order).
std::vector<AnatomicalLabel> majority_labels(std::size_t k, std::span<const std::size_t> assignments,
                                             std::span<const std::string> fiber_tracts);

// --- Bundle format ----------------------------------------------------------
// A directory holding manifest.json (magic, major.minor version, scalar
// parameters, labels, provenance, and for each array its file, shape and
// CRC-32) plus little-endian float64 array files.

inline constexpr const char* kAtlasMagic = "FIBERMAP-ATLAS";
inline constexpr int kAtlasVersionMajor = 1;
inline constexpr int kAtlasVersionMinor = 0;

class AtlasBundleError : public IoError {
 public:
  enum class Kind { not_an_atlas, version, checksum, truncated };
  AtlasBundleError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

void save_atlas(const Atlas& atlas, const std::filesystem::path& dir);
Atlas load_atlas(const std::filesystem::path& dir);

nlohmann::json to_json(const RegistrationConfig& c);
RegistrationConfig registration_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AtlasBuildConfig& c);
AtlasBuildConfig atlas_config_from_json(const nlohmann::json& j);

}  // namespace fibermap

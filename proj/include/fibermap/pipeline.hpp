#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fibermap/atlas.hpp"
#include "fibermap/parcellation.hpp"
#include "fibermap/stats.hpp"
#include "fibermap/synth.hpp"

namespace fibermap {

inline constexpr int kPipelineFormatVersion = 1;

// A cohort comes either from tractogram files or from the generator.
struct CohortSource {
  std::vector<std::filesystem::path> inputs;  // tractogram sidecars or bare .tck
  std::optional<CohortSpec> synth;
};

struct PipelineConfig {
  int format_version = kPipelineFormatVersion;
  std::filesystem::path output_dir = "run";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  CohortSource neonate;
  CohortSource adult;
  // Labeled reference: an atlas bundle, or a cohort whose sidecars carry
  // per-fiber tract names (the generator's ground truth) to curate one.
  std::optional<std::filesystem::path> reference_atlas;
  std::optional<CohortSource> reference_cohort;
  AtlasBuildConfig reference_build;

  double enlarge_neonates = 1.5;       // applied about each neonate's centroid
  std::size_t atlas_subjects_per_group = 0;  // 0 -> every subject
  AtlasBuildConfig atlas;
  ParcellationConfig parcellation;
  FiberDistanceParams label_metric;    // cluster correspondence
  RegistrationConfig label_registration;

  std::size_t ir_threshold = kDefaultIdentificationThreshold;
  std::vector<std::size_t> ir_thresholds{5, 10, 15};
  Response response = Response::fa;
  std::vector<std::string> covariates{"birth_weight", "head_circumference"};
  bool plot_data = false;

  std::filesystem::path base_dir;  // relative paths resolve against this
};

// Parse errors carry line and column. Environment variables
// FIBERMAP_OUTPUT_DIR and FIBERMAP_REFERENCE_ATLAS override the paths.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const PipelineConfig& c);

// Every violated precondition, empty when the config is runnable.
std::vector<std::string> validate_config(const PipelineConfig& c);

// Desk-scale defaults: synthetic neonate and adult cohorts plus a
// synthetic labeled reference cohort.
PipelineConfig default_pipeline_config();

enum class LogLevel { quiet, normal, verbose };

struct RunOptions {
  bool resume = true;
  LogLevel log_level = LogLevel::normal;
};

struct RunSummary {
  std::filesystem::path run_dir;
  std::map<std::string, double> stage_seconds;
  std::map<std::string, std::string> checksums;  // relative path -> crc32 hex
  std::vector<std::string> resumed_stages;
};

inline const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> s{"ingest", "atlas", "reference", "label",
                                          "parcellate", "measure", "stats"};
  return s;
}

// Runs every stage, writing <output_dir>/manifest.json last. A stage whose
// completion marker matches the current config is loaded, not recomputed.
RunSummary run_pipeline(const PipelineConfig& cfg, const RunOptions& opts = {});

// CRC-32 (hex) of every file under `dir` except the manifest and stage markers.
std::map<std::string, std::string> output_checksums(const std::filesystem::path& dir);

std::string crc32_hex(const std::string& bytes);
std::string file_crc32_hex(const std::filesystem::path& path);

}  // namespace fibermap

#pragma once

#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "fibermap/streamline.hpp"

namespace fibermap {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- MRtrix .tck ---------------------------------------------------------
// Header: "mrtrix tracks\n", "key: value" lines, "END\n". Body at the
// offset named by "file: . <offset>": float triplets, a NaN triplet after
// each fiber and an Inf triplet terminating the file.

struct TckData {
  std::map<std::string, std::string> header;
  std::vector<std::vector<Vec3>> fibers;
};

TckData read_tck(const fs::path& path);
// Writes Float32LE. `header` adds extra key/value lines.
void write_tck(const fs::path& path, const std::vector<std::vector<Vec3>>& fibers,
               const std::map<std::string, std::string>& header = {});

// --- Tractogram bundle ---------------------------------------------------
// <stem>.tck holds the geometry; <stem>.json describes subject meta and lists
// per-point scalar channels, each stored in <stem>.<channel>.f64 as
// little-endian float64 values concatenated in streamline order.

inline constexpr const char* kTractogramFormat = "fibermap-tractogram";
inline constexpr int kTractogramVersion = 1;

struct IngestReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;  // fewer than 2 points or zero length
};

// Returns the written sidecar path (<stem>.json).
fs::path save_tractogram(const Tractogram& t, const fs::path& stem);
// Accepts either the .json sidecar or a bare .tck (no scalars, id from file
// name, default meta).
Tractogram load_tractogram(const fs::path& path, IngestReport* report = nullptr);

json to_json(const SubjectMeta& m);
SubjectMeta meta_from_json(const json& j);
json to_json(const AffineTransform& t);
AffineTransform transform_from_json(const json& j);

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);
void write_f64(const fs::path& path, const std::vector<double>& values);
std::vector<double> read_f64(const fs::path& path);

}  // namespace fibermap

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fibermap/parcellation.hpp"

namespace fibermap {

struct TractMeasureRow {
  std::string subject_id;
  std::string tract;
  std::size_t nos = 0;             // number of streamlines
  std::optional<double> mean_fa;   // absent when nos == 0
  std::optional<double> mean_md;   // absent when nos == 0 or no MD channel
  SubjectMeta meta;
};

using TractMeasureTable = std::vector<TractMeasureRow>;

enum class Aggregation {
  point_weighted,  // every point of every fiber weighs the same
  fiber_mean,      // mean of per-fiber means
};

// One row per tract of the parcellation. Requires an FA channel.
TractMeasureTable extract_measures(const Parcellation& parc, const Tractogram& subject,
                                   Aggregation agg = Aggregation::point_weighted);

// CSV columns: subject_id,tract,nos,mean_fa,mean_md,age_at_scan,sex,group,
// birth_age, then one "cov:<name>" column per covariate (union over rows).
// Absent values are empty fields.
void write_measures_csv(const std::filesystem::path& path, const TractMeasureTable& table);
TractMeasureTable read_measures_csv(const std::filesystem::path& path);

}  // namespace fibermap

#include "fibermap/measures.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "fibermap/error.hpp"

namespace fibermap {

namespace {

std::optional<double> aggregate(const Tractogram& subject, const std::vector<std::size_t>& fibers,
                                const std::string& channel, Aggregation agg) {
  if (fibers.empty()) return std::nullopt;
  double sum = 0.0;
  double weight = 0.0;
  for (std::size_t i : fibers) {
    const auto& values = subject.streamlines[i].channel(channel);
    double s = 0.0;
    for (double v : values) s += v;
    if (agg == Aggregation::point_weighted) {
      sum += s;
      weight += static_cast<double>(values.size());
    } else {
      sum += s / static_cast<double>(values.size());
      weight += 1.0;
    }
  }
  return sum / weight;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

TractMeasureTable extract_measures(const Parcellation& parc, const Tractogram& subject, Aggregation agg) {
  if (parc.fiber_count() != subject.size())
    throw ValidationError("parcellation of '" + parc.subject_id + "' covers " + std::to_string(parc.fiber_count()) +
                          " fibers but the tractogram has " + std::to_string(subject.size()));
  if (subject.streamlines.empty() || !subject.streamlines.front().has_channel(kFA))
    throw ValidationError("subject '" + subject.subject_id + "' has no FA channel");
  const bool has_md = subject.streamlines.front().has_channel(kMD);
  TractMeasureTable out;
  for (const auto& [tract, fibers] : parc.tracts) {
    TractMeasureRow row;
    row.subject_id = subject.subject_id;
    row.tract = tract;
    row.nos = fibers.size();
    row.mean_fa = aggregate(subject, fibers, kFA, agg);
    if (has_md) row.mean_md = aggregate(subject, fibers, kMD, agg);
    row.meta = subject.meta;
    out.push_back(std::move(row));
  }
  return out;
}

void write_measures_csv(const std::filesystem::path& path, const TractMeasureTable& table) {
  std::set<std::string> covs;
  for (const auto& r : table)
    for (const auto& [k, _] : r.meta.covariates) covs.insert(k);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject_id,tract,nos,mean_fa,mean_md,age_at_scan,sex,group,birth_age";
  for (const auto& c : covs) out << ",cov:" << c;
  out << "\n";
  for (const auto& r : table) {
    out << r.subject_id << ',' << r.tract << ',' << r.nos << ',' << (r.mean_fa ? fmt(*r.mean_fa) : "") << ','
        << (r.mean_md ? fmt(*r.mean_md) : "") << ',' << fmt(r.meta.age_at_scan) << ',' << to_string(r.meta.sex)
        << ',' << to_string(r.meta.group) << ',' << (r.meta.birth_age ? fmt(*r.meta.birth_age) : "");
    for (const auto& c : covs) {
      auto it = r.meta.covariates.find(c);
      out << ',' << (it == r.meta.covariates.end() ? "" : fmt(it->second));
    }
    out << "\n";
  }
}

TractMeasureTable read_measures_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty measure table");
  const auto header = split(line);
  if (header.size() < 9 || header[0] != "subject_id" || header[1] != "tract")
    throw IoError(path.string() + ": unexpected measure table header");
  TractMeasureTable out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                    " fields");
    try {
      TractMeasureRow r;
      r.subject_id = f[0];
      r.tract = f[1];
      r.nos = std::stoul(f[2]);
      if (!f[3].empty()) r.mean_fa = std::stod(f[3]);
      if (!f[4].empty()) r.mean_md = std::stod(f[4]);
      r.meta.age_at_scan = std::stod(f[5]);
      r.meta.sex = parse_sex(f[6]);
      r.meta.group = parse_group(f[7]);
      if (!f[8].empty()) r.meta.birth_age = std::stod(f[8]);
      for (std::size_t c = 9; c < header.size(); ++c)
        if (!f[c].empty()) r.meta.covariates[header[c].substr(4)] = std::stod(f[c]);
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fibermap

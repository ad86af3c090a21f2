#include "fibermap/tractogram_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "fibermap/error.hpp"

namespace fibermap {

namespace {

template <typename T>
T byteswap_value(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

template <typename T>
void put_le(std::string& buf, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

template <typename T>
T get(const char* p, bool little) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if ((std::endian::native == std::endian::little) != little) v = byteswap_value(v);
  return v;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TckData read_tck(const fs::path& path) {
  const std::string data = slurp(path);
  if (data.rfind("mrtrix tracks\n", 0) != 0) throw IoError(path.string() + ": not a TCK file");
  TckData out;
  std::size_t pos = std::strlen("mrtrix tracks\n");
  bool ended = false;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) break;
    const std::string line = data.substr(pos, nl - pos);
    pos = nl + 1;
    if (line == "END") {
      ended = true;
      break;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    out.header[trim(line.substr(0, colon))] = trim(line.substr(colon + 1));
  }
  if (!ended) throw IoError(path.string() + ": TCK header missing END");

  std::size_t offset = pos;
  if (auto it = out.header.find("file"); it != out.header.end()) {
    std::istringstream fs_line(it->second);
    std::string dot;
    fs_line >> dot >> offset;
    if (dot != "." || !fs_line) throw IoError(path.string() + ": unsupported TCK file entry");
  }
  const std::string dtype = out.header.count("datatype") ? out.header["datatype"] : "Float32LE";
  std::size_t width;
  bool little;
  if (dtype == "Float32LE" || dtype == "Float32BE") {
    width = 4;
    little = dtype.ends_with("LE");
  } else if (dtype == "Float64LE" || dtype == "Float64BE") {
    width = 8;
    little = dtype.ends_with("LE");
  } else {
    throw IoError(path.string() + ": unsupported TCK datatype " + dtype);
  }
  if (offset > data.size()) throw IoError(path.string() + ": TCK data offset beyond end of file");

  std::vector<Vec3> current;
  bool terminated = false;
  for (std::size_t p = offset; p + 3 * width <= data.size(); p += 3 * width) {
    double v[3];
    for (int k = 0; k < 3; ++k) {
      const char* q = data.data() + p + k * width;
      v[k] = width == 4 ? static_cast<double>(get<float>(q, little)) : get<double>(q, little);
    }
    if (std::isinf(v[0]) && std::isinf(v[1]) && std::isinf(v[2])) {
      terminated = true;
      break;
    }
    if (std::isnan(v[0]) && std::isnan(v[1]) && std::isnan(v[2])) {
      out.fibers.push_back(std::move(current));
      current.clear();
      continue;
    }
    current.emplace_back(v[0], v[1], v[2]);
  }
  if (!current.empty()) out.fibers.push_back(std::move(current));
  if (!terminated && out.header.count("count") &&
      std::to_string(out.fibers.size()) != out.header["count"])
    throw IoError(path.string() + ": TCK data truncated");
  return out;
}

void write_tck(const fs::path& path, const std::vector<std::vector<Vec3>>& fibers,
               const std::map<std::string, std::string>& header) {
  std::string head = "mrtrix tracks\n";
  for (const auto& [k, v] : header) {
    if (k == "datatype" || k == "file" || k == "count") continue;
    head += k + ": " + v + "\n";
  }
  head += "datatype: Float32LE\n";
  head += "count: " + std::to_string(fibers.size()) + "\n";
  // The offset line contains its own length; iterate until stable.
  std::size_t offset = head.size() + std::strlen("file: . \nEND\n") + 1;
  for (;;) {
    const std::size_t total = head.size() + ("file: . " + std::to_string(offset) + "\nEND\n").size();
    if (total <= offset) break;
    offset = total;
  }
  head += "file: . " + std::to_string(offset) + "\nEND\n";
  head.resize(offset, '\0');

  std::string body;
  for (const auto& f : fibers) {
    for (const auto& p : f)
      for (int k = 0; k < 3; ++k) put_le(body, static_cast<float>(p(k)));
    for (int k = 0; k < 3; ++k) put_le(body, std::numeric_limits<float>::quiet_NaN());
  }
  for (int k = 0; k < 3; ++k) put_le(body, std::numeric_limits<float>::infinity());
  spit(path, head + body);
}

json to_json(const SubjectMeta& m) {
  json j;
  j["age_at_scan"] = m.age_at_scan;
  j["sex"] = to_string(m.sex);
  j["group"] = to_string(m.group);
  j["birth_age"] = m.birth_age ? json(*m.birth_age) : json(nullptr);
  j["covariates"] = m.covariates;
  return j;
}

SubjectMeta meta_from_json(const json& j) {
  SubjectMeta m;
  m.age_at_scan = j.at("age_at_scan").get<double>();
  m.sex = parse_sex(j.value("sex", "unknown"));
  m.group = parse_group(j.value("group", "adult"));
  if (j.contains("birth_age") && !j["birth_age"].is_null()) m.birth_age = j["birth_age"].get<double>();
  if (j.contains("covariates")) m.covariates = j["covariates"].get<std::map<std::string, double>>();
  m.validate();
  return m;
}

json to_json(const AffineTransform& t) {
  const auto m = t.row_major();
  return json{{"rows", 3}, {"cols", 4}, {"units", "mm"}, {"matrix", std::vector<double>(m.begin(), m.end())}};
}

AffineTransform transform_from_json(const json& j) {
  const auto v = j.at("matrix").get<std::vector<double>>();
  if (v.size() != 12) throw IoError("transform matrix must have 12 entries (row-major 3x4)");
  std::array<double, 12> a;
  std::copy(v.begin(), v.end(), a.begin());
  return AffineTransform::from_row_major(a);
}

void write_json(const fs::path& path, const json& j) { spit(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  const std::string text = slurp(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_f64(const fs::path& path, const std::vector<double>& values) {
  std::string buf;
  buf.reserve(values.size() * 8);
  for (double v : values) put_le(buf, v);
  spit(path, buf);
}

std::vector<double> read_f64(const fs::path& path) {
  const std::string data = slurp(path);
  if (data.size() % 8 != 0) throw IoError(path.string() + ": float64 array truncated");
  std::vector<double> out(data.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get<double>(data.data() + 8 * i, true);
  return out;
}

fs::path save_tractogram(const Tractogram& t, const fs::path& stem) {
  t.validate();
  const fs::path dir = stem.parent_path();
  const std::string base = stem.filename().string();
  std::vector<std::vector<Vec3>> fibers;
  fibers.reserve(t.size());
  std::size_t points = 0;
  for (const auto& s : t.streamlines) {
    fibers.push_back(s.points());
    points += s.size();
  }
  write_tck(dir / (base + ".tck"), fibers, {{"subject_id", t.subject_id}});

  json j;
  j["format"] = kTractogramFormat;
  j["version"] = kTractogramVersion;
  j["subject_id"] = t.subject_id;
  j["geometry"] = base + ".tck";
  j["streamline_count"] = t.size();
  j["point_count"] = points;
  j["meta"] = to_json(t.meta);
  j["channels"] = json::array();
  // Channels present on every streamline are written.
  for (const auto& [name, _] : t.streamlines.front().scalars()) {
    bool everywhere = true;
    for (const auto& s : t.streamlines) everywhere = everywhere && s.has_channel(name);
    if (!everywhere) continue;
    std::vector<double> values;
    values.reserve(points);
    for (const auto& s : t.streamlines) {
      const auto& c = s.channel(name);
      values.insert(values.end(), c.begin(), c.end());
    }
    const std::string file = base + "." + name + ".f64";
    write_f64(dir / file, values);
    j["channels"].push_back({{"name", name}, {"file", file}, {"dtype", "float64le"}});
  }
  const fs::path sidecar = dir / (base + ".json");
  write_json(sidecar, j);
  return sidecar;
}

Tractogram load_tractogram(const fs::path& path, IngestReport* report) {
  Tractogram t;
  TckData tck;
  std::map<std::string, std::vector<double>> channels;
  if (path.extension() == ".tck") {
    tck = read_tck(path);
    t.subject_id = tck.header.count("subject_id") ? tck.header["subject_id"] : path.stem().string();
  } else {
    const json j = read_json(path);
    if (j.value("format", "") != kTractogramFormat)
      throw IoError(path.string() + ": not a tractogram sidecar");
    if (j.value("version", 0) > kTractogramVersion)
      throw IoError(path.string() + ": tractogram format version " +
                    std::to_string(j.value("version", 0)) + " is newer than supported " +
                    std::to_string(kTractogramVersion));
    const fs::path dir = path.parent_path();
    tck = read_tck(dir / j.at("geometry").get<std::string>());
    t.subject_id = j.at("subject_id").get<std::string>();
    t.meta = meta_from_json(j.at("meta"));
    std::size_t points = 0;
    for (const auto& f : tck.fibers) points += f.size();
    for (const auto& c : j.at("channels")) {
      auto values = read_f64(dir / c.at("file").get<std::string>());
      if (values.size() != points)
        throw IoError(path.string() + ": channel '" + c.at("name").get<std::string>() +
                      "' has " + std::to_string(values.size()) + " values for " +
                      std::to_string(points) + " points");
      channels[c.at("name").get<std::string>()] = std::move(values);
    }
  }

  IngestReport rep;
  std::size_t cursor = 0;
  for (auto& f : tck.fibers) {
    const std::size_t n = f.size();
    double len = 0.0;
    for (std::size_t i = 1; i < n; ++i) len += (f[i] - f[i - 1]).norm();
    if (n < 2 || !(len > 0.0)) {
      ++rep.rejected;
      cursor += n;
      continue;
    }
    ScalarChannels sc;
    for (const auto& [name, values] : channels)
      sc[name] = std::vector<double>(values.begin() + cursor, values.begin() + cursor + n);
    cursor += n;
    t.streamlines.emplace_back(std::move(f), std::move(sc));
    ++rep.accepted;
  }
  if (report) *report = rep;
  return t;
}

}  // namespace fibermap

#include "fibermap/pipeline.hpp"

#include <spdlog/spdlog.h>
#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "fibermap/measures.hpp"
#include "fibermap/tractogram_io.hpp"

#ifdef FIBERMAP_HAVE_OPENMP
#include <omp.h>
#endif

namespace fibermap {

namespace fs = std::filesystem;
using nlohmann::json;

// --- checksums ----------------------------------------------------------------

std::string crc32_hex(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

std::string file_crc32_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
  }
  char out[16];
  std::snprintf(out, sizeof out, "%08lx", static_cast<unsigned long>(crc));
  return out;
}

std::map<std::string, std::string> output_checksums(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel.rfind("stages/", 0) == 0) continue;
    out[rel] = file_crc32_hex(e.path());
  }
  return out;
}

// --- config ---------------------------------------------------------------------

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

json metric_to_json(const FiberDistanceParams& p) {
  return {{"variant", p.variant == McpVariant::symmetric_mean ? "symmetric_mean" : "directed_mean"},
          {"sigma", p.sigma}};
}

FiberDistanceParams metric_from_json(const json& j) {
  FiberDistanceParams p;
  const std::string v = j.value("variant", std::string("symmetric_mean"));
  if (v == "symmetric_mean")
    p.variant = McpVariant::symmetric_mean;
  else if (v == "directed_mean")
    p.variant = McpVariant::directed_mean;
  else
    throw ValidationError("unknown MCP variant '" + v + "'");
  p.sigma = j.value("sigma", p.sigma);
  return p;
}

json cohort_to_json(const CohortSource& c) {
  json j = json::object();
  if (c.synth) j["synth"] = to_json(*c.synth);
  if (!c.inputs.empty()) {
    json a = json::array();
    for (const auto& p : c.inputs) a.push_back(p.generic_string());
    j["inputs"] = a;
  }
  return j;
}

CohortSource cohort_from_json(const json& j, const fs::path& base) {
  CohortSource c;
  if (j.contains("synth")) c.synth = cohort_spec_from_json(j["synth"]);
  if (j.contains("inputs"))
    for (const auto& p : j["inputs"]) c.inputs.push_back(resolve(base, p.get<std::string>()));
  return c;
}

}  // namespace

json to_json(const PipelineConfig& c) {
  json j = {{"format_version", c.format_version},
            {"output_dir", c.output_dir.generic_string()},
            {"seed", c.seed},
            {"jobs", c.jobs},
            {"cohorts", {{"neonate", cohort_to_json(c.neonate)}, {"adult", cohort_to_json(c.adult)}}},
            {"enlarge_neonates", c.enlarge_neonates},
            {"atlas_subjects_per_group", c.atlas_subjects_per_group},
            {"atlas", to_json(c.atlas)},
            {"reference_build", to_json(c.reference_build)},
            {"parcellation", to_json(c.parcellation)},
            {"labeling", {{"metric", metric_to_json(c.label_metric)}, {"registration", to_json(c.label_registration)}}},
            {"ir", {{"threshold", c.ir_threshold}, {"thresholds", c.ir_thresholds}}},
            {"stats", {{"response", to_string(c.response)}, {"covariates", c.covariates}}},
            {"plot_data", c.plot_data}};
  json ref = json::object();
  if (c.reference_atlas) ref["atlas"] = c.reference_atlas->generic_string();
  if (c.reference_cohort) ref["cohort"] = cohort_to_json(*c.reference_cohort);
  j["reference"] = ref;
  return j;
}

PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base) {
  PipelineConfig c;
  c.base_dir = base;
  auto section = [](const char* name, auto&& f) {
    try {
      f();
    } catch (const json::exception& e) {
      throw ValidationError(std::string(name) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(name) + ": " + e.what());
    }
  };
  if (!j.is_object()) throw ValidationError("pipeline config must be a JSON object");
  section("format_version", [&] { c.format_version = j.at("format_version").get<int>(); });
  section("output_dir", [&] { c.output_dir = resolve(base, j.value("output_dir", std::string("run"))); });
  section("seed", [&] { c.seed = j.value("seed", c.seed); });
  section("jobs", [&] { c.jobs = j.value("jobs", c.jobs); });
  section("cohorts", [&] {
    const auto& co = j.at("cohorts");
    c.neonate = cohort_from_json(co.at("neonate"), base);
    c.adult = cohort_from_json(co.at("adult"), base);
  });
  section("reference", [&] {
    const auto& r = j.at("reference");
    if (r.contains("atlas")) c.reference_atlas = resolve(base, r["atlas"].get<std::string>());
    if (r.contains("cohort")) c.reference_cohort = cohort_from_json(r["cohort"], base);
  });
  section("enlarge_neonates", [&] { c.enlarge_neonates = j.value("enlarge_neonates", c.enlarge_neonates); });
  section("atlas_subjects_per_group",
          [&] { c.atlas_subjects_per_group = j.value("atlas_subjects_per_group", c.atlas_subjects_per_group); });
  section("atlas", [&] {
    if (j.contains("atlas")) c.atlas = atlas_config_from_json(j["atlas"]);
  });
  section("reference_build", [&] {
    if (j.contains("reference_build")) c.reference_build = atlas_config_from_json(j["reference_build"]);
  });
  section("parcellation", [&] {
    if (j.contains("parcellation")) c.parcellation = parcellation_config_from_json(j["parcellation"]);
  });
  section("labeling", [&] {
    if (!j.contains("labeling")) return;
    const auto& l = j["labeling"];
    if (l.contains("metric")) c.label_metric = metric_from_json(l["metric"]);
    if (l.contains("registration")) c.label_registration = registration_config_from_json(l["registration"]);
  });
  section("ir", [&] {
    if (!j.contains("ir")) return;
    c.ir_threshold = j["ir"].value("threshold", c.ir_threshold);
    c.ir_thresholds = j["ir"].value("thresholds", c.ir_thresholds);
  });
  section("stats", [&] {
    if (!j.contains("stats")) return;
    c.response = parse_response(j["stats"].value("response", std::string(to_string(c.response))));
    c.covariates = j["stats"].value("covariates", c.covariates);
  });
  section("plot_data", [&] { c.plot_data = j.value("plot_data", c.plot_data); });
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  PipelineConfig c = pipeline_config_from_json(j, path.parent_path());
  if (const char* o = std::getenv("FIBERMAP_OUTPUT_DIR"); o && *o) c.output_dir = o;
  if (const char* r = std::getenv("FIBERMAP_REFERENCE_ATLAS"); r && *r) {
    c.reference_atlas = fs::path(r);
    c.reference_cohort.reset();
  }
  return c;
}

namespace {

// Reads only the "count" field of a .tck header, or the sidecar's count.
std::optional<std::size_t> streamline_count(const fs::path& p) {
  try {
    if (p.extension() == ".json") return read_json(p).at("streamline_count").get<std::size_t>();
    std::ifstream in(p, std::ios::binary);
    std::string line;
    while (std::getline(in, line) && line != "END") {
      if (line.rfind("count:", 0) == 0) return std::stoul(line.substr(6));
    }
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

// Fiber counts per subject if statically known.
std::optional<std::vector<std::size_t>> cohort_sizes(const CohortSource& c) {
  std::vector<std::size_t> out;
  if (c.synth) {
    std::size_t n = 0;
    for (const auto& b : c.synth->bundles) n += b.fiber_count;
    out.assign(c.synth->subjects, n);
    return out;
  }
  for (const auto& p : c.inputs) {
    auto n = streamline_count(p);
    if (!n) return std::nullopt;
    out.push_back(*n);
  }
  return out;
}

void check_cohort(const std::string& name, const CohortSource& c, std::vector<std::string>& errors) {
  if (c.synth && !c.inputs.empty()) errors.push_back(name + ": give either synth or inputs, not both");
  if (!c.synth && c.inputs.empty()) errors.push_back(name + ": needs synth or a nonempty inputs list");
  if (c.synth) {
    try {
      c.synth->validate();
    } catch (const std::exception& e) {
      errors.push_back(name + ".synth: " + e.what());
    }
  }
  for (const auto& p : c.inputs)
    if (!fs::exists(p)) errors.push_back(name + ".inputs: missing input path " + p.string());
}

void check_build(const std::string& name, const AtlasBuildConfig& b, std::size_t subjects,
                 const std::optional<std::vector<std::size_t>>& sizes, std::vector<std::string>& errors) {
  try {
    b.validate();
  } catch (const std::exception& e) {
    errors.push_back(name + ": " + e.what());
  }
  if (subjects < 2) errors.push_back(name + ": atlas construction needs at least 2 subjects, got " + std::to_string(subjects));
  if (b.register_subjects && b.registration.fibers_per_subject_sample > b.downsample_per_subject)
    errors.push_back(name + ": registration sample " + std::to_string(b.registration.fibers_per_subject_sample) +
                     " exceeds downsample_per_subject " + std::to_string(b.downsample_per_subject));
  if (!sizes) {
    // Cohort sizes are unknown until ingest, but downsampling caps the pool.
    const std::size_t cap = subjects * b.downsample_per_subject;
    if (b.clusters > cap)
      errors.push_back(name + ": cluster count K=" + std::to_string(b.clusters) + " exceeds pooled fiber count " +
                       std::to_string(cap) + " (upper bound)");
    return;
  }
  std::size_t pooled = 0;
  for (std::size_t s = 0; s < std::min(subjects, sizes->size()); ++s) {
    if ((*sizes)[s] < b.downsample_per_subject)
      errors.push_back(name + ": subject " + std::to_string(s) + " has " + std::to_string((*sizes)[s]) +
                       " streamlines, fewer than downsample_per_subject " + std::to_string(b.downsample_per_subject));
    pooled += std::min((*sizes)[s], b.downsample_per_subject);
  }
  if (b.clusters > pooled)
    errors.push_back(name + ": cluster count K=" + std::to_string(b.clusters) + " exceeds pooled fiber count " +
                     std::to_string(pooled));
}

std::size_t atlas_subjects(const PipelineConfig& c, std::size_t cohort_size) {
  return c.atlas_subjects_per_group == 0 ? cohort_size : std::min(c.atlas_subjects_per_group, cohort_size);
}

}  // namespace

std::vector<std::string> validate_config(const PipelineConfig& c) {
  std::vector<std::string> errors;
  if (c.format_version != kPipelineFormatVersion)
    errors.push_back("format_version: expected " + std::to_string(kPipelineFormatVersion) + ", got " +
                     std::to_string(c.format_version));
  if (c.output_dir.empty()) errors.push_back("output_dir: must not be empty");
  if (c.jobs < 1) errors.push_back("jobs: must be >= 1");
  check_cohort("cohorts.neonate", c.neonate, errors);
  check_cohort("cohorts.adult", c.adult, errors);
  if (c.reference_atlas && c.reference_cohort) errors.push_back("reference: give either atlas or cohort, not both");
  if (!c.reference_atlas && !c.reference_cohort) errors.push_back("reference: needs an atlas or a labeled cohort");
  if (c.reference_atlas && !fs::exists(*c.reference_atlas / "manifest.json"))
    errors.push_back("reference.atlas: missing atlas bundle " + c.reference_atlas->string());
  if (c.reference_cohort) {
    check_cohort("reference.cohort", *c.reference_cohort, errors);
    for (const auto& p : c.reference_cohort->inputs) {
      fs::path truth = p;
      truth.replace_extension(".truth.json");
      if (!fs::exists(truth)) errors.push_back("reference.cohort.inputs: missing label sidecar " + truth.string());
    }
  }
  if (!(c.enlarge_neonates > 0.0)) errors.push_back("enlarge_neonates: must be > 0");

  const auto ns = cohort_sizes(c.neonate);
  const auto as = cohort_sizes(c.adult);
  const std::size_t n_neo = c.neonate.synth ? c.neonate.synth->subjects : c.neonate.inputs.size();
  const std::size_t n_adu = c.adult.synth ? c.adult.synth->subjects : c.adult.inputs.size();
  std::optional<std::vector<std::size_t>> pooled_sizes;
  if (ns && as) {
    std::vector<std::size_t> v(ns->begin(), ns->begin() + static_cast<std::ptrdiff_t>(atlas_subjects(c, ns->size())));
    v.insert(v.end(), as->begin(), as->begin() + static_cast<std::ptrdiff_t>(atlas_subjects(c, as->size())));
    pooled_sizes = v;
  }
  check_build("atlas", c.atlas, atlas_subjects(c, n_neo) + atlas_subjects(c, n_adu), pooled_sizes, errors);
  if (c.reference_cohort) {
    const auto rs = cohort_sizes(*c.reference_cohort);
    const std::size_t nr = c.reference_cohort->synth ? c.reference_cohort->synth->subjects : c.reference_cohort->inputs.size();
    check_build("reference_build", c.reference_build, nr, rs, errors);
  }
  if (c.parcellation.register_subject) {
    try {
      c.parcellation.registration.validate();
    } catch (const std::exception& e) {
      errors.push_back(std::string("parcellation.registration: ") + e.what());
    }
    if (c.parcellation.atlas_registration_fibers < 1)
      errors.push_back("parcellation.atlas_registration_fibers: must be >= 1");
  }
  if (c.parcellation.registration.points != c.atlas.points)
    errors.push_back("parcellation.registration.points: must equal atlas.points");
  try {
    c.label_registration.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("labeling.registration: ") + e.what());
  }
  if (c.label_registration.points != c.atlas.points)
    errors.push_back("labeling.registration.points: must equal atlas.points");
  try {
    c.label_metric.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("labeling.metric: ") + e.what());
  }
  if (c.ir_threshold < 1) errors.push_back("ir.threshold: must be >= 1");
  if (c.ir_thresholds.empty()) errors.push_back("ir.thresholds: must be nonempty");
  for (std::size_t t : c.ir_thresholds)
    if (t < 1) errors.push_back("ir.thresholds: every threshold must be >= 1");
  for (const auto& cov : c.covariates)
    if (cov.empty()) errors.push_back("stats.covariates: empty covariate name");
  return errors;
}

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  c.seed = 20240601;

  RegistrationConfig reg;
  reg.family = TransformFamily::similarity;
  reg.sigma_schedule = {20.0, 10.0, 5.0};
  reg.fibers_per_subject_sample = 40;
  reg.max_iters_per_scale = 6;
  reg.convergence_tol = 1e-3;

  CohortSpec neo;
  neo.id_prefix = "neo";
  neo.bundles = default_bundles(100);
  neo.subjects = 36;
  neo.group = Group::neonate;
  neo.age_min = 29.0;
  neo.age_max = 45.0;
  neo.female_fraction = 0.5;
  neo.preterm_fraction = 1.0 / 3.0;
  neo.subject_fa_sd = 0.01;
  neo.fiber_jitter = 1.0;
  neo.max_translation = 5.0;
  neo.max_rotation_deg = 5.0;
  neo.scale = 1.0 / 1.5;
  neo.scale_jitter = 0.05;
  neo.seed = c.seed + 1;

  CohortSpec adult = neo;
  adult.id_prefix = "adult";
  adult.subjects = 12;
  adult.group = Group::adult;
  adult.age_min = 22.0;
  adult.age_max = 37.0;
  adult.preterm_fraction = 0.0;
  adult.scale = 1.0;
  adult.seed = c.seed + 2;
  for (auto& b : adult.bundles) {
    // Mature FA with a flat age trend.
    b.fa.intercept = std::min(0.85, b.fa.intercept + 44.0 * b.fa.slope + 0.05);
    b.fa.slope = 0.0005;
  }
  adult.md_intercept = 0.9e-3;
  adult.md_slope = 0.0;

  CohortSpec ref = adult;
  ref.id_prefix = "ref";
  ref.subjects = 4;
  ref.seed = c.seed + 3;

  c.neonate.synth = neo;
  c.adult.synth = adult;
  c.reference_cohort = CohortSource{{}, ref};

  c.atlas_subjects_per_group = 4;
  c.atlas.downsample_per_subject = 200;
  c.atlas.registration = reg;
  c.atlas.registration.seed = c.seed + 10;
  c.atlas.nystrom = {300, 10, 30.0, c.seed + 11, true};
  c.atlas.clusters = 40;
  c.atlas.representatives = 10;
  c.atlas.seed = c.seed + 12;
  c.reference_build = c.atlas;
  c.reference_build.seed = c.seed + 20;
  c.reference_build.registration.seed = c.seed + 21;
  c.reference_build.nystrom.seed = c.seed + 22;

  c.parcellation.registration = reg;
  c.parcellation.registration.seed = c.seed + 30;
  c.parcellation.atlas_registration_fibers = 100;
  c.label_registration = reg;
  c.label_registration.fibers_per_subject_sample = 60;
  c.label_registration.seed = c.seed + 40;
  return c;
}

// --- running ----------------------------------------------------------------------

namespace {

struct Logger {
  LogLevel level;
  void info(const std::string& stage, const std::string& subject, double secs, const std::string& msg) const {
    if (level == LogLevel::quiet) return;
    spdlog::info("stage={} subject={} wall={:.3f}s {}", stage, subject.empty() ? "-" : subject, secs, msg);
  }
  void debug(const std::string& stage, const std::string& subject, double secs, const std::string& msg) const {
    if (level != LogLevel::verbose) return;
    spdlog::info("stage={} subject={} wall={:.3f}s {}", stage, subject.empty() ? "-" : subject, secs, msg);
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
  if (!out) throw IoError("write failed for " + p.string());
}

std::string category_name(const std::string& tract) {
  const auto c = category_of(tract);
  return c ? to_string(*c) : "";
}

// Ordered list of subject ids of an ingested cohort.
std::vector<std::string> read_subject_list(const fs::path& dir) {
  return read_json(dir / "subjects.json").at("subjects").get<std::vector<std::string>>();
}

std::vector<Tractogram> load_cohort(const fs::path& dir) {
  std::vector<Tractogram> out;
  for (const auto& id : read_subject_list(dir)) out.push_back(load_tractogram(dir / (id + ".json")));
  return out;
}

Tractogram enlarged(const Tractogram& t, double factor) {
  if (factor == 1.0) return t;
  return apply_transform(t, centroid_scaling(t, factor));
}

// Writes the cohort into `dir`, returning ingest counts.
json ingest_cohort(const CohortSource& src, const fs::path& dir, bool with_truth) {
  fs::create_directories(dir);
  std::vector<std::string> ids;
  json reports = json::array();
  if (src.synth) {
    const auto cohort = generate_cohort(*src.synth);
    write_cohort(cohort, dir);
    for (const auto& s : cohort) {
      ids.push_back(s.tractogram.subject_id);
      reports.push_back({{"subject_id", s.tractogram.subject_id}, {"accepted", s.tractogram.size()}, {"rejected", 0}});
    }
  } else {
    std::set<std::string> seen;
    for (const auto& p : src.inputs) {
      IngestReport rep;
      Tractogram t = load_tractogram(p, &rep);
      if (!seen.insert(t.subject_id).second) throw ValidationError("duplicate subject id '" + t.subject_id + "'");
      save_tractogram(t, dir / t.subject_id);
      if (with_truth) {
        fs::path truth = p;
        truth.replace_extension(".truth.json");
        const GroundTruth g = ground_truth_from_json(read_json(truth));
        if (g.fiber_tracts.size() != rep.accepted + rep.rejected)
          throw ValidationError("label sidecar of '" + t.subject_id + "' does not match its streamline count");
        if (rep.rejected != 0)
          throw ValidationError("labeled reference subject '" + t.subject_id + "' has rejected streamlines");
        write_json(dir / (t.subject_id + ".truth.json"), to_json(g));
      }
      ids.push_back(t.subject_id);
      reports.push_back({{"subject_id", t.subject_id}, {"accepted", rep.accepted}, {"rejected", rep.rejected}});
    }
  }
  write_json(dir / "subjects.json", {{"subjects", ids}, {"ingest", reports}});
  return reports;
}

void write_glm_csv(const fs::path& p, const std::vector<GLMResult>& fits) {
  std::string s = "tract,category,n,beta,intercept,std_error,t,df,p,p_bonferroni,ci_low,ci_high,dropped_missing\n";
  for (const auto& f : fits)
    s += f.tract + "," + category_name(f.tract) + "," + std::to_string(f.n) + "," + num(f.beta) + "," +
         num(f.intercept) + "," + num(f.std_error) + "," + num(f.t_stat) + "," + num(f.df) + "," + num(f.p_value) +
         "," + num(f.p_bonferroni) + "," + num(f.ci_low) + "," + num(f.ci_high) + "," +
         std::to_string(f.dropped_missing) + "\n";
  write_text(p, s);
}

void write_comparison_csv(const fs::path& p, const fs::path& cat_path, const GroupComparison& g,
                          const std::string& a, const std::string& b) {
  std::string s = "tract,category,beta_" + a + ",p_" + a + ",n_" + a + ",beta_" + b + ",p_" + b + ",n_" + b + "\n";
  for (const auto& r : g.rows)
    s += r.tract + "," + category_name(r.tract) + "," + num(r.a.beta) + "," + num(r.a.p_value) + "," +
         std::to_string(r.a.n) + "," + num(r.b.beta) + "," + num(r.b.p_value) + "," + std::to_string(r.b.n) + "\n";
  write_text(p, s);
  std::string c = "category,mean_beta_" + a + ",mean_beta_" + b + ",tracts\n";
  for (const auto& [cat, m] : g.categories)
    c += std::string(to_string(cat)) + "," + num(m.mean_beta_a) + "," + num(m.mean_beta_b) + "," +
         std::to_string(m.tracts) + "\n";
  write_text(cat_path, c);
}

json comparison_summary(const GroupComparison& g, const std::string& a, const std::string& b) {
  std::size_t a_higher = 0, b_higher = 0;
  for (const auto& r : g.rows) (r.a.beta > r.b.beta ? a_higher : b_higher)++;
  return {{"tracts", g.rows.size()}, {a + "_higher", a_higher}, {b + "_higher", b_higher}, {"excluded", g.excluded}};
}

bool full_term(const SubjectMeta& m) { return !m.birth_age || *m.birth_age >= 32.0; }

TractMeasureTable rows_for(const TractMeasureTable& t, const std::set<std::string>& subjects) {
  TractMeasureTable out;
  for (const auto& r : t)
    if (subjects.count(r.subject_id)) out.push_back(r);
  return out;
}

// Largest set of female/male pairs whose scan ages differ by at most `tol`,
// by a two-pointer sweep over both age-sorted lists.
std::pair<std::set<std::string>, std::set<std::string>> age_matched(
    std::vector<std::pair<double, std::string>> females, std::vector<std::pair<double, std::string>> males,
    double tol) {
  std::sort(females.begin(), females.end());
  std::sort(males.begin(), males.end());
  std::set<std::string> f, m;
  std::size_t i = 0, j = 0;
  while (i < females.size() && j < males.size()) {
    const double d = females[i].first - males[j].first;
    if (std::abs(d) <= tol) {
      f.insert(females[i++].second);
      m.insert(males[j++].second);
    } else if (d < 0) {
      ++i;
    } else {
      ++j;
    }
  }
  return {f, m};
}

// Equal numbers of each sex, keeping the earliest subjects of the larger sex.
std::set<std::string> sex_balanced(const std::vector<Tractogram>& cohort, const std::set<std::string>& ids) {
  std::vector<std::string> f, m;
  for (const auto& t : cohort) {
    if (!ids.count(t.subject_id)) continue;
    if (t.meta.sex == Sex::female) f.push_back(t.subject_id);
    if (t.meta.sex == Sex::male) m.push_back(t.subject_id);
  }
  const std::size_t n = std::min(f.size(), m.size());
  std::set<std::string> out(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(n));
  out.insert(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

// Runs f(i) for i in [0, n) on up to `jobs` threads; the first failure by
// index is rethrown after every task finished.
template <typename F>
void fan_out(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#ifdef FIBERMAP_HAVE_OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(static_cast<int>(std::max<std::size_t>(1, jobs)))
#else
  (void)jobs;
#endif
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

class Runner {
 public:
  Runner(const PipelineConfig& cfg, const RunOptions& opts)
      : cfg_(cfg), opts_(opts), dir_(cfg.output_dir), log_{opts.log_level} {
    hash_ = crc32_hex(config_for_hash().dump());
  }

  RunSummary run() {
    fs::create_directories(dir_ / "stages");
    RunSummary summary;
    summary.run_dir = dir_;
    json stages = json::array();
    bool fresh = false;  // once a stage reruns, every later stage does too
    for (const auto& name : pipeline_stages()) {
      const auto t0 = std::chrono::steady_clock::now();
      const bool skip = !fresh && opts_.resume && marker_valid(name);
      if (skip) {
        summary.resumed_stages.push_back(name);
        log_.info(name, "", 0.0, "resumed from completion marker");
      } else {
        fresh = true;
        fs::remove(marker(name));
        try {
          run_stage(name);
        } catch (const StageError&) {
          throw;
        } catch (const std::exception& e) {
          throw StageError(name, e.what(), std::current_exception());
        }
        write_json(marker(name), {{"config_hash", hash_}});
      }
      const double secs = seconds_since(t0);
      summary.stage_seconds[name] = secs;
      stages.push_back({{"name", name}, {"seconds", secs}, {"resumed", skip}});
      if (!skip) log_.info(name, "", secs, "done");
    }
    summary.checksums = output_checksums(dir_);
    json inputs = json::object();
    for (const auto* src : {&cfg_.neonate, &cfg_.adult})
      for (const auto& p : src->inputs) inputs[p.generic_string()] = file_crc32_hex(p);
    if (cfg_.reference_cohort)
      for (const auto& p : cfg_.reference_cohort->inputs) inputs[p.generic_string()] = file_crc32_hex(p);
    json manifest = {{"format", "fibermap-run"},
                     {"format_version", kPipelineFormatVersion},
                     {"config_hash", hash_},
                     {"config", to_json(cfg_)},
                     {"seeds", seeds()},
                     {"stages", stages},
                     {"inputs", inputs},
                     {"outputs", summary.checksums}};
    write_json(dir_ / "manifest.json", manifest);
    return summary;
  }

 private:
  // Output-affecting configuration: paths to the run directory and the
  // worker count are excluded.
  json config_for_hash() const {
    json j = to_json(cfg_);
    j.erase("output_dir");
    j.erase("jobs");
    return j;
  }

  json seeds() const {
    json s = {{"pipeline", cfg_.seed},
              {"atlas", cfg_.atlas.seed},
              {"atlas_registration", cfg_.atlas.registration.seed},
              {"atlas_nystrom", cfg_.atlas.nystrom.seed},
              {"parcellation_registration", cfg_.parcellation.registration.seed},
              {"label_registration", cfg_.label_registration.seed}};
    if (cfg_.neonate.synth) s["neonate_synth"] = cfg_.neonate.synth->seed;
    if (cfg_.adult.synth) s["adult_synth"] = cfg_.adult.synth->seed;
    if (cfg_.reference_cohort) {
      s["reference_build"] = cfg_.reference_build.seed;
      if (cfg_.reference_cohort->synth) s["reference_synth"] = cfg_.reference_cohort->synth->seed;
    }
    return s;
  }

  fs::path marker(const std::string& stage) const { return dir_ / "stages" / (stage + ".done"); }

  bool marker_valid(const std::string& stage) const {
    try {
      return fs::exists(marker(stage)) && read_json(marker(stage)).value("config_hash", "") == hash_;
    } catch (const std::exception&) {
      return false;
    }
  }

  void run_stage(const std::string& name) {
    if (name == "ingest") return ingest();
    if (name == "atlas") return atlas();
    if (name == "reference") return reference();
    if (name == "label") return label();
    if (name == "parcellate") return parcellate_all();
    if (name == "measure") return measure();
    if (name == "stats") return stats();
  }

  void ingest() {
    fs::remove_all(dir_ / "ingest");
    for (const auto& [group, src] : {std::pair{"neonate", &cfg_.neonate}, std::pair{"adult", &cfg_.adult}}) {
      const auto t0 = std::chrono::steady_clock::now();
      const json rep = ingest_cohort(*src, dir_ / "ingest" / group, false);
      log_.info("ingest", "", seconds_since(t0), std::string(group) + " subjects=" + std::to_string(rep.size()));
    }
    if (cfg_.reference_cohort) ingest_cohort(*cfg_.reference_cohort, dir_ / "ingest" / "reference", true);
  }

  // Training subjects: the first atlas_subjects_per_group of each cohort, with
  // neonates enlarged to adult size.
  void atlas() {
    const fs::path out = dir_ / "atlas";
    fs::remove_all(out);
    std::vector<Tractogram> train;
    for (const char* group : {"neonate", "adult"}) {
      const auto cohort = load_cohort(dir_ / "ingest" / group);
      const std::size_t n = atlas_subjects(cfg_, cohort.size());
      for (std::size_t i = 0; i < n; ++i)
        train.push_back(std::string(group) == "neonate" ? enlarged(cohort[i], cfg_.enlarge_neonates) : cohort[i]);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const AtlasBuildResult res = build_atlas(train, cfg_.atlas);
    log_.info("atlas", "", seconds_since(t0),
              "subjects=" + std::to_string(train.size()) + " pooled=" + std::to_string(res.pooled.size()) +
                  " K=" + std::to_string(res.atlas.k()) + " converged=" + (res.registration.converged ? "1" : "0"));
    save_atlas(res.atlas, out / "unlabeled");
    for (std::size_t s = 0; s < train.size(); ++s)
      write_json(out / "transforms" / (train[s].subject_id + ".json"), to_json(res.transforms[s]));
    std::string trace = "scale,sigma,objective\n";
    for (const auto& o : res.registration.objective_trace)
      trace += std::to_string(o.scale) + "," + num(o.sigma) + "," + num(o.value) + "\n";
    write_text(out / "objective_trace.csv", trace);
  }

  void reference() {
    const fs::path out = dir_ / "reference";
    fs::remove_all(out);
    if (cfg_.reference_atlas) {
      Atlas a = load_atlas(*cfg_.reference_atlas);
      for (std::size_t k = 0; k < a.k(); ++k)
        if (!a.labels[k].labeled())
          throw ValidationError("reference atlas cluster " + std::to_string(k) + " is unlabeled");
      save_atlas(a, out / "atlas");
      return;
    }
    const fs::path in = dir_ / "ingest" / "reference";
    const auto cohort = load_cohort(in);
    std::vector<GroundTruth> truth;
    for (const auto& t : cohort) truth.push_back(ground_truth_from_json(read_json(in / (t.subject_id + ".truth.json"))));
    const auto t0 = std::chrono::steady_clock::now();
    AtlasBuildResult res = build_atlas(cohort, cfg_.reference_build);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < res.pooled.size(); ++i)
      names.push_back(truth[res.pooled_subject[i]].fiber_tracts[res.pooled_source[i]]);
    res.atlas.labels = majority_labels(res.atlas.k(), res.assignments, names);
    res.atlas.provenance["labels"] = "majority vote of per-fiber ground-truth tracts";
    log_.info("reference", "", seconds_since(t0), "K=" + std::to_string(res.atlas.k()));
    save_atlas(res.atlas, out / "atlas");
  }

  // The new atlas' representatives are registered onto the reference's, and
  // each new cluster takes the label of its nearest reference cluster.
  void label() {
    const fs::path out = dir_ / "atlas";
    fs::remove_all(out / "labeled");
    Atlas fresh = load_atlas(out / "unlabeled");
    const Atlas ref = load_atlas(dir_ / "reference" / "atlas");
    Tractogram reps{"atlas-representatives", {}, {}};
    for (const auto& set : fresh.representative_fibers)
      for (const auto& f : set) reps.streamlines.emplace_back(f.points);
    std::vector<ResampledFiber> targets;
    for (const auto& set : ref.representative_fibers) targets.insert(targets.end(), set.begin(), set.end());
    RegistrationConfig rc = cfg_.label_registration;
    rc.points = fresh.points();
    const auto t0 = std::chrono::steady_clock::now();
    const AffineTransform to_ref = register_to_atlas(reps, targets, rc);
    Atlas moved = fresh;
    for (auto& set : moved.representative_fibers)
      for (auto& f : set) f = apply_transform(f, to_ref);
    const Atlas labeled_moved = transfer_labels(moved, ref, cfg_.label_metric);
    const Eigen::MatrixXd d = cluster_correspondence(moved, ref, cfg_.label_metric);
    fresh.labels = labeled_moved.labels;
    fresh.provenance["labels"] = "transferred from reference atlas by nearest representative MCP";
    save_atlas(fresh, out / "labeled");
    write_json(out / "label_transform.json", to_json(to_ref));
    std::string s = "cluster,reference_cluster,mean_mcp,tract\n";
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      Eigen::Index j;
      const double v = d.row(i).minCoeff(&j);
      s += std::to_string(i) + "," + std::to_string(j) + "," + num(v) + "," + fresh.labels[static_cast<std::size_t>(i)].tract_name + "\n";
    }
    write_text(out / "label_transfer.csv", s);
    log_.info("label", "", seconds_since(t0), "tracts=" + std::to_string(fresh.tract_names().size()));
  }

  void parcellate_all() {
    const fs::path out = dir_ / "parcellation";
    fs::remove_all(out);
    const Atlas joint = load_atlas(dir_ / "atlas" / "labeled");
    const Atlas ref = load_atlas(dir_ / "reference" / "atlas");
    for (const char* group : {"neonate", "adult"}) {
      const auto cohort = load_cohort(dir_ / "ingest" / group);
      const bool neo = std::string(group) == "neonate";
      for (const auto& [atlas_name, atlas] : {std::pair{"joint", &joint}, std::pair{"reference", &ref}}) {
        std::vector<Parcellation> parcs(cohort.size());
        fan_out(cohort.size(), cfg_.jobs, [&](std::size_t i) {
          const auto t0 = std::chrono::steady_clock::now();
          try {
            // Neonates meet the joint atlas at adult size, as in training.
            const Tractogram subject = neo && std::string(atlas_name) == "joint"
                                           ? enlarged(cohort[i], cfg_.enlarge_neonates)
                                           : cohort[i];
            ParcellationConfig pc = cfg_.parcellation;
            parcs[i] = parcellate(subject, *atlas, pc);
          } catch (const std::exception& e) {
            throw StageError("parcellate", "subject " + cohort[i].subject_id + ": " + e.what(), std::current_exception());
          }
          log_.debug("parcellate", cohort[i].subject_id, seconds_since(t0), std::string("atlas=") + atlas_name);
        });
        for (const auto& p : parcs) write_json(out / atlas_name / group / (p.subject_id + ".json"), to_json(p));
      }
    }
  }

  void measure() {
    const fs::path out = dir_ / "measures";
    fs::remove_all(out);
    for (const char* group : {"neonate", "adult"}) {
      const auto cohort = load_cohort(dir_ / "ingest" / group);
      TractMeasureTable table;
      for (const auto& t : cohort) {
        const Parcellation p =
            parcellation_from_json(read_json(dir_ / "parcellation" / "joint" / group / (t.subject_id + ".json")));
        try {
          const auto rows = extract_measures(p, t);
          table.insert(table.end(), rows.begin(), rows.end());
        } catch (const std::exception& e) {
          throw StageError("measure", "subject " + t.subject_id + ": " + e.what(), std::current_exception());
        }
      }
      write_measures_csv(out / (std::string(group) + ".csv"), table);
    }
  }

  std::vector<IdentificationResult> identifications(const std::string& atlas, const std::string& group,
                                                    const std::vector<Tractogram>& cohort, std::size_t threshold) {
    std::vector<IdentificationResult> out;
    for (const auto& t : cohort)
      out.push_back(identify(
          parcellation_from_json(read_json(dir_ / "parcellation" / atlas / group / (t.subject_id + ".json"))),
          threshold));
    return out;
  }

  void stats() {
    const fs::path out = dir_ / "stats";
    fs::remove_all(out);
    fs::remove_all(dir_ / "plot_data");
    const auto neo_cohort = load_cohort(dir_ / "ingest" / "neonate");
    const auto adult_cohort = load_cohort(dir_ / "ingest" / "adult");
    const TractMeasureTable neo = read_measures_csv(dir_ / "measures" / "neonate.csv");
    const TractMeasureTable adult = read_measures_csv(dir_ / "measures" / "adult.csv");
    json summary = json::object();

    // Identification rates for both atlases at every threshold.
    std::string ir_csv = "atlas,cohort,threshold,tract,category,ir\n";
    std::map<std::string, std::map<std::string, std::map<std::string, double>>> ir_main;  // atlas, cohort, tract
    std::vector<std::size_t> thresholds = cfg_.ir_thresholds;
    if (std::find(thresholds.begin(), thresholds.end(), cfg_.ir_threshold) == thresholds.end())
      thresholds.push_back(cfg_.ir_threshold);
    std::sort(thresholds.begin(), thresholds.end());
    for (const char* atlas : {"joint", "reference"})
      for (const auto& [group, cohort] : {std::pair{"neonate", &neo_cohort}, std::pair{"adult", &adult_cohort}})
        for (std::size_t th : thresholds) {
          const auto ids = identifications(atlas, group, *cohort, th);
          const auto rates = identification_rates(ids);
          for (const auto& [tract, ir] : rates)
            ir_csv += std::string(atlas) + "," + group + "," + std::to_string(th) + "," + tract + "," +
                      category_name(tract) + "," + num(ir) + "\n";
          if (th == cfg_.ir_threshold) ir_main[atlas][group] = rates;
        }
    write_text(out / "ir.csv", ir_csv);

    json ir_tests = json::object();
    json ir_means = json::object();
    for (const char* group : {"neonate", "adult"}) {
      const auto& a = ir_main["joint"][group];
      const auto& b = ir_main["reference"][group];
      std::vector<double> x, y;
      for (const auto& t : tract_taxonomy())
        if (a.count(t.name) && b.count(t.name)) {
          x.push_back(a.at(t.name));
          y.push_back(b.at(t.name));
        }
      auto mean = [](const std::map<std::string, double>& m) {
        double s = 0.0;
        for (const auto& [_, v] : m) s += v;
        return m.empty() ? 0.0 : s / static_cast<double>(m.size());
      };
      ir_means[group] = {{"joint", mean(a)}, {"reference", mean(b)}};
      json r = {{"tracts", x.size()}};
      try {
        const PairedTTest t = paired_ttest(x, y);
        r["t"] = t.t;
        r["df"] = t.df;
        r["p"] = t.p;
        r["mean_difference"] = t.mean_difference;
      } catch (const std::exception& e) {
        r["error"] = e.what();
      }
      ir_tests[group] = r;
    }
    write_json(out / "ir_test.json", {{"threshold", cfg_.ir_threshold}, {"paired_t", ir_tests}, {"mean_ir", ir_means}});
    summary["identification"] = {{"threshold", cfg_.ir_threshold}, {"mean_ir", ir_means}, {"paired_t", ir_tests}};

    // Developmental slopes: full-term neonates and all adults, age only.
    std::set<std::string> term_ids, preterm_ids;
    for (const auto& t : neo_cohort) (full_term(t.meta) ? term_ids : preterm_ids).insert(t.subject_id);
    const auto neo_term = rows_for(neo, term_ids);
    const TractFits neo_fits = glm_all_tracts(neo_term, cfg_.response);
    const TractFits adult_fits = glm_all_tracts(adult, cfg_.response);
    write_glm_csv(out / "glm_neonate.csv", neo_fits.fits);
    write_glm_csv(out / "glm_adult.csv", adult_fits.fits);
    auto significant = [](const TractFits& f) {
      std::size_t n = 0;
      for (const auto& g : f.fits) n += g.p_bonferroni < 0.05;
      return n;
    };
    summary["glm"] = {{"response", to_string(cfg_.response)},
                      {"neonate", {{"subjects", term_ids.size()}, {"tracts", neo_fits.fits.size()},
                                   {"significant_bonferroni", significant(neo_fits)}, {"skipped", neo_fits.skipped}}},
                      {"adult", {{"subjects", adult_cohort.size()}, {"tracts", adult_fits.fits.size()},
                                 {"significant_bonferroni", significant(adult_fits)}, {"skipped", adult_fits.skipped}}}};
    const GroupComparison dev = compare_groups(neo_term, adult, cfg_.response);

    // Sex: age-matched full-term pairs.
    std::vector<std::pair<double, std::string>> females, males;
    for (const auto& t : neo_cohort) {
      if (!term_ids.count(t.subject_id)) continue;
      if (t.meta.sex == Sex::female) females.push_back({t.meta.age_at_scan, t.subject_id});
      if (t.meta.sex == Sex::male) males.push_back({t.meta.age_at_scan, t.subject_id});
    }
    const auto [f_ids, m_ids] = age_matched(females, males, 1.0);
    json sex = {{"pairs", f_ids.size()}};
    std::optional<GroupComparison> sex_cmp;
    try {
      sex_cmp = compare_groups(rows_for(neo, f_ids), rows_for(neo, m_ids), cfg_.response, cfg_.covariates);
      write_comparison_csv(out / "compare_sex.csv", out / "compare_sex_categories.csv", *sex_cmp, "female", "male");
      sex.update(comparison_summary(*sex_cmp, "female", "male"));
    } catch (const std::exception& e) {
      sex["error"] = e.what();
    }
    summary["sex"] = sex;

    // Birth status: sex-balanced full-term and preterm groups.
    const auto term_bal = sex_balanced(neo_cohort, term_ids);
    const auto pre_bal = sex_balanced(neo_cohort, preterm_ids);
    json birth = {{"term", term_bal.size()}, {"preterm", pre_bal.size()}};
    std::optional<GroupComparison> birth_cmp;
    try {
      birth_cmp = compare_groups(rows_for(neo, term_bal), rows_for(neo, pre_bal), cfg_.response, cfg_.covariates);
      write_comparison_csv(out / "compare_birth.csv", out / "compare_birth_categories.csv", *birth_cmp, "term",
                           "preterm");
      birth.update(comparison_summary(*birth_cmp, "term", "preterm"));
    } catch (const std::exception& e) {
      birth["error"] = e.what();
    }
    summary["birth"] = birth;
    write_json(out / "summary.json", summary);

    if (!cfg_.plot_data) return;
    const fs::path pd = dir_ / "plot_data";
    std::string f2 = "cohort,tract,category,ir_reference,ir_joint\n";
    for (const char* group : {"neonate", "adult"})
      for (const auto& t : tract_taxonomy()) {
        const auto& a = ir_main["joint"][group];
        const auto& b = ir_main["reference"][group];
        if (!a.count(t.name) || !b.count(t.name)) continue;
        f2 += std::string(group) + "," + t.name + "," + to_string(t.category) + "," + num(b.at(t.name)) + "," +
              num(a.at(t.name)) + "\n";
      }
    write_text(pd / "fig2_identification_rate.csv", f2);
    write_comparison_csv(pd / "fig4_beta_neonate_adult.csv", pd / "fig4_categories.csv", dev, "neonate", "adult");

    // Fastest and slowest developing tracts, FA against age.
    std::vector<GLMResult> order = neo_fits.fits;
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      return a.beta != b.beta ? a.beta > b.beta : a.tract < b.tract;
    });
    std::set<std::string> shown;
    for (std::size_t i = 0; i < std::min<std::size_t>(2, order.size()); ++i) {
      shown.insert(order[i].tract);
      shown.insert(order[order.size() - 1 - i].tract);
    }
    std::string f5 = "tract,subject_id,group,age,mean_fa\n";
    for (const auto* table : {&neo_term, &adult})
      for (const auto& r : *table)
        if (shown.count(r.tract) && r.mean_fa)
          f5 += r.tract + "," + r.subject_id + "," + to_string(r.meta.group) + "," + num(r.meta.age_at_scan) + "," +
                num(*r.mean_fa) + "\n";
    write_text(pd / "fig5_fa_vs_age.csv", f5);
    if (sex_cmp) write_comparison_csv(pd / "fig6_beta_sex.csv", pd / "fig6_categories.csv", *sex_cmp, "female", "male");
    if (birth_cmp)
      write_comparison_csv(pd / "fig7_beta_birth.csv", pd / "fig7_categories.csv", *birth_cmp, "term", "preterm");
  }

  const PipelineConfig& cfg_;
  RunOptions opts_;
  fs::path dir_;
  Logger log_;
  std::string hash_;
};

}  // namespace

RunSummary run_pipeline(const PipelineConfig& cfg, const RunOptions& opts) {
  const auto errors = validate_config(cfg);
  if (!errors.empty()) {
    std::string msg = "invalid pipeline config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ValidationError(msg);
  }
  Runner r(cfg, opts);
  return r.run();
}

}  // namespace fibermap

#include "fibermap/atlas.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "fibermap/kernels.hpp"
#include "fibermap/rng.hpp"
#include "fibermap/tractogram_io.hpp"

namespace fibermap {

using nlohmann::json;

void AtlasBuildConfig::validate() const {
  if (downsample_per_subject < 1) throw ValidationError("downsample_per_subject must be >= 1");
  if (points < 2) throw ValidationError("points must be >= 2");
  if (register_subjects) registration.validate();
  if (registration.points != points) throw ValidationError("registration.points must equal points");
  if (nystrom.sample_size < 1) throw ValidationError("nystrom.sample_size must be >= 1");
  if (nystrom.dims < 1) throw ValidationError("nystrom.dims must be >= 1");
  if (nystrom.dims + (nystrom.drop_trivial ? 1 : 0) > nystrom.sample_size)
    throw ValidationError("nystrom.dims too large for nystrom.sample_size");
  if (!(nystrom.sigma > 0.0)) throw ValidationError("nystrom.sigma must be > 0");
  if (clusters < 1) throw ValidationError("clusters must be >= 1");
  if (representatives < 1) throw ValidationError("representatives must be >= 1");
}

bool Atlas::any_labeled() const {
  return std::any_of(labels.begin(), labels.end(), [](const auto& l) { return l.labeled(); });
}

std::vector<std::string> Atlas::tract_names() const {
  std::vector<std::string> out;
  for (const auto& t : tract_taxonomy())
    if (std::any_of(labels.begin(), labels.end(), [&](const auto& l) { return l.tract_name == t.name; }))
      out.push_back(t.name);
  return out;
}

void Atlas::validate() const {
  if (labels.size() != k()) throw ValidationError("atlas needs one label per cluster");
  if (representative_fibers.size() != k())
    throw ValidationError("atlas needs one representative set per cluster");
  for (const auto& l : labels) validate_label(l);
}

namespace {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what(), std::current_exception());
  }
}

}  // namespace

AtlasBuildResult build_atlas(std::span<const Tractogram> tractograms, const AtlasBuildConfig& cfg) {
  stage("validate", [&] {
    cfg.validate();
    if (tractograms.size() < 2) throw ValidationError("atlas construction needs at least 2 subjects");
    for (const auto& t : tractograms) t.validate();
    return 0;
  });
  AtlasBuildResult out;
  std::vector<Tractogram> down;
  std::vector<std::vector<std::size_t>> kept;
  stage("subsample", [&] {
    for (std::size_t s = 0; s < tractograms.size(); ++s) {
      const auto idx = subsample_indices(tractograms[s].size(), cfg.downsample_per_subject,
                                         Rng::split(cfg.seed, s).next());
      Tractogram t{tractograms[s].subject_id, {}, tractograms[s].meta};
      for (std::size_t i : idx) t.streamlines.push_back(tractograms[s].streamlines[i]);
      down.push_back(std::move(t));
      kept.push_back(idx);
    }
    return 0;
  });
  stage("register", [&] {
    if (cfg.register_subjects) {
      out.registration = register_group(down, cfg.registration);
      out.transforms = out.registration.transforms;
    } else {
      out.transforms.assign(down.size(), AffineTransform::identity());
      out.registration.transforms = out.transforms;
      out.registration.converged = true;
    }
    return 0;
  });
  stage("pool", [&] {
    for (std::size_t s = 0; s < down.size(); ++s)
      for (std::size_t i = 0; i < down[s].size(); ++i) {
        out.pooled.push_back(resample(apply_transform(down[s].streamlines[i], out.transforms[s]), cfg.points));
        out.pooled_subject.push_back(s);
        out.pooled_source.push_back(kept[s][i]);
      }
    if (cfg.clusters > out.pooled.size())
      throw ValidationError("cluster count " + std::to_string(cfg.clusters) +
                            " exceeds pooled fiber count " + std::to_string(out.pooled.size()));
    return 0;
  });
  Eigen::MatrixXd emb;
  stage("embed", [&] {
    NystromConfig nc = cfg.nystrom;
    nc.sample_size = std::min(nc.sample_size, out.pooled.size());
    out.atlas.nystrom = fit_nystrom(out.pooled, nc);
    emb = embed_all(out.pooled, out.atlas.nystrom);
    return 0;
  });
  stage("cluster", [&] {
    auto res = cluster(emb, cfg.clusters, cfg.seed, cfg.kmeans);
    out.atlas.clusters = std::move(res.model);
    out.assignments = std::move(res.assignments);
    return 0;
  });
  stage("representatives", [&] {
    const std::size_t k = out.atlas.k();
    std::vector<std::vector<std::pair<double, std::size_t>>> members(k);
    for (std::size_t i = 0; i < out.pooled.size(); ++i) {
      const std::size_t c = out.assignments[i];
      const double d = (emb.row(static_cast<Eigen::Index>(i)) -
                        out.atlas.clusters.centroids.row(static_cast<Eigen::Index>(c))).squaredNorm();
      members[c].push_back({d, i});
    }
    out.atlas.representative_fibers.resize(k);
    out.atlas.member_distance_mean.assign(k, 0.0);
    out.atlas.member_distance_sd.assign(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      auto& m = members[c];
      std::sort(m.begin(), m.end());
      if (!m.empty()) {
        double s = 0.0, ss = 0.0;
        for (const auto& [d2, _] : m) {
          s += std::sqrt(d2);
          ss += d2;
        }
        const double nn = static_cast<double>(m.size());
        const double mean = s / nn;
        out.atlas.member_distance_mean[c] = mean;
        out.atlas.member_distance_sd[c] = std::sqrt(std::max(0.0, ss / nn - mean * mean));
      }
      for (std::size_t r = 0; r < std::min(cfg.representatives, m.size()); ++r)
        out.atlas.representative_fibers[c].push_back(out.pooled[m[r].second]);
    }
    out.atlas.labels.assign(k, AnatomicalLabel{});
    return 0;
  });

  json subjects = json::array();
  for (const auto& t : tractograms) subjects.push_back({{"subject_id", t.subject_id}, {"streamlines", t.size()}});
  out.atlas.provenance = {{"config", to_json(cfg)},
                          {"subjects", subjects},
                          {"pooled_fibers", out.pooled.size()},
                          {"registration_converged", out.registration.converged}};
  return out;
}

Eigen::MatrixXd cluster_correspondence(const Atlas& new_atlas, const Atlas& reference,
                                       const FiberDistanceParams& params) {
  std::vector<ResampledFiber> a, b;
  std::vector<std::size_t> a_off{0}, b_off{0};
  for (const auto& reps : new_atlas.representative_fibers) {
    if (reps.empty()) throw ValidationError("new atlas has a cluster without representative fibers");
    a.insert(a.end(), reps.begin(), reps.end());
    a_off.push_back(a.size());
  }
  for (const auto& reps : reference.representative_fibers) {
    if (reps.empty()) throw ValidationError("reference atlas has a cluster without representative fibers");
    b.insert(b.end(), reps.begin(), reps.end());
    b_off.push_back(b.size());
  }
  const Eigen::MatrixXd d = kernels::omp::distance_matrix(a, b, params);
  const Eigen::Index kn = static_cast<Eigen::Index>(new_atlas.representative_fibers.size());
  const Eigen::Index kr = static_cast<Eigen::Index>(reference.representative_fibers.size());
  Eigen::MatrixXd out(kn, kr);
  for (Eigen::Index i = 0; i < kn; ++i)
    for (Eigen::Index j = 0; j < kr; ++j) {
      const auto r0 = static_cast<Eigen::Index>(a_off[i]), r1 = static_cast<Eigen::Index>(a_off[i + 1]);
      const auto c0 = static_cast<Eigen::Index>(b_off[j]), c1 = static_cast<Eigen::Index>(b_off[j + 1]);
      out(i, j) = d.block(r0, c0, r1 - r0, c1 - c0).mean();
    }
  return out;
}

Atlas transfer_labels(const Atlas& new_atlas, const Atlas& reference, const FiberDistanceParams& params) {
  for (std::size_t j = 0; j < reference.labels.size(); ++j)
    if (!reference.labels[j].labeled())
      throw ValidationError("reference atlas cluster " + std::to_string(j) + " is unlabeled");
  if (reference.labels.size() != reference.k()) throw ValidationError("reference atlas label count mismatch");
  const Eigen::MatrixXd d = cluster_correspondence(new_atlas, reference, params);
  Atlas out = new_atlas;
  out.labels.resize(new_atlas.k());
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < d.cols(); ++j)
      if (d(i, j) < d(i, arg)) arg = j;
    out.labels[static_cast<std::size_t>(i)] = reference.labels[static_cast<std::size_t>(arg)];
  }
  return out;
}

std::vector<AnatomicalLabel> majority_labels(std::size_t k, std::span<const std::size_t> assignments,
                                             std::span<const std::string> fiber_tracts) {
  if (assignments.size() != fiber_tracts.size()) throw ValidationError("one tract name per fiber is required");
  std::vector<std::map<std::string, std::size_t>> votes(k);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= k) throw ValidationError("assignment out of range");
    ++votes[assignments[i]][fiber_tracts[i]];
  }
  std::vector<AnatomicalLabel> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t best = 0;
    for (const auto& t : tract_taxonomy()) {
      auto it = votes[c].find(t.name);
      if (it != votes[c].end() && it->second > best) {
        best = it->second;
        out[c] = make_label(t.name);
      }
    }
  }
  return out;
}

// --- serialization ----------------------------------------------------------

namespace {

std::uint32_t crc_of(const std::vector<double>& v) {
  // CRC over the little-endian on-disk bytes.
  std::vector<unsigned char> bytes(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t u;
    std::memcpy(&u, &v[i], 8);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::vector<double> flatten(const std::vector<ResampledFiber>& fibers) {
  std::vector<double> out;
  for (const auto& f : fibers)
    for (const auto& p : f.points) out.insert(out.end(), {p.x(), p.y(), p.z()});
  return out;
}

std::vector<ResampledFiber> unflatten(const std::vector<double>& v, std::size_t count, std::size_t points) {
  std::vector<ResampledFiber> out(count);
  std::size_t c = 0;
  for (auto& f : out) {
    f.points.resize(points);
    for (auto& p : f.points) {
      p = Vec3(v[c], v[c + 1], v[c + 2]);
      c += 3;
    }
  }
  return out;
}

std::vector<double> row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

Eigen::MatrixXd from_row_major(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r * cols + c];
  return m;
}

}  // namespace

void save_atlas(const Atlas& atlas, const std::filesystem::path& dir) {
  atlas.validate();
  std::filesystem::create_directories(dir);
  const std::size_t p = atlas.points();
  const std::size_t m = atlas.nystrom.sample_fibers.size();
  const std::size_t e = atlas.nystrom.dims();
  const std::size_t k = atlas.k();
  std::vector<std::size_t> rep_counts;
  std::vector<ResampledFiber> reps;
  for (const auto& r : atlas.representative_fibers) {
    rep_counts.push_back(r.size());
    reps.insert(reps.end(), r.begin(), r.end());
  }

  json arrays = json::object();
  auto put = [&](const std::string& name, const std::vector<double>& v, std::vector<std::size_t> shape) {
    const std::string file = name + ".f64";
    write_f64(dir / file, v);
    arrays[name] = {{"file", file}, {"dtype", "float64le"}, {"shape", shape}, {"crc32", crc_of(v)}};
  };
  put("sample_fibers", flatten(atlas.nystrom.sample_fibers), {m, p, 3});
  put("eigenvalues", std::vector<double>(atlas.nystrom.eigenvalues.data(), atlas.nystrom.eigenvalues.data() + e), {e});
  put("eigenvectors", row_major(atlas.nystrom.sample_eigenvectors), {m, e});
  put("degrees", std::vector<double>(atlas.nystrom.degrees.data(), atlas.nystrom.degrees.data() + m), {m});
  put("centroids", row_major(atlas.clusters.centroids), {k, e});
  put("representatives", flatten(reps), {reps.size(), p, 3});
  if (atlas.member_distance_mean.size() == k) {
    put("member_distance_mean", atlas.member_distance_mean, {k});
    put("member_distance_sd", atlas.member_distance_sd, {k});
  }

  json labels = json::array();
  for (const auto& l : atlas.labels)
    labels.push_back({{"tract", l.tract_name}, {"category", l.category ? json(to_string(*l.category)) : json(nullptr)}});

  json manifest = {
      {"magic", kAtlasMagic},
      {"format_version", std::to_string(kAtlasVersionMajor) + "." + std::to_string(kAtlasVersionMinor)},
      {"points", p},
      {"kernel",
       {{"sigma", atlas.nystrom.kernel.sigma},
        {"variant", atlas.nystrom.kernel.variant == McpVariant::symmetric_mean ? "symmetric_mean" : "directed_mean"}}},
      {"sample_size", m},
      {"dims", e},
      {"clusters", k},
      {"dropped_trivial", atlas.nystrom.dropped_trivial},
      {"eigenvalue_weighted", atlas.nystrom.eigenvalue_weighted},
      {"sample_indices", atlas.nystrom.sample_indices},
      {"member_counts", atlas.clusters.member_counts},
      {"representative_counts", rep_counts},
      {"labels", labels},
      {"provenance", atlas.provenance},
      {"arrays", arrays},
  };
  write_json(dir / "manifest.json", manifest);
}

Atlas load_atlas(const std::filesystem::path& dir) {
  using Kind = AtlasBundleError::Kind;
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw AtlasBundleError(Kind::not_an_atlas, dir.string() + ": not an atlas bundle (no manifest.json)");
  json man;
  try {
    man = read_json(manifest_path);
  } catch (const IoError& e) {
    throw AtlasBundleError(Kind::not_an_atlas, dir.string() + ": not an atlas bundle (" + e.what() + ")");
  }
  if (!man.is_object() || man.value("magic", "") != kAtlasMagic)
    throw AtlasBundleError(Kind::not_an_atlas, dir.string() + ": not an atlas bundle (bad magic)");
  const std::string version = man.value("format_version", "");
  int major = -1, minor = 0;
  if (std::sscanf(version.c_str(), "%d.%d", &major, &minor) < 1)
    throw AtlasBundleError(Kind::version, dir.string() + ": unreadable atlas format version '" + version + "'");
  if (major != kAtlasVersionMajor)
    throw AtlasBundleError(Kind::version, dir.string() + ": atlas format version " + version +
                                              " is not supported by this reader (version " +
                                              std::to_string(kAtlasVersionMajor) + "." +
                                              std::to_string(kAtlasVersionMinor) + ")");

  try {
    const json& arrays = man.at("arrays");
    auto get = [&](const std::string& name) {
      const json& a = arrays.at(name);
      std::size_t expected = 1;
      for (auto s : a.at("shape")) expected *= s.get<std::size_t>();
      const auto path = dir / a.at("file").get<std::string>();
      if (!std::filesystem::exists(path))
        throw AtlasBundleError(Kind::truncated, path.string() + ": array file missing");
      const auto bytes = std::filesystem::file_size(path);
      if (bytes != expected * 8)
        throw AtlasBundleError(Kind::truncated, path.string() + ": expected " + std::to_string(expected * 8) +
                                                    " bytes, found " + std::to_string(bytes));
      auto v = read_f64(path);
      if (crc_of(v) != a.at("crc32").get<std::uint32_t>())
        throw AtlasBundleError(Kind::checksum, path.string() + ": checksum mismatch");
      return v;
    };
    const std::size_t p = man.at("points").get<std::size_t>();
    const std::size_t m = man.at("sample_size").get<std::size_t>();
    const std::size_t e = man.at("dims").get<std::size_t>();
    const std::size_t k = man.at("clusters").get<std::size_t>();

    Atlas atlas;
    auto& ny = atlas.nystrom;
    ny.sample_fibers = unflatten(get("sample_fibers"), m, p);
    ny.sample_indices = man.at("sample_indices").get<std::vector<std::size_t>>();
    ny.kernel.sigma = man.at("kernel").at("sigma").get<double>();
    ny.kernel.variant = man.at("kernel").at("variant").get<std::string>() == "directed_mean"
                            ? McpVariant::directed_mean
                            : McpVariant::symmetric_mean;
    const auto ev = get("eigenvalues");
    ny.eigenvalues = Eigen::Map<const Eigen::VectorXd>(ev.data(), static_cast<Eigen::Index>(e));
    ny.sample_eigenvectors = from_row_major(get("eigenvectors"), m, e);
    const auto dg = get("degrees");
    ny.degrees = Eigen::Map<const Eigen::VectorXd>(dg.data(), static_cast<Eigen::Index>(m));
    ny.dropped_trivial = man.at("dropped_trivial").get<bool>();
    ny.eigenvalue_weighted = man.value("eigenvalue_weighted", false);

    atlas.clusters.centroids = from_row_major(get("centroids"), k, e);
    atlas.clusters.member_counts = man.at("member_counts").get<std::vector<std::size_t>>();

    const auto rep_counts = man.at("representative_counts").get<std::vector<std::size_t>>();
    const std::size_t total_reps = std::accumulate(rep_counts.begin(), rep_counts.end(), std::size_t{0});
    const auto reps = unflatten(get("representatives"), total_reps, p);
    std::size_t c = 0;
    for (std::size_t n : rep_counts) {
      atlas.representative_fibers.emplace_back(reps.begin() + c, reps.begin() + c + n);
      c += n;
    }
    if (arrays.contains("member_distance_mean")) {
      atlas.member_distance_mean = get("member_distance_mean");
      atlas.member_distance_sd = get("member_distance_sd");
    }
    for (const auto& l : man.at("labels")) {
      AnatomicalLabel label;
      label.tract_name = l.at("tract").get<std::string>();
      if (!l.at("category").is_null()) label.category = parse_category(l.at("category").get<std::string>());
      atlas.labels.push_back(label);
    }
    atlas.provenance = man.value("provenance", json::object());
    atlas.validate();
    return atlas;
  } catch (const AtlasBundleError&) {
    throw;
  } catch (const json::exception& e) {
    throw AtlasBundleError(Kind::not_an_atlas, dir.string() + ": malformed atlas manifest (" + e.what() + ")");
  }
}

// --- config JSON ------------------------------------------------------------

json to_json(const RegistrationConfig& c) {
  return {{"family", to_string(c.family)},
          {"sigma_schedule", c.sigma_schedule},
          {"fibers_per_subject_sample", c.fibers_per_subject_sample},
          {"max_iters_per_scale", c.max_iters_per_scale},
          {"convergence_tol", c.convergence_tol},
          {"seed", c.seed},
          {"points", c.points},
          {"objective", to_string(c.objective)}};
}

RegistrationConfig registration_config_from_json(const json& j) {
  RegistrationConfig c;
  c.family = parse_transform_family(j.value("family", std::string(to_string(c.family))));
  c.sigma_schedule = j.value("sigma_schedule", c.sigma_schedule);
  c.fibers_per_subject_sample = j.value("fibers_per_subject_sample", c.fibers_per_subject_sample);
  c.max_iters_per_scale = j.value("max_iters_per_scale", c.max_iters_per_scale);
  c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
  c.seed = j.value("seed", c.seed);
  c.points = j.value("points", c.points);
  c.objective = parse_registration_objective(j.value("objective", std::string(to_string(c.objective))));
  return c;
}

json to_json(const AtlasBuildConfig& c) {
  return {{"downsample_per_subject", c.downsample_per_subject},
          {"points", c.points},
          {"register_subjects", c.register_subjects},
          {"registration", to_json(c.registration)},
          {"nystrom",
           {{"sample_size", c.nystrom.sample_size},
            {"dims", c.nystrom.dims},
            {"sigma", c.nystrom.sigma},
            {"seed", c.nystrom.seed},
            {"drop_trivial", c.nystrom.drop_trivial},
            {"weight_by_eigenvalue", c.nystrom.weight_by_eigenvalue}}},
          {"clusters", c.clusters},
          {"kmeans", {{"max_iters", c.kmeans.max_iters}, {"restarts", c.kmeans.restarts}}},
          {"representatives", c.representatives},
          {"seed", c.seed}};
}

AtlasBuildConfig atlas_config_from_json(const json& j) {
  AtlasBuildConfig c;
  c.downsample_per_subject = j.value("downsample_per_subject", c.downsample_per_subject);
  c.points = j.value("points", c.points);
  c.register_subjects = j.value("register_subjects", c.register_subjects);
  if (j.contains("registration")) c.registration = registration_config_from_json(j["registration"]);
  c.registration.points = c.points;
  if (j.contains("nystrom")) {
    const auto& n = j["nystrom"];
    c.nystrom.sample_size = n.value("sample_size", c.nystrom.sample_size);
    c.nystrom.dims = n.value("dims", c.nystrom.dims);
    c.nystrom.sigma = n.value("sigma", c.nystrom.sigma);
    c.nystrom.seed = n.value("seed", c.nystrom.seed);
    c.nystrom.drop_trivial = n.value("drop_trivial", c.nystrom.drop_trivial);
    c.nystrom.weight_by_eigenvalue = n.value("weight_by_eigenvalue", c.nystrom.weight_by_eigenvalue);
  }
  c.clusters = j.value("clusters", c.clusters);
  if (j.contains("kmeans")) {
    c.kmeans.max_iters = j["kmeans"].value("max_iters", c.kmeans.max_iters);
    c.kmeans.restarts = j["kmeans"].value("restarts", c.kmeans.restarts);
  }
  c.representatives = j.value("representatives", c.representatives);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace fibermap

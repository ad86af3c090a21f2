#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fibermap/atlas.hpp"
#include "fibermap/error.hpp"
#include "fibermap/parcellation.hpp"
#include "fibermap/tractogram_io.hpp"
#include "support.hpp"

using namespace fibermap;
using namespace fibermap::test;
namespace fs = std::filesystem;

namespace {

const LabeledAtlas& shared_atlas() {
  static const LabeledAtlas a = labeled_atlas(3, 30, 16, 77);
  return a;
}

Atlas hand_atlas(std::vector<std::vector<ResampledFiber>> reps, std::vector<AnatomicalLabel> labels) {
  Atlas a;
  a.clusters.centroids = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(reps.size()), 1);
  a.clusters.member_counts.assign(reps.size(), 1);
  a.representative_fibers = std::move(reps);
  a.labels = std::move(labels);
  return a;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fibermap-atlas-" + name);
  fs::remove_all(p);
  return p;
}

Tractogram only_bundle(const SyntheticSubject& s, const std::string& tract) {
  Tractogram t = s.tractogram;
  t.streamlines.clear();
  for (std::size_t i = 0; i < s.tractogram.size(); ++i)
    if (s.truth.fiber_tracts[i] == tract) t.streamlines.push_back(s.tractogram.streamlines[i]);
  return t;
}

}  // namespace

TEST_CASE("build_atlas: rigidly perturbed cohort recovers bundles") {
  CohortSpec spec = small_cohort(4, 25, 19);
  spec.bundles.resize(3);
  spec.max_translation = 10.0;
  spec.max_rotation_deg = 10.0;
  const auto c = generate_cohort(spec);
  AtlasBuildConfig cfg;
  cfg.downsample_per_subject = 75;
  cfg.registration.fibers_per_subject_sample = 30;
  cfg.registration.sigma_schedule = {20.0, 10.0, 5.0};
  cfg.registration.max_iters_per_scale = 6;
  cfg.registration.family = TransformFamily::rigid;
  cfg.nystrom = {150, 6, 30.0, 1, true};
  cfg.clusters = 3;
  cfg.seed = 3;
  const auto r = build_atlas(tractograms(c), cfg);
  REQUIRE(r.assignments.size() == r.pooled.size());
  std::vector<std::size_t> truth;
  std::map<std::string, std::size_t> ids;
  for (std::size_t i = 0; i < r.pooled.size(); ++i) {
    const auto& name = c[r.pooled_subject[i]].truth.fiber_tracts[r.pooled_source[i]];
    truth.push_back(ids.emplace(name, ids.size()).first->second);
  }
  CHECK(adjusted_rand_index(r.assignments, truth) >= 0.95);
  CHECK(r.transforms.size() == 4);
  CHECK(r.atlas.provenance.contains("config"));
  std::size_t members = 0;
  for (auto n : r.atlas.clusters.member_counts) members += n;
  CHECK(members == r.pooled.size());
  for (const auto& l : r.atlas.labels) CHECK_FALSE(l.labeled());

  const auto again = build_atlas(tractograms(c), cfg);
  CHECK(again.assignments == r.assignments);
  CHECK((again.atlas.clusters.centroids.array() == r.atlas.clusters.centroids.array()).all());
}

TEST_CASE("build_atlas: identical subjects share clusters evenly; one subject is rejected") {
  const auto c = generate_cohort(small_cohort(2, 20, 5));
  std::vector<Tractogram> tr{c[0].tractogram, c[0].tractogram};
  tr[1].subject_id = "twin";
  AtlasBuildConfig cfg;
  cfg.downsample_per_subject = 160;
  cfg.register_subjects = false;
  cfg.nystrom = {120, 8, 30.0, 2, true};
  cfg.clusters = 8;
  const auto r = build_atlas(tr, cfg);
  std::vector<std::array<double, 2>> counts(8, {0.0, 0.0});
  for (std::size_t i = 0; i < r.pooled.size(); ++i) counts[r.assignments[i]][r.pooled_subject[i]] += 1.0;
  for (const auto& k : counts)
    if (k[0] + k[1] > 0) CHECK(std::abs(k[0] - k[1]) / (k[0] + k[1]) <= 0.05);
  CHECK_THROWS(build_atlas(std::span(tr).first(1), cfg));
  cfg.clusters = 1000;
  CHECK_THROWS(build_atlas(tr, cfg));
}

TEST_CASE("transfer_labels: self, forced argmin, idempotence and errors") {
  const auto& la = shared_atlas();
  const FiberDistanceParams p;
  const Atlas self = transfer_labels(la.atlas, la.atlas, p);
  for (std::size_t k = 0; k < la.atlas.k(); ++k) CHECK(self.labels[k] == la.atlas.labels[k]);
  CHECK(transfer_labels(self, la.atlas, p).labels == self.labels);

  const auto near0 = straight(Vec3(0, 1, 0), Vec3(30, 1, 0));
  const Atlas ref = hand_atlas({{straight(Vec3(0, 0, 0), Vec3(30, 0, 0))}, {straight(Vec3(0, 50, 0), Vec3(30, 50, 0))}},
                               {make_label("AF_left"), make_label("CC3")});
  const Atlas fresh = hand_atlas({{near0}, {straight(Vec3(0, 49, 0), Vec3(30, 49, 0))}}, {AnatomicalLabel{}, AnatomicalLabel{}});
  const Atlas out = transfer_labels(fresh, ref, p);
  CHECK(out.labels[0].tract_name == "AF_left");
  CHECK(out.labels[1].tract_name == "CC3");

  Atlas unlabeled_ref = ref;
  unlabeled_ref.labels[1] = AnatomicalLabel{};
  CHECK_THROWS_AS(transfer_labels(fresh, unlabeled_ref, p), ValidationError);
}

TEST_CASE("transfer_labels matches an exhaustive correspondence oracle") {
  Rng rng(404);
  const auto& tx = tract_taxonomy();
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::vector<ResampledFiber>> rn(10), rr(10);
    std::vector<AnatomicalLabel> lr;
    for (auto& s : rn)
      for (int i = 0; i < 3; ++i) s.push_back(random_fiber(rng, 15, 50.0));
    for (auto& s : rr)
      for (int i = 0; i < 4; ++i) s.push_back(random_fiber(rng, 15, 50.0));
    for (int k = 0; k < 10; ++k) lr.push_back(make_label(tx[rng.index(tx.size())].name));
    const Atlas ref = hand_atlas(rr, lr);
    const Atlas fresh = hand_atlas(rn, std::vector<AnatomicalLabel>(10));
    const auto out = transfer_labels(fresh, ref, {});
    const auto corr = cluster_correspondence(fresh, ref, {});
    for (std::size_t i = 0; i < 10; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < 10; ++j) {
        double s = 0.0;
        for (const auto& a : rn[i])
          for (const auto& b : rr[j]) s += oracle_symmetric(a, b);
        s /= static_cast<double>(rn[i].size() * rr[j].size());
        CHECK(corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) == doctest::Approx(s).epsilon(1e-12));
        if (s < best) {
          best = s;
          arg = j;
        }
      }
      CHECK(out.labels[i] == lr[arg]);
    }
  }
}

TEST_CASE("majority labels") {
  const std::vector<std::size_t> asg{0, 0, 0, 1, 1, 2};
  const std::vector<std::string> names{"AF_left", "AF_left", "CC3", "CC3", "UF_left", "MCP"};
  const auto l = majority_labels(4, asg, names);
  CHECK(l[0].tract_name == "AF_left");
  CHECK(l[1].tract_name == "UF_left");  // tie: taxonomy order, association before commissural
  CHECK(l[2].tract_name == "MCP");
  CHECK_FALSE(l[3].labeled());
}

TEST_CASE("atlas bundle round trip and distinct errors") {
  const auto& la = shared_atlas();
  const fs::path dir = scratch("roundtrip");
  save_atlas(la.atlas, dir);
  const Atlas back = load_atlas(dir);
  CHECK(back.labels == la.atlas.labels);
  CHECK((back.clusters.centroids - la.atlas.clusters.centroids).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((back.nystrom.sample_eigenvectors - la.atlas.nystrom.sample_eigenvectors).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(back.nystrom.sample_indices == la.atlas.nystrom.sample_indices);
  CHECK(back.provenance == la.atlas.provenance);

  Rng rng(1);
  std::vector<ResampledFiber> probes;
  for (int i = 0; i < 200; ++i) probes.push_back(la.build.pooled[rng.index(la.build.pooled.size())]);
  CHECK(assign_all(embed_all(probes, back.nystrom), back.clusters) ==
        assign_all(embed_all(probes, la.atlas.nystrom), la.atlas.clusters));

  auto kind_of = [](const fs::path& d) {
    try {
      load_atlas(d);
    } catch (const AtlasBundleError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  using K = AtlasBundleError::Kind;

  const fs::path magic = scratch("magic");
  fs::copy(dir, magic);
  json m = read_json(magic / "manifest.json");
  m["magic"] = "NOT-AN-ATLAS";
  write_json(magic / "manifest.json", m);
  CHECK(kind_of(magic) == static_cast<int>(K::not_an_atlas));
  CHECK(kind_of(scratch("empty")) == static_cast<int>(K::not_an_atlas));

  const fs::path ver = scratch("version");
  fs::copy(dir, ver);
  m = read_json(ver / "manifest.json");
  m["format_version"] = "2.0";
  write_json(ver / "manifest.json", m);
  CHECK(kind_of(ver) == static_cast<int>(K::version));
  try {
    load_atlas(ver);
  } catch (const AtlasBundleError& e) {
    const std::string w = e.what();
    CHECK(w.find("2.0") != std::string::npos);
    CHECK(w.find("1.0") != std::string::npos);
  }

  const fs::path crc = scratch("checksum");
  fs::copy(dir, crc);
  {
    std::fstream f(crc / "centroids.f64", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put('\x7f');
  }
  CHECK(kind_of(crc) == static_cast<int>(K::checksum));

  const fs::path cut = scratch("truncated");
  fs::copy(dir, cut);
  fs::resize_file(cut / "eigenvectors.f64", 16);
  CHECK(kind_of(cut) == static_cast<int>(K::truncated));
}

TEST_CASE("parcellation: self-consistency and partition invariants") {
  const auto& la = shared_atlas();
  std::size_t agree = 0, total = 0;
  std::size_t offset = 0;
  for (std::size_t s = 0; s < la.cohort.size(); ++s) {
    const Tractogram& t = la.cohort[s].tractogram;
    const auto p = parcellate_with_transform(t, la.atlas, AffineTransform::identity());
    REQUIRE(p.fiber_count() == t.size());
    std::size_t covered = p.unlabeled.size() + p.rejected.size();
    std::set<std::size_t> seen(p.unlabeled.begin(), p.unlabeled.end());
    for (const auto& [tract, idx] : p.tracts) {
      covered += idx.size();
      for (auto i : idx) CHECK(seen.insert(i).second);
    }
    CHECK(covered == t.size());
    for (const auto& name : la.atlas.tract_names()) CHECK(p.tracts.count(name) == 1);
    for (std::size_t i = 0; i < la.build.pooled.size(); ++i)
      if (la.build.pooled_subject[i] == s) {
        agree += p.cluster_of_fiber[la.build.pooled_source[i]] == la.build.assignments[i];
        ++total;
      }
    offset += t.size();
  }
  CHECK(static_cast<double>(agree) >= 0.99 * static_cast<double>(total));
}

TEST_CASE("parcellation: single-bundle subject and empty tracts") {
  const auto& la = shared_atlas();
  const auto sub = only_bundle(la.cohort[0], "CST_left");
  const auto p = parcellate_with_transform(sub, la.atlas, AffineTransform::identity());
  CHECK(static_cast<double>(p.tract_count("CST_left")) >= 0.95 * static_cast<double>(sub.size()));
  for (const auto& [tract, idx] : p.tracts)
    if (tract != "CST_left") CHECK(idx.size() < kDefaultIdentificationThreshold);
  CHECK(p.tract_count("AF_right") == 0);
  CHECK(p.tracts.count("AF_right") == 1);

  const auto j = to_json(p);
  const auto back = parcellation_from_json(j);
  CHECK(back.cluster_of_fiber == p.cluster_of_fiber);
  CHECK(back.tracts == p.tracts);
  CHECK(back.transform_used.row_major() == p.transform_used.row_major());

  Atlas bare = la.atlas;
  for (auto& l : bare.labels) l = AnatomicalLabel{};
  CHECK_THROWS_AS(parcellate_with_transform(sub, bare, AffineTransform::identity()), ValidationError);
}

TEST_CASE("parcellation: rigidly moved copy keeps its tract counts") {
  const auto& la = shared_atlas();
  const Tractogram& t = la.cohort[1].tractogram;
  const auto g = AffineTransform::translation(Vec3(6, -9, 4))
                     .compose(AffineTransform::rotation(Vec3(0.05, -0.08, 0.1), t.centroid()));
  ParcellationConfig pc;
  pc.registration.family = TransformFamily::rigid;
  pc.registration.fibers_per_subject_sample = 60;
  pc.registration.sigma_schedule = {20.0, 10.0, 5.0};
  pc.registration.max_iters_per_scale = 6;
  pc.atlas_registration_fibers = 120;
  const auto base = parcellate_with_transform(t, la.atlas, AffineTransform::identity());
  const auto moved = parcellate(apply_transform(t, g), la.atlas, pc);
  for (const auto& [tract, idx] : base.tracts) {
    const double a = static_cast<double>(idx.size()), b = static_cast<double>(moved.tract_count(tract));
    CHECK(std::abs(a - b) <= std::max(1.0, 0.01 * a));
  }
}

TEST_CASE("identify and identification rates") {
  Parcellation p;
  p.subject_id = "s";
  p.tracts["AF_left"] = std::vector<std::size_t>(10);
  p.tracts["CC3"] = std::vector<std::size_t>(9);
  p.tracts["UF_left"] = std::vector<std::size_t>(15);
  p.tracts["MCP"] = {};
  const auto r10 = identify(p, 10);
  CHECK(r10.identified.at("AF_left"));
  CHECK_FALSE(r10.identified.at("CC3"));
  CHECK_FALSE(r10.identified.at("MCP"));
  const auto r5 = identify(p, 5), r15 = identify(p, 15);
  for (const auto& [tract, id] : r15.identified)
    if (id) CHECK(r5.identified.at(tract));
  CHECK(r15.identified.at("UF_left"));
  CHECK_FALSE(r15.identified.at("AF_left"));
  CHECK_THROWS_AS(identify(p, 0), ValidationError);

  std::vector<IdentificationResult> cohort;
  for (std::size_t n : {12, 3, 10, 11}) {
    Parcellation q;
    q.tracts["AF_left"] = std::vector<std::size_t>(n);
    q.tracts["CC3"] = std::vector<std::size_t>(20);
    cohort.push_back(identify(q));
  }
  CHECK(identification_rate(cohort, "AF_left") == 75.0);
  CHECK(identification_rate(cohort, "CC3") == 100.0);
  const auto all = identification_rates(cohort);
  CHECK((all.at("AF_left") + all.at("CC3")) / 2.0 == 87.5);
  CHECK_THROWS_AS(identification_rate(std::vector<IdentificationResult>{}, "CC3"), ValidationError);
}

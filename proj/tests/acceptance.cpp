// Acceptance run: one PASS/FAIL line per criterion. Arguments select a
// subset by number (e.g. `acceptance 1 4 9`); no arguments runs all ten.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "fibermap/atlas.hpp"
#include "fibermap/error.hpp"
#include "fibermap/measures.hpp"
#include "fibermap/parcellation.hpp"
#include "fibermap/pipeline.hpp"
#include "fibermap/registration.hpp"
#include "fibermap/stats.hpp"
#include "fibermap/tractogram_io.hpp"
#include "support.hpp"

using namespace fibermap;
using namespace fibermap::test;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fibermap-accept-" + name);
  fs::remove_all(p);
  return p;
}

// 1. Metric oracle equivalence and invariants.
void metric(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  std::size_t mismatches = 0;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_fiber(rng), b = random_fiber(rng);
    mismatches += mcp_directed(a, b) != oracle_directed(a, b);
    mismatches += mcp(a, b) != oracle_symmetric(a, b);
    const double d = mcp(a, b);
    const auto shift = AffineTransform::translation(Vec3(rng.normal(), rng.normal(), rng.normal()) * 30.0);
    const auto grow = AffineTransform::scaling(1.5, Vec3(rng.normal(), rng.normal(), rng.normal()) * 10.0);
    worst = std::max({worst, std::abs(mcp(b, a) - d), std::abs(mcp(a, b.reversed()) - d),
                      std::abs(mcp(a.reversed(), b) - d),
                      std::abs(mcp(apply_transform(a, shift), apply_transform(b, shift)) - d),
                      std::abs(mcp(apply_transform(a, grow), apply_transform(b, grow)) - 1.5 * d)});
  }
  const double secs = seconds_since(t0);
  o.detail << "1000 pairs, " << mismatches << " oracle mismatches, max invariant error " << worst << ", " << secs
           << " s";
  o.require(mismatches == 0, "bitwise oracle");
  o.require(worst <= 1e-9, "invariants within 1e-9");
  o.require(secs < 10.0, "runtime < 10 s");
}

struct Residual {
  double mm;
  double degrees;
  double scale;
};

// Disagreement of (ta∘ga) and (tb∘gb), measured at point c.
Residual residual(const AffineTransform& ta, const AffineTransform& ga, const AffineTransform& tb,
                  const AffineTransform& gb, const Vec3& c) {
  const auto d = ta.compose(ga).inverse().compose(tb.compose(gb));
  const double s = std::cbrt(d.linear().determinant());
  return {(d.apply(c) - c).norm(), deg(rotation_angle(d.linear() / s)), s};
}

// 2. Registration recovery.
void registration(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_mm = 0.0, worst_deg = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CohortSpec spec = small_cohort(4, 25, 100 + seed);
    spec.max_translation = 20.0;
    spec.max_rotation_deg = 15.0;
    const auto c = generate_cohort(spec);
    RegistrationConfig rc;
    rc.family = TransformFamily::rigid;
    rc.fibers_per_subject_sample = 50;
    rc.sigma_schedule = {20.0, 10.0, 5.0};
    rc.max_iters_per_scale = 8;
    rc.seed = seed;
    const auto r = register_group(tractograms(c), rc);
    // Template-space centroid of the unperturbed anatomy.
    const Vec3 centre = c[0].truth.true_transform.inverse().apply(c[0].tractogram.centroid());
    for (std::size_t s = 1; s < c.size(); ++s) {
      const auto e = residual(r.transforms[0], c[0].truth.true_transform, r.transforms[s], c[s].truth.true_transform,
                              centre);
      worst_mm = std::max(worst_mm, e.mm);
      worst_deg = std::max(worst_deg, e.degrees);
    }
  }

  const auto base = generate_cohort(small_cohort(2, 30, 4));
  const Tractogram& a = base[0].tractogram;
  const auto grow = centroid_scaling(a, 1.5);
  std::vector<Tractogram> pair{a, apply_transform(a, grow)};
  pair[1].subject_id = "enlarged";
  RegistrationConfig rc;
  rc.family = TransformFamily::similarity;
  rc.fibers_per_subject_sample = 50;
  rc.sigma_schedule = {20.0, 10.0, 5.0};
  rc.max_iters_per_scale = 8;
  rc.seed = 1;
  const auto r = register_group(pair, rc);
  const auto e = residual(r.transforms[0], AffineTransform::identity(), r.transforms[1], grow, a.centroid());
  const double scale_err = std::abs(e.scale - 1.0);
  const double secs = seconds_since(t0);
  o.detail << "5 seeds rigid: max " << worst_mm << " mm, " << worst_deg << " deg; 1.5x scale residual "
           << 100.0 * scale_err << "%, " << secs << " s";
  o.require(worst_mm <= 1.0, "translation within 1 mm");
  o.require(worst_deg <= 2.0, "rotation within 2 deg");
  o.require(scale_err <= 0.03, "scale within 3%");
  o.require(secs < 120.0, "runtime < 2 min");
}

std::vector<ResampledFiber> bundles(std::size_t count, std::size_t per, std::uint64_t seed,
                                    std::vector<std::size_t>* labels = nullptr) {
  Rng rng(seed);
  std::vector<ResampledFiber> out;
  for (std::size_t b = 0; b < count; ++b) {
    const Vec3 base(40.0 * static_cast<double>(b % 4), 40.0 * static_cast<double>(b / 4), 0.0);
    const Vec3 dir = b % 2 ? Vec3(0, 0, 40) : Vec3(40, 10, 0);
    const auto f = straight_bundle(rng, base, base + dir, per);
    out.insert(out.end(), f.begin(), f.end());
    if (labels) labels->insert(labels->end(), per, b);
  }
  return out;
}

// 3. Embedding fidelity.
void embedding(Outcome& o) {
  Rng rng(31);
  std::vector<ResampledFiber> f = bundles(6, 25, 3);
  for (int i = 0; i < 30; ++i) f.push_back(random_fiber(rng, kDefaultResamplePoints, 60.0));
  const std::size_t dims = 6;
  const auto model = fit_nystrom(f, {f.size(), dims, 30.0, 1, true});
  const Eigen::MatrixXd e = embed_all(f, model);
  const auto oracle = oracle_embedding(f, 30.0, dims);
  std::vector<double> dm, doo;
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = i + 1; j < f.size(); ++j) {
      dm.push_back((e.row(static_cast<Eigen::Index>(i)) - e.row(static_cast<Eigen::Index>(j))).norm());
      double s = 0.0;
      for (std::size_t k = 0; k < dims; ++k) s += std::pow(oracle[i][k] - oracle[j][k], 2);
      doo.push_back(std::sqrt(s));
    }
  const double r = pearson(dm, doo);

  const auto sub = fit_nystrom(f, {80, dims, 30.0, 5, true});
  double worst = 0.0;
  for (std::size_t s = 0; s < sub.sample_fibers.size(); ++s) {
    const Eigen::RowVectorXd expect =
        sub.sample_eigenvectors.row(static_cast<Eigen::Index>(s)).cwiseProduct(sub.eigenvalues.transpose());
    worst = std::max(worst, (embed(sub.sample_fibers[s], sub).transpose() - expect).norm());
  }
  o.detail << "n = m = " << f.size() << ", Pearson r = " << r << "; in-sample reproduction error " << worst;
  o.require(f.size() <= 200, "n <= 200");
  o.require(r >= 0.999, "r >= 0.999");
  o.require(worst <= 1e-6, "in-sample within 1e-6");
}

// 4. Clustering ground truth.
void clustering(Outcome& o) {
  std::vector<std::size_t> lab;
  const auto f = bundles(8, 30, 12, &lab);
  const auto model = fit_nystrom(f, {120, 10, 30.0, 1, true});
  const auto e = embed_all(f, model);
  double lowest = 1.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    lowest = std::min(lowest, adjusted_rand_index(cluster(e, 8, seed).assignments, lab));

  Rng rng(2);
  auto two = straight_bundle(rng, Vec3(0, 0, 0), Vec3(40, 0, 0), 50);
  const auto other = straight_bundle(rng, Vec3(0, 50, 0), Vec3(40, 50, 0), 50);
  two.insert(two.end(), other.begin(), other.end());
  std::vector<std::size_t> lab2(50, 0);
  lab2.insert(lab2.end(), 50, 1);
  const auto m2 = fit_nystrom(two, {60, 4, 30.0, 1, true});
  const double ari2 = adjusted_rand_index(cluster(embed_all(two, m2), 2, 7).assignments, lab2);
  o.detail << "K=8 min ARI over 5 seeds " << lowest << "; K=2 ARI " << ari2;
  o.require(lowest >= 0.95, "K=8 ARI >= 0.95");
  o.require(ari2 == 1.0, "K=2 ARI = 1");
}

const LabeledAtlas& shared_atlas() {
  static const LabeledAtlas a = labeled_atlas(3, 30, 16, 77);
  return a;
}

// 5. Parcellation self-consistency.
void self_consistency(Outcome& o) {
  const auto& la = shared_atlas();
  std::size_t agree = 0, total = 0;
  for (std::size_t s = 0; s < la.cohort.size(); ++s) {
    const auto p = parcellate_with_transform(la.cohort[s].tractogram, la.atlas, AffineTransform::identity());
    for (std::size_t i = 0; i < la.build.pooled.size(); ++i)
      if (la.build.pooled_subject[i] == s) {
        agree += p.cluster_of_fiber[la.build.pooled_source[i]] == la.build.assignments[i];
        ++total;
      }
  }
  const double rate = static_cast<double>(agree) / static_cast<double>(total);

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
  double worst = 0.0;
  for (const auto& [tract, idx] : base.tracts) {
    const double a = static_cast<double>(idx.size()), b = static_cast<double>(moved.tract_count(tract));
    if (a > 0.0) worst = std::max(worst, std::abs(a - b) / a);
    else if (b > 0.0) worst = std::max(worst, 1.0);
  }
  o.detail << "self reassignment " << 100.0 * rate << "% of " << total << "; rigid copy max count change "
           << 100.0 * worst << "%";
  o.require(rate >= 0.99, ">= 99% reassigned");
  o.require(worst <= 0.01, "counts within 1%");
}

// 6. Identification-rate mechanics.
void identification(Outcome& o) {
  Parcellation p;
  p.subject_id = "s";
  p.tracts["AF_left"] = std::vector<std::size_t>(10);
  p.tracts["CC3"] = std::vector<std::size_t>(9);
  p.tracts["UF_left"] = std::vector<std::size_t>(15);
  p.tracts["MCP"] = {};
  const auto r10 = identify(p, 10);
  o.require(r10.identified.at("AF_left") && !r10.identified.at("CC3"), "10 identifies, 9 does not");

  // Monotone in threshold on a synthetic cohort with spread counts.
  Rng rng(6);
  std::vector<Parcellation> cohort;
  for (int s = 0; s < 20; ++s) {
    Parcellation q;
    q.subject_id = "sub-" + std::to_string(s);
    for (const auto& t : {"AF_left", "CC3", "CST_left", "UF_right", "MCP"})
      q.tracts[t] = std::vector<std::size_t>(rng.index(25));
    cohort.push_back(std::move(q));
  }
  std::map<std::size_t, std::map<std::string, double>> rates;
  for (std::size_t th : {5, 10, 15}) {
    std::vector<IdentificationResult> ids;
    for (const auto& q : cohort) ids.push_back(identify(q, th));
    rates[th] = identification_rates(ids);
  }
  bool monotone = true;
  for (const auto& [tract, r5] : rates[5])
    monotone = monotone && r5 >= rates[10].at(tract) && rates[10].at(tract) >= rates[15].at(tract);
  o.require(monotone, "IR monotone over {5, 10, 15}");

  std::vector<IdentificationResult> hand;
  for (std::size_t n : {12, 3, 10, 11}) {
    Parcellation q;
    q.tracts["AF_left"] = std::vector<std::size_t>(n);
    q.tracts["CC3"] = std::vector<std::size_t>(20);
    hand.push_back(identify(q));
  }
  const double af = identification_rate(hand, "AF_left"), cc = identification_rate(hand, "CC3");
  o.require(af == 75.0 && cc == 100.0, "cohort IR equals hand computation");
  o.detail << "boundary 10/9 ok; monotone " << (monotone ? "yes" : "no") << "; hand IR " << af << "% / " << cc << "%";
}

TractMeasureRow row(const std::string& subject, const std::string& tract, double age, double fa) {
  TractMeasureRow r;
  r.subject_id = subject;
  r.tract = tract;
  r.nos = 20;
  r.mean_fa = fa;
  r.meta.age_at_scan = age;
  return r;
}

// 7. Statistics.
void statistics(Outcome& o) {
  std::vector<TractMeasureRow> rows;
  for (int i = 0; i < 20; ++i) {
    const double age = 29.0 + 0.8 * i;
    rows.push_back(row("s" + std::to_string(i), "AF_left", age, 0.022820 * age + 0.1));
  }
  const double slope_err = std::abs(glm_fit(rows, Response::fa).beta - 0.022820);
  o.require(slope_err <= 1e-9, "noiseless slope within 1e-9");

  Rng rng(2718);
  int covered = 0;
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<TractMeasureRow> r;
    for (int i = 0; i < 40; ++i) {
      const double age = rng.uniform(29.0, 45.0);
      r.push_back(row("s", "AF_left", age, 0.0228 * age - 0.4 + 0.02 * rng.normal()));
    }
    const auto f = glm_fit(r, Response::fa);
    covered += f.ci_low <= 0.0228 && 0.0228 <= f.ci_high;
  }
  const double coverage = covered / 500.0;
  o.require(coverage >= 0.93, "CI coverage >= 93%");

  const std::vector<double> x{1, 2, 3}, zero{0, 0, 0};
  const auto t = paired_ttest(x, zero);
  // Student t with 2 degrees of freedom: P(|T| > t) = 1 - t / sqrt(t^2 + 2).
  const double p_oracle = 1.0 - t.t / std::sqrt(t.t * t.t + 2.0);
  const double t_err = std::abs(t.t - 2.0 * std::sqrt(3.0)), p_err = std::abs(t.p - p_oracle);
  o.require(t_err <= 1e-9, "paired t = 2 sqrt 3");
  o.require(p_err <= 1e-8, "paired p matches closed form");

  const double pb = bonferroni(std::vector<double>{0.0005}, 78).front();
  o.require(std::abs(pb - 0.039) <= 1e-12, "bonferroni(0.0005, 78) = 0.039");
  o.detail << "slope error " << slope_err << "; CI coverage " << 100.0 * coverage << "%; t error " << t_err
           << ", p error " << p_err << "; bonferroni " << pb;
}

// 8. Group-comparison recovery through the generator.
void group_recovery(Outcome& o) {
  std::size_t correct = 0, total = 0;
  for (std::uint64_t rep = 0; rep < 100; ++rep) {
    TractMeasureTable tables[2];
    for (int g = 0; g < 2; ++g) {
      CohortSpec spec = small_cohort(20, 8, 1000 * rep + g);
      spec.fiber_jitter = 0.0;
      spec.subject_fa_sd = 0.02;
      for (auto& b : spec.bundles) b.fa = {0.2, g == 0 ? 0.010 : 0.015, 0.02};
      for (const auto& s : generate_cohort(spec)) {
        Parcellation p;
        p.subject_id = s.tractogram.subject_id;
        p.cluster_of_fiber.assign(s.tractogram.size(), 0);
        for (std::size_t i = 0; i < s.tractogram.size(); ++i) p.tracts[s.truth.fiber_tracts[i]].push_back(i);
        const auto m = extract_measures(p, s.tractogram);
        tables[g].insert(tables[g].end(), m.begin(), m.end());
      }
    }
    const auto cmp = compare_groups(tables[0], tables[1], Response::fa);
    for (const auto& r : cmp.rows) {
      correct += r.a.beta < r.b.beta;
      ++total;
    }
  }
  const double rate = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  o.detail << correct << " of " << total << " tract fits ordered correctly (" << 100.0 * rate << "%)";
  o.require(total == 800, "all tracts compared");
  o.require(rate >= 0.95, ">= 95% ordering");
}

// 9. End-to-end determinism at desk scale.
void determinism(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOptions quiet;
  quiet.log_level = LogLevel::quiet;
  PipelineConfig a = default_pipeline_config();
  a.output_dir = scratch("run-a");
  PipelineConfig b = a;
  b.output_dir = scratch("run-b");
  const auto first = run_pipeline(a, quiet);
  const auto second = run_pipeline(b, quiet);
  const double secs = seconds_since(t0);
  std::size_t differ = 0;
  for (const auto& [file, sum] : first.checksums) {
    const auto it = second.checksums.find(file);
    differ += it == second.checksums.end() || it->second != sum;
  }
  differ += second.checksums.size() != first.checksums.size();
  o.detail << first.checksums.size() << " outputs, " << differ << " differ; two runs " << secs << " s";
  o.require(!first.checksums.empty(), "outputs written");
  o.require(differ == 0, "identical checksums");
  o.require(secs < 600.0, "runtime < 10 min");
}

// 10. Atlas round trip and bundle errors.
void round_trip(Outcome& o) {
  const auto& la = shared_atlas();
  const fs::path dir = scratch("bundle");
  save_atlas(la.atlas, dir);
  const Atlas back = load_atlas(dir);
  Rng rng(10);
  std::vector<ResampledFiber> probes;
  for (int i = 0; i < 1000; ++i)
    probes.push_back(i % 2 ? la.build.pooled[rng.index(la.build.pooled.size())] : random_fiber(rng, la.atlas.points(), 60.0));
  const auto before = assign_all(embed_all(probes, la.atlas.nystrom), la.atlas.clusters);
  const auto after = assign_all(embed_all(probes, back.nystrom), back.clusters);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) changed += before[i] != after[i];
  o.require(changed == 0, "assignments preserved");
  o.require(back.labels == la.atlas.labels, "labels preserved");

  using K = AtlasBundleError::Kind;
  auto kind_of = [](const fs::path& d) {
    try {
      load_atlas(d);
    } catch (const AtlasBundleError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  auto copy = [&](const std::string& name) {
    const fs::path p = scratch(name);
    fs::copy(dir, p);
    return p;
  };
  const fs::path magic = copy("magic");
  json m = read_json(magic / "manifest.json");
  m["magic"] = "SOMETHING-ELSE";
  write_json(magic / "manifest.json", m);
  const fs::path ver = copy("version");
  m = read_json(ver / "manifest.json");
  m["format_version"] = "2.0";
  write_json(ver / "manifest.json", m);
  const fs::path crc = copy("checksum");
  {
    std::fstream f(crc / "centroids.f64", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x55');
  }
  const fs::path cut = copy("truncated");
  fs::resize_file(cut / "eigenvectors.f64", 16);
  const std::vector<int> kinds{kind_of(magic), kind_of(ver), kind_of(crc), kind_of(cut)};
  const std::vector<int> expect{static_cast<int>(K::not_an_atlas), static_cast<int>(K::version),
                                static_cast<int>(K::checksum), static_cast<int>(K::truncated)};
  o.require(kinds == expect, "distinct error kinds");
  o.detail << "1000 fibers, " << changed << " assignments changed; error kinds";
  for (int k : kinds) o.detail << " " << k;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
      {"metric oracle equivalence", metric},
      {"registration recovery", registration},
      {"embedding fidelity", embedding},
      {"clustering ground truth", clustering},
      {"parcellation self-consistency", self_consistency},
      {"identification-rate mechanics", identification},
      {"statistics", statistics},
      {"group-comparison recovery", group_recovery},
      {"end-to-end determinism", determinism},
      {"atlas round trip", round_trip},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    std::printf("%-4s %2d %-32s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.str().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}

#include "fibermap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fibermap/error.hpp"
#include "fibermap/rng.hpp"
#include "fibermap/taxonomy.hpp"
#include "fibermap/tractogram_io.hpp"

namespace fibermap {

using nlohmann::json;

void BundleSpec::validate() const {
  if (centerline.size() < 2) throw ValidationError("bundle centerline needs at least 2 control points");
  if (!(radius > 0.0)) throw ValidationError("bundle radius must be > 0");
  if (fiber_count < 1) throw ValidationError("bundle fiber_count must be >= 1");
  if (!is_known_tract(label)) throw ValidationError("bundle label '" + label + "' is not a taxonomy tract");
}

void CohortSpec::validate() const {
  if (bundles.empty()) throw ValidationError("cohort spec has no bundles");
  for (const auto& b : bundles) b.validate();
  if (subjects < 2) throw ValidationError("cohort needs at least 2 subjects");
  if (!(age_max > age_min) || !(age_min > 0.0)) throw ValidationError("cohort age range must be positive-width and > 0");
  if (female_fraction < 0.0 || female_fraction > 1.0) throw ValidationError("female_fraction must be in [0,1]");
  if (preterm_fraction < 0.0 || preterm_fraction > 1.0) throw ValidationError("preterm_fraction must be in [0,1]");
  if (!(scale > 0.0)) throw ValidationError("scale must be > 0");
  if (!(point_spacing > 0.0)) throw ValidationError("point_spacing must be > 0");
  for (const auto& [k, _] : slope_overrides)
    if (k != "female" && k != "male" && k != "preterm" && k != "term")
      throw ValidationError("unknown slope override group '" + k + "'");
  // FA must stay inside [0,1] before noise over the whole age range.
  for (const auto& b : bundles) {
    std::vector<double> slopes{b.fa.slope};
    for (const auto& [_, s] : slope_overrides) slopes.push_back(s);
    for (double s : slopes)
      for (double a : {age_min, age_max}) {
        const double fa = b.fa.intercept + s * a;
        if (fa < 0.0 || fa > 1.0)
          throw ValidationError("FA profile of '" + b.label + "' leaves [0,1] within the cohort age range");
      }
  }
}

namespace {

// Dense Catmull-Rom sampling of the control polygon, then arclength table.
struct Curve {
  std::vector<Vec3> pts;
  std::vector<double> s;  // cumulative arclength, normalized to [0, 1]
  double length = 0.0;

  Vec3 at(double u) const {
    u = std::clamp(u, 0.0, 1.0);
    auto it = std::upper_bound(s.begin(), s.end(), u);
    std::size_t i = it == s.begin() ? 0 : static_cast<std::size_t>(it - s.begin()) - 1;
    if (i + 1 >= pts.size()) return pts.back();
    const double w = s[i + 1] > s[i] ? (u - s[i]) / (s[i + 1] - s[i]) : 0.0;
    return pts[i] + w * (pts[i + 1] - pts[i]);
  }
  Vec3 tangent(double u) const {
    const double h = 1e-3;
    Vec3 d = at(std::min(1.0, u + h)) - at(std::max(0.0, u - h));
    const double n = d.norm();
    return n > 0 ? Vec3(d / n) : Vec3::UnitX();
  }
};

Curve make_curve(const std::vector<Vec3>& cp) {
  Curve c;
  const std::size_t n = cp.size();
  constexpr int kPerSegment = 40;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vec3& p0 = cp[i == 0 ? 0 : i - 1];
    const Vec3& p1 = cp[i];
    const Vec3& p2 = cp[i + 1];
    const Vec3& p3 = cp[i + 2 < n ? i + 2 : n - 1];
    for (int k = 0; k < kPerSegment; ++k) {
      const double t = static_cast<double>(k) / kPerSegment;
      const double t2 = t * t, t3 = t2 * t;
      c.pts.push_back(0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                             (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3));
    }
  }
  c.pts.push_back(cp.back());
  c.s.assign(c.pts.size(), 0.0);
  for (std::size_t i = 1; i < c.pts.size(); ++i) c.s[i] = c.s[i - 1] + (c.pts[i] - c.pts[i - 1]).norm();
  c.length = c.s.back();
  for (double& v : c.s) v /= c.length;
  return c;
}

Vec3 random_in_ball(Rng& rng, double radius) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  const double n = v.norm();
  if (n == 0.0) return Vec3::Zero();
  return v / n * radius * std::cbrt(rng.uniform());
}

bool is_preterm(const CohortSpec& spec, std::size_t index) {
  // Deterministic spread of preterm subjects through the index range.
  const double f = spec.preterm_fraction;
  return std::floor((index + 1) * f) > std::floor(index * f);
}

bool is_female(const CohortSpec& spec, std::size_t index) {
  const double f = spec.female_fraction;
  return std::floor((index + 1) * f) > std::floor(index * f);
}

}  // namespace

std::vector<BundleSpec> default_bundles(std::size_t fibers) {
  auto mirror = [](std::vector<Vec3> pts) {
    for (auto& p : pts) p.x() = -p.x();
    return pts;
  };
  const std::vector<Vec3> af{{-38, 28, 22}, {-44, 2, 32}, {-46, -30, 24}, {-50, -42, 2}, {-48, -22, -14}};
  const std::vector<Vec3> cst{{-24, -14, 62}, {-20, -16, 30}, {-14, -20, 2}, {-8, -26, -34}};
  const std::vector<Vec3> cc{{-48, 6, 40}, {-24, 6, 30}, {0, 6, 22}, {24, 6, 30}, {48, 6, 40}};
  const std::vector<Vec3> uf{{-30, 48, 2}, {-34, 28, -6}, {-36, 14, -18}, {-40, 24, -30}};
  const std::vector<Vec3> ilf{{-36, -82, 4}, {-44, -52, -6}, {-46, -22, -16}, {-42, 2, -28}};
  const std::vector<Vec3> cb{{-6, 44, 8}, {-6, 20, 34}, {-6, -14, 42}, {-6, -46, 32}, {-6, -62, 8}};
  std::vector<BundleSpec> out = {
      {af, 3.0, fibers, "AF_left", {0.20, 0.0100, 0.02}},
      {mirror(af), 3.0, fibers, "AF_right", {0.20, 0.0095, 0.02}},
      {cst, 3.0, fibers, "CST_left", {0.30, 0.0080, 0.02}},
      {mirror(cst), 3.0, fibers, "CST_right", {0.30, 0.0082, 0.02}},
      {cc, 3.0, fibers, "CC3", {0.25, 0.0090, 0.02}},
      {uf, 3.0, fibers, "UF_left", {0.18, 0.0070, 0.02}},
      {ilf, 3.0, fibers, "ILF_left", {0.22, 0.0085, 0.02}},
      {cb, 3.0, fibers, "CB-D_left", {0.21, 0.0075, 0.02}},
  };
  return out;
}

SyntheticSubject generate_subject(const CohortSpec& spec, std::size_t index) {
  spec.validate();
  if (index >= spec.subjects) throw ValidationError("subject index out of range");
  Rng rng = Rng::split(spec.seed, index);

  SyntheticSubject out;
  char id[64];
  std::snprintf(id, sizeof id, "%s-%03zu", spec.id_prefix.c_str(), index);
  Tractogram& t = out.tractogram;
  t.subject_id = id;
  t.meta.group = spec.group;
  t.meta.age_at_scan = rng.uniform(spec.age_min, spec.age_max);
  t.meta.sex = is_female(spec, index) ? Sex::female : Sex::male;
  const bool preterm = is_preterm(spec, index);
  if (spec.group == Group::neonate) {
    // Scan happens at or after birth.
    const double ba = std::min(preterm ? rng.uniform(24.0, 31.9) : rng.uniform(32.0, 42.0), spec.age_max);
    if (t.meta.age_at_scan < ba) t.meta.age_at_scan = ba + (spec.age_max - ba) * (t.meta.age_at_scan - spec.age_min) / (spec.age_max - spec.age_min);
    t.meta.birth_age = ba;
    t.meta.covariates["birth_weight"] = 0.12 * *t.meta.birth_age - 1.4 + 0.2 * rng.normal();
    t.meta.covariates["head_circumference"] = 0.8 * t.meta.age_at_scan + 2.0 + 0.8 * rng.normal();
  }
  out.truth.subject_id = t.subject_id;
  out.truth.age = t.meta.age_at_scan;

  // Subject placement: rotation and translation with uniformly drawn magnitudes.
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis = axis.norm() > 0 ? Vec3(axis.normalized()) : Vec3::UnitZ();
  const double angle = rng.uniform(0.0, spec.max_rotation_deg) * std::numbers::pi / 180.0;
  Vec3 dir(rng.normal(), rng.normal(), rng.normal());
  dir = dir.norm() > 0 ? Vec3(dir.normalized()) : Vec3::UnitX();
  const Vec3 shift = dir * rng.uniform(0.0, spec.max_translation);
  const double s = spec.scale * std::exp(rng.uniform(-1.0, 1.0) * std::log1p(spec.scale_jitter));
  out.truth.true_transform = AffineTransform(s * rotation_matrix(axis * angle), shift);

  for (std::size_t b = 0; b < spec.bundles.size(); ++b) {
    const BundleSpec& bundle = spec.bundles[b];
    const Curve curve = make_curve(bundle.centerline);
    double slope = bundle.fa.slope;
    const char* sex_key = t.meta.sex == Sex::female ? "female" : "male";
    if (auto it = spec.slope_overrides.find(sex_key); it != spec.slope_overrides.end()) slope = it->second;
    if (spec.group == Group::neonate) {
      if (auto it = spec.slope_overrides.find(preterm ? "preterm" : "term"); it != spec.slope_overrides.end())
        slope = it->second;
    }
    out.truth.fa_slopes[bundle.label] = slope;
    const double subject_offset = spec.subject_fa_sd * rng.normal();
    const double fa_mean = bundle.fa.intercept + slope * t.meta.age_at_scan + subject_offset;
    const double md_mean = spec.md_intercept + spec.md_slope * t.meta.age_at_scan;

    for (std::size_t f = 0; f < bundle.fiber_count; ++f) {
      // Template fiber shared by every subject of the cohort.
      Rng tmpl = Rng::split(spec.seed ^ 0x5bd1e995ULL, b * 1000003ULL + f);
      const double u0 = tmpl.uniform(0.0, 0.06);
      const double u1 = tmpl.uniform(0.94, 1.0);
      const Vec3 o0 = random_in_ball(tmpl, bundle.radius);
      const Vec3 o1 = random_in_ball(tmpl, bundle.radius);
      const Vec3 o2 = random_in_ball(tmpl, bundle.radius);
      // Subject-specific smooth displacement.
      const Vec3 j0 = random_in_ball(rng, spec.fiber_jitter);
      const Vec3 j1 = random_in_ball(rng, spec.fiber_jitter);
      const std::size_t npts = std::max<std::size_t>(
          3, static_cast<std::size_t>(std::lround((u1 - u0) * curve.length / spec.point_spacing)) + 1);
      std::vector<Vec3> pts;
      std::vector<double> fa, md;
      pts.reserve(npts);
      for (std::size_t k = 0; k < npts; ++k) {
        const double w = static_cast<double>(k) / static_cast<double>(npts - 1);
        const double u = u0 + (u1 - u0) * w;
        Vec3 o = (1.0 - w) * o0 + w * o1 + 2.0 * w * (1.0 - w) * (o2 - 0.5 * (o0 + o1));
        const Vec3 tau = curve.tangent(u);
        o -= o.dot(tau) * tau;
        if (o.norm() > bundle.radius) o *= bundle.radius / o.norm();
        o += (1.0 - w) * j0 + w * j1;
        pts.push_back(out.truth.true_transform.apply(curve.at(u) + o));
        fa.push_back(std::clamp(fa_mean + bundle.fa.noise * rng.normal(), 0.0, 1.0));
        md.push_back(std::max(0.0, md_mean + spec.md_noise * rng.normal()));
      }
      t.streamlines.emplace_back(std::move(pts), ScalarChannels{{kFA, std::move(fa)}, {kMD, std::move(md)}});
      out.truth.fiber_tracts.push_back(bundle.label);
    }
  }
  return out;
}

std::vector<SyntheticSubject> generate_cohort(const CohortSpec& spec) {
  spec.validate();
  std::vector<SyntheticSubject> out;
  out.reserve(spec.subjects);
  for (std::size_t i = 0; i < spec.subjects; ++i) out.push_back(generate_subject(spec, i));
  return out;
}

json to_json(const GroundTruth& g) {
  return {{"subject_id", g.subject_id},
          {"age", g.age},
          {"true_transform", to_json(g.true_transform)},
          {"fa_slopes", g.fa_slopes},
          {"fiber_tracts", g.fiber_tracts}};
}

GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth g;
  g.subject_id = j.at("subject_id").get<std::string>();
  g.age = j.at("age").get<double>();
  g.true_transform = transform_from_json(j.at("true_transform"));
  g.fa_slopes = j.at("fa_slopes").get<std::map<std::string, double>>();
  g.fiber_tracts = j.at("fiber_tracts").get<std::vector<std::string>>();
  return g;
}

json to_json(const CohortSpec& s) {
  json bundles = json::array();
  for (const auto& b : s.bundles) {
    json cl = json::array();
    for (const auto& p : b.centerline) cl.push_back({p.x(), p.y(), p.z()});
    bundles.push_back({{"label", b.label},
                       {"centerline", cl},
                       {"radius", b.radius},
                       {"fiber_count", b.fiber_count},
                       {"fa", {{"intercept", b.fa.intercept}, {"slope", b.fa.slope}, {"noise", b.fa.noise}}}});
  }
  return {{"id_prefix", s.id_prefix},
          {"bundles", bundles},
          {"subjects", s.subjects},
          {"group", to_string(s.group)},
          {"age_min", s.age_min},
          {"age_max", s.age_max},
          {"female_fraction", s.female_fraction},
          {"preterm_fraction", s.preterm_fraction},
          {"slope_overrides", s.slope_overrides},
          {"subject_fa_sd", s.subject_fa_sd},
          {"md_intercept", s.md_intercept},
          {"md_slope", s.md_slope},
          {"md_noise", s.md_noise},
          {"fiber_jitter", s.fiber_jitter},
          {"point_spacing", s.point_spacing},
          {"max_translation", s.max_translation},
          {"max_rotation_deg", s.max_rotation_deg},
          {"scale", s.scale},
          {"scale_jitter", s.scale_jitter},
          {"seed", s.seed}};
}

CohortSpec cohort_spec_from_json(const json& j) {
  CohortSpec s;
  s.id_prefix = j.value("id_prefix", s.id_prefix);
  if (j.contains("bundles")) {
    for (const auto& b : j["bundles"]) {
      BundleSpec bs;
      bs.label = b.at("label").get<std::string>();
      for (const auto& p : b.at("centerline")) bs.centerline.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
      bs.radius = b.value("radius", bs.radius);
      bs.fiber_count = b.value("fiber_count", bs.fiber_count);
      if (b.contains("fa")) {
        bs.fa.intercept = b["fa"].value("intercept", bs.fa.intercept);
        bs.fa.slope = b["fa"].value("slope", bs.fa.slope);
        bs.fa.noise = b["fa"].value("noise", bs.fa.noise);
      }
      s.bundles.push_back(std::move(bs));
    }
  } else {
    s.bundles = default_bundles(j.value("fibers_per_bundle", std::size_t{100}));
  }
  s.subjects = j.value("subjects", s.subjects);
  s.group = parse_group(j.value("group", std::string(to_string(s.group))));
  s.age_min = j.value("age_min", s.age_min);
  s.age_max = j.value("age_max", s.age_max);
  s.female_fraction = j.value("female_fraction", s.female_fraction);
  s.preterm_fraction = j.value("preterm_fraction", s.preterm_fraction);
  s.slope_overrides = j.value("slope_overrides", s.slope_overrides);
  s.subject_fa_sd = j.value("subject_fa_sd", s.subject_fa_sd);
  s.md_intercept = j.value("md_intercept", s.md_intercept);
  s.md_slope = j.value("md_slope", s.md_slope);
  s.md_noise = j.value("md_noise", s.md_noise);
  s.fiber_jitter = j.value("fiber_jitter", s.fiber_jitter);
  s.point_spacing = j.value("point_spacing", s.point_spacing);
  s.max_translation = j.value("max_translation", s.max_translation);
  s.max_rotation_deg = j.value("max_rotation_deg", s.max_rotation_deg);
  s.scale = j.value("scale", s.scale);
  s.scale_jitter = j.value("scale_jitter", s.scale_jitter);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::vector<std::filesystem::path> write_cohort(const std::vector<SyntheticSubject>& cohort,
                                                const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& s : cohort) {
    out.push_back(save_tractogram(s.tractogram, dir / s.tractogram.subject_id));
    write_json(dir / (s.tractogram.subject_id + ".truth.json"), to_json(s.truth));
  }
  return out;
}

}  // namespace fibermap

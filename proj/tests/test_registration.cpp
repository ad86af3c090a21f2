#include <doctest.h>

#include <cmath>

#include "fibermap/error.hpp"
#include "fibermap/registration.hpp"
#include "support.hpp"

using namespace fibermap;
using namespace fibermap::test;

namespace {

struct Residual {
  double mm;
  double degrees;
  double scale;  // cube root of the determinant ratio
};

// How far (Ta∘Ga) and (Tb∘Gb) disagree, measured at point c.
Residual residual(const AffineTransform& ta, const AffineTransform& ga, const AffineTransform& tb,
                  const AffineTransform& gb, const Vec3& c) {
  const auto d = ta.compose(ga).inverse().compose(tb.compose(gb));
  const double s = std::cbrt(d.linear().determinant());
  return {(d.apply(c) - c).norm(), deg(rotation_angle(d.linear() / s)), s};
}

RegistrationConfig quick(TransformFamily f, std::uint64_t seed = 1) {
  RegistrationConfig rc;
  rc.family = f;
  rc.fibers_per_subject_sample = 40;
  rc.sigma_schedule = {20.0, 10.0, 5.0};
  rc.max_iters_per_scale = 6;
  rc.seed = seed;
  return rc;
}

std::vector<std::vector<ResampledFiber>> samples(std::size_t subjects, std::size_t fibers, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<ResampledFiber>> out(subjects);
  for (auto& s : out)
    for (std::size_t i = 0; i < fibers; ++i) s.push_back(random_fiber(rng, 15, 15.0));
  return out;
}

double oracle_pairwise(const std::vector<std::vector<ResampledFiber>>& x, const std::vector<AffineTransform>& t,
                       double sigma) {
  double total = 0.0, count = 0.0;
  for (std::size_t s = 0; s < x.size(); ++s)
    for (std::size_t u = 0; u < x.size(); ++u) {
      if (s == u) continue;
      for (const auto& fi : x[s])
        for (const auto& fj : x[u]) {
          const double d = oracle_symmetric(apply_transform(fi, t[s]), apply_transform(fj, t[u]));
          total += -std::log(std::exp(-d * d / (sigma * sigma)) + 1e-12);
          count += 1.0;
        }
    }
  return total / count;
}

double oracle_entropy(const std::vector<std::vector<ResampledFiber>>& x, const std::vector<AffineTransform>& t,
                      double sigma) {
  double total = 0.0, count = 0.0;
  for (std::size_t s = 0; s < x.size(); ++s)
    for (const auto& fi : x[s]) {
      double a = 0.0, others = 0.0;
      for (std::size_t u = 0; u < x.size(); ++u) {
        if (u == s) continue;
        for (const auto& fj : x[u]) {
          const double d = oracle_symmetric(apply_transform(fi, t[s]), apply_transform(fj, t[u]));
          a += std::exp(-d * d / (sigma * sigma));
          others += 1.0;
        }
      }
      total += -std::log(a / others + 1e-12);
      count += 1.0;
    }
  return total / count;
}

}  // namespace

TEST_CASE("config validation") {
  RegistrationConfig rc;
  CHECK_NOTHROW(rc.validate());
  rc.sigma_schedule = {10.0, 10.0};
  CHECK_THROWS_AS(rc.validate(), ValidationError);
  rc.sigma_schedule = {};
  CHECK_THROWS_AS(rc.validate(), ValidationError);
  rc = {};
  rc.fibers_per_subject_sample = 9;
  CHECK_THROWS_AS(rc.validate(), ValidationError);
  CHECK(parse_transform_family("affine") == TransformFamily::affine);
  CHECK_THROWS_AS(parse_transform_family("nonlinear"), ValidationError);
  CHECK(parse_registration_objective(to_string(RegistrationObjective::pairwise)) == RegistrationObjective::pairwise);
}

TEST_CASE("group objectives match double-loop oracles") {
  const auto x = samples(3, 20, 5);
  std::vector<AffineTransform> t{AffineTransform::identity(),
                                 AffineTransform::translation(Vec3(2, -1, 3)),
                                 AffineTransform::rotation(Vec3(0.1, 0.2, -0.1)).compose(AffineTransform::scaling(1.1))};
  for (double sigma : {30.0, 10.0, 5.0}) {
    CHECK(group_objective(x, t, sigma) == doctest::Approx(oracle_pairwise(x, t, sigma)).epsilon(1e-12));
    CHECK(group_entropy(x, t, sigma) == doctest::Approx(oracle_entropy(x, t, sigma)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(group_objective(std::span(x).first(1), std::span(t).first(1), 10.0), ValidationError);
  CHECK_THROWS_AS(group_objective(x, std::span(t).first(2), 10.0), ValidationError);
}

TEST_CASE("group objectives are invariant to a common rigid motion") {
  const auto x = samples(3, 15, 8);
  std::vector<AffineTransform> t{AffineTransform::identity(), AffineTransform::translation(Vec3(1, 2, 0)),
                                 AffineTransform::rotation(Vec3(0, 0.2, 0))};
  const auto g = AffineTransform::translation(Vec3(30, -12, 7)).compose(AffineTransform::rotation(Vec3(0.4, -0.3, 0.9)));
  std::vector<AffineTransform> moved;
  for (const auto& ti : t) moved.push_back(g.compose(ti));
  for (double sigma : {20.0, 5.0}) {
    CHECK(group_objective(x, moved, sigma) == doctest::Approx(group_objective(x, t, sigma)).epsilon(1e-6));
    CHECK(group_entropy(x, moved, sigma) == doctest::Approx(group_entropy(x, t, sigma)).epsilon(1e-6));
  }
}

TEST_CASE("group objectives prefer the correcting translation") {
  auto x = samples(1, 20, 21);
  x.push_back({});
  const Vec3 shift(6, 0, 0);
  for (const auto& f : x[0]) x[1].push_back(apply_transform(f, AffineTransform::translation(shift)));
  const std::vector<AffineTransform> id{AffineTransform::identity(), AffineTransform::identity()};
  const std::vector<AffineTransform> fix{AffineTransform::identity(), AffineTransform::translation(-shift)};
  for (double sigma : {30.0, 10.0, 5.0}) {
    CHECK(group_objective(x, fix, sigma) <= group_objective(x, id, sigma));
    CHECK(group_entropy(x, fix, sigma) <= group_entropy(x, id, sigma));
  }
}

TEST_CASE("register_group: translated duplicate") {
  const auto c = generate_cohort(small_cohort(2, 30, 3));
  const Tractogram& a = c[0].tractogram;
  const auto shift = AffineTransform::translation(Vec3(20, 0, 0));
  std::vector<Tractogram> tr{a, apply_transform(a, shift)};
  tr[1].subject_id = "copy";
  const auto r = register_group(tr, quick(TransformFamily::rigid));
  REQUIRE(r.transforms.size() == 2);
  const auto e = residual(r.transforms[0], AffineTransform::identity(), r.transforms[1], shift, a.centroid());
  CHECK(e.mm < 1.0);
  CHECK(e.degrees < 2.0);
  // Gauge: the subject centroids move by zero on average.
  const Vec3 c0 = a.centroid(), c1 = tr[1].centroid();
  CHECK(((r.transforms[0].apply(c0) - c0) + (r.transforms[1].apply(c1) - c1)).norm() < 1e-6);
}

TEST_CASE("register_group: 1.5x scaled duplicate under similarity") {
  const auto c = generate_cohort(small_cohort(2, 30, 4));
  const Tractogram& a = c[0].tractogram;
  const auto grow = centroid_scaling(a, 1.5);
  std::vector<Tractogram> tr{a, apply_transform(a, grow)};
  const auto r = register_group(tr, quick(TransformFamily::similarity));
  const auto e = residual(r.transforms[0], AffineTransform::identity(), r.transforms[1], grow, a.centroid());
  CHECK(e.scale == doctest::Approx(1.0).epsilon(0.02));
  CHECK(e.mm < 1.0);
  // Gauge: mean log-scale is zero.
  const double ls = std::log(r.transforms[0].linear().determinant()) + std::log(r.transforms[1].linear().determinant());
  CHECK(std::abs(ls) < 1e-6);
}

TEST_CASE("register_group: aligned subjects stay near identity, trace monotone, deterministic") {
  auto spec = small_cohort(3, 25, 6);
  const auto c = generate_cohort(spec);
  const auto tr = tractograms(c);
  const auto rc = quick(TransformFamily::similarity, 9);
  const auto r = register_group(tr, rc);
  for (const auto& t : r.transforms) {
    const Vec3 p = tr[0].centroid();
    CHECK((t.apply(p) - p).norm() < 0.5);
    CHECK(std::cbrt(t.linear().determinant()) == doctest::Approx(1.0).epsilon(0.01));
  }
  for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
    if (r.objective_trace[i].scale == r.objective_trace[i - 1].scale)
      CHECK(r.objective_trace[i].value <= r.objective_trace[i - 1].value + 1e-12);
  const auto again = register_group(tr, rc);
  for (std::size_t s = 0; s < tr.size(); ++s) CHECK(again.transforms[s].row_major() == r.transforms[s].row_major());
}

TEST_CASE("register_group: rejects bad input") {
  const auto c = generate_cohort(small_cohort(2, 10, 1));
  const auto tr = tractograms(c);
  CHECK_THROWS_AS(register_group(std::span(tr).first(1), quick(TransformFamily::rigid)), ValidationError);
  auto rc = quick(TransformFamily::rigid);
  rc.fibers_per_subject_sample = 1000;
  CHECK_THROWS_AS(register_group(tr, rc), ValidationError);
  Tractogram point{"point", {}, {}};
  for (int i = 0; i < 40; ++i) point.streamlines.emplace_back(std::vector<Vec3>{Vec3(1, 1, 1), Vec3(1, 1, 1.0 + 1e-300)});
  std::vector<Tractogram> bad{tr[0], point};
  CHECK_THROWS(register_group(bad, quick(TransformFamily::rigid)));
}

TEST_CASE("register_to_atlas: translation, identity and 1.5x scale") {
  const auto c = generate_cohort(small_cohort(2, 30, 12));
  const Tractogram& a = c[0].tractogram;
  std::vector<ResampledFiber> atlas;
  for (std::size_t i = 0; i < a.size(); i += 2) atlas.push_back(resample(a.streamlines[i], 15));
  auto rc = quick(TransformFamily::rigid);
  rc.fibers_per_subject_sample = 60;

  const auto shift = AffineTransform::translation(Vec3(-8, 12, 5));
  const auto moved = register_to_atlas(apply_transform(a, shift), atlas, rc);
  auto e = residual(AffineTransform::identity(), AffineTransform::identity(), moved, shift, a.centroid());
  CHECK(e.mm < 1.0);

  const auto same = register_to_atlas(a, atlas, rc);
  e = residual(AffineTransform::identity(), AffineTransform::identity(), same, AffineTransform::identity(), a.centroid());
  CHECK(e.mm < 0.5);

  rc.family = TransformFamily::similarity;
  const auto shrink = centroid_scaling(a, 1.0 / 1.5);
  const auto grown = register_to_atlas_detailed(apply_transform(a, shrink), atlas, rc);
  CHECK(std::cbrt(grown.transform.linear().determinant()) == doctest::Approx(1.5).epsilon(0.03));
  CHECK_THROWS_AS(register_to_atlas(a, std::vector<ResampledFiber>{}, rc), ValidationError);
}

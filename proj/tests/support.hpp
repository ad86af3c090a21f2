#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

#include "fibermap/atlas.hpp"
#include "fibermap/rng.hpp"
#include "fibermap/synth.hpp"

namespace fibermap::test {

inline ResampledFiber random_fiber(Rng& rng, std::size_t p = kDefaultResamplePoints, double extent = 40.0) {
  ResampledFiber f;
  Vec3 x(rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-extent, extent));
  for (std::size_t i = 0; i < p; ++i) {
    f.points.push_back(x);
    x += Vec3(rng.normal(), rng.normal(), rng.normal()) * 3.0;
  }
  return f;
}

inline ResampledFiber straight(const Vec3& from, const Vec3& to, std::size_t p = kDefaultResamplePoints) {
  ResampledFiber f;
  for (std::size_t i = 0; i < p; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(p - 1);
    f.points.push_back(from + t * (to - from));
  }
  return f;
}

// Brute-force directed MCP, written independently of the library.
inline double oracle_directed(const ResampledFiber& a, const ResampledFiber& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.points.size(); ++j) {
      const double dx = a.points[i][0] - b.points[j][0];
      const double dy = a.points[i][1] - b.points[j][1];
      const double dz = a.points[i][2] - b.points[j][2];
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (d < best) best = d;
    }
    sum += best;
  }
  return sum / static_cast<double>(a.points.size());
}

inline double oracle_symmetric(const ResampledFiber& a, const ResampledFiber& b) {
  return (oracle_directed(a, b) + oracle_directed(b, a)) / 2.0;
}

// Straight bundle of parallel fibers around the segment from -> to.
inline std::vector<ResampledFiber> straight_bundle(Rng& rng, const Vec3& from, const Vec3& to, std::size_t n,
                                                   double radius = 2.0) {
  std::vector<ResampledFiber> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 off(rng.uniform(-radius, radius), rng.uniform(-radius, radius), rng.uniform(-radius, radius));
    out.push_back(straight(from + off, to + off));
  }
  return out;
}

inline double deg(double rad) { return rad * 180.0 / std::numbers::pi; }

inline CohortSpec small_cohort(std::size_t subjects, std::size_t fibers_per_bundle, std::uint64_t seed) {
  CohortSpec s;
  s.bundles = default_bundles(fibers_per_bundle);
  s.subjects = subjects;
  s.seed = seed;
  s.age_min = 30.0;
  s.age_max = 44.0;
  return s;
}

inline std::vector<Tractogram> tractograms(const std::vector<SyntheticSubject>& c) {
  std::vector<Tractogram> out;
  for (const auto& s : c) out.push_back(s.tractogram);
  return out;
}

struct LabeledAtlas {
  Atlas atlas;
  AtlasBuildResult build;
  std::vector<SyntheticSubject> cohort;
};

// Unregistered atlas of an unperturbed synthetic cohort, labeled from
// generator truth by majority vote.
inline LabeledAtlas labeled_atlas(std::size_t subjects, std::size_t fibers_per_bundle, std::size_t k,
                                  std::uint64_t seed) {
  LabeledAtlas out;
  out.cohort = generate_cohort(small_cohort(subjects, fibers_per_bundle, seed));
  const auto tr = tractograms(out.cohort);
  AtlasBuildConfig cfg;
  cfg.downsample_per_subject = tr.front().size();
  cfg.register_subjects = false;
  cfg.nystrom = {std::min<std::size_t>(300, tr.size() * tr.front().size()), 10, 30.0, seed, true};
  cfg.clusters = k;
  cfg.seed = seed;
  out.build = build_atlas(tr, cfg);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < out.build.pooled.size(); ++i)
    names.push_back(out.cohort[out.build.pooled_subject[i]].truth.fiber_tracts[out.build.pooled_source[i]]);
  out.atlas = out.build.atlas;
  out.atlas.labels = majority_labels(k, out.build.assignments, names);
  return out;
}

// Cyclic Jacobi eigensolver for symmetric matrices: eigenvalues on return
// in `values`, eigenvectors as columns of `vectors`, both unsorted.
inline void jacobi(std::vector<std::vector<double>> a, std::vector<double>& values, std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  vectors.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vectors[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k][p], vkq = vectors[k][q];
          vectors[k][p] = c * vkp - s * vkq;
          vectors[k][q] = s * vkp + c * vkq;
        }
      }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i][i];
}

// Full spectral embedding of all fibers: rows of the top eigenvectors of
// D^-1/2 W D^-1/2, skipping the leading one, each scaled by its eigenvalue.
inline std::vector<std::vector<double>> oracle_embedding(const std::vector<ResampledFiber>& f, double sigma, std::size_t dims) {
  const std::size_t n = f.size();
  std::vector<std::vector<double>> w(n, std::vector<double>(n));
  std::vector<double> d(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dist = oracle_symmetric(f[i], f[j]);
      w[i][j] = std::exp(-dist * dist / (sigma * sigma));
      d[i] += w[i][j];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i][j] /= std::sqrt(d[i] * d[j]);
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs;
  jacobi(w, vals, vecs);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
  std::vector<std::vector<double>> out(n, std::vector<double>(dims));
  for (std::size_t k = 0; k < dims; ++k)
    for (std::size_t i = 0; i < n; ++i) out[i][k] = vals[order[k + 1]] * vecs[i][order[k + 1]];
  return out;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace fibermap::test

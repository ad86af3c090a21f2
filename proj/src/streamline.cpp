#include "fibermap/streamline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fibermap/error.hpp"
#include "fibermap/rng.hpp"

namespace fibermap {

Streamline::Streamline(std::vector<Vec3> points, ScalarChannels scalars)
    : points_(std::move(points)), scalars_(std::move(scalars)) {
  if (points_.size() < 2) throw ValidationError("streamline needs at least 2 points");
  for (const auto& p : points_)
    if (!p.allFinite()) throw ValidationError("streamline has a non-finite coordinate");
  for (const auto& [name, values] : scalars_) {
    if (values.size() != points_.size())
      throw ValidationError("scalar channel '" + name + "' length does not match point count");
    if (name == kFA) {
      for (double v : values)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("FA value outside [0,1]");
    }
  }
}

const std::vector<double>& Streamline::channel(const std::string& name) const {
  auto it = scalars_.find(name);
  if (it == scalars_.end()) throw ValidationError("missing scalar channel '" + name + "'");
  return it->second;
}

double Streamline::length() const {
  double len = 0.0;
  for (std::size_t i = 1; i < points_.size(); ++i) len += (points_[i] - points_[i - 1]).norm();
  return len;
}

ResampledFiber ResampledFiber::reversed() const {
  return {std::vector<Vec3>(points.rbegin(), points.rend())};
}

void SubjectMeta::validate() const {
  if (!(age_at_scan > 0.0)) throw ValidationError("age_at_scan must be > 0");
  if (birth_age && !(*birth_age > 0.0)) throw ValidationError("birth_age must be > 0");
}

const char* to_string(Sex s) {
  switch (s) {
    case Sex::female: return "female";
    case Sex::male: return "male";
    default: return "unknown";
  }
}

const char* to_string(Group g) { return g == Group::neonate ? "neonate" : "adult"; }

Sex parse_sex(const std::string& s) {
  if (s == "female") return Sex::female;
  if (s == "male") return Sex::male;
  if (s == "unknown") return Sex::unknown;
  throw ValidationError("unknown sex '" + s + "'");
}

Group parse_group(const std::string& s) {
  if (s == "neonate") return Group::neonate;
  if (s == "adult") return Group::adult;
  throw ValidationError("unknown group '" + s + "'");
}

void Tractogram::validate() const {
  if (subject_id.empty()) throw ValidationError("tractogram subject_id is empty");
  if (streamlines.empty())
    throw ValidationError("tractogram '" + subject_id + "' has no streamlines");
  meta.validate();
}

Vec3 Tractogram::centroid() const {
  Vec3 sum = Vec3::Zero();
  std::size_t n = 0;
  for (const auto& s : streamlines) {
    for (const auto& p : s.points()) sum += p;
    n += s.size();
  }
  return n ? Vec3(sum / static_cast<double>(n)) : Vec3::Zero();
}

namespace {

// Walks `count - 1` steps of Euclidean length `h` along the polyline, each
// step landing on the first curve point at distance h from the previous one.
// Returns the arclength of the last point minus the curve length (<= 0), or
// +1 when the curve ends first.
double walk(std::span<const Vec3> pts, std::span<const double> cum, double h, std::size_t count,
            std::vector<Vec3>* out) {
  if (out) {
    out->clear();
    out->push_back(pts.front());
  }
  Vec3 c = pts.front();
  double s = 0.0;
  std::size_t seg = 0;
  const double h2 = h * h;
  for (std::size_t step = 1; step < count; ++step) {
    bool found = false;
    for (; seg + 1 < pts.size(); ++seg) {
      const Vec3 e = pts[seg + 1] - pts[seg];
      const Vec3 d = pts[seg] - c;
      const double ee = e.squaredNorm();
      if (ee == 0.0) continue;
      const double de = d.dot(e);
      const double disc = de * de - ee * (d.squaredNorm() - h2);
      if (disc < 0.0) continue;
      const double t = (-de + std::sqrt(disc)) / ee;
      if (t <= 1.0 && t >= 0.0) {
        c = pts[seg] + t * e;
        s = cum[seg] + t * (cum[seg + 1] - cum[seg]);
        found = true;
        break;
      }
    }
    if (!found) return 1.0;
    if (out) out->push_back(c);
  }
  return s - cum.back();
}

}  // namespace

ResampledFiber resample(std::span<const Vec3> pts, std::size_t count) {
  if (pts.size() < 2) throw ValidationError("streamline needs at least 2 points");
  if (count < 2) throw ValidationError("resample count must be >= 2");
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  const double length = cum.back();
  if (!(length > 0.0)) throw ValidationError("zero-length streamline");

  ResampledFiber out;
  if (count == 2) {
    out.points = {pts.front(), pts.back()};
    return out;
  }
  const double tol = 1e-10 * length;
  auto residual = [&](double h) { return walk(pts, cum, h, count, nullptr); };

  // Chord spacing can never exceed arclength spacing. The walk's end point is
  // not monotone in h on curves that double back, so the sign changes of the
  // residual are bracketed on a grid, largest h first, and each is bisected
  // until one lands on the curve end.
  const double hmax = length / static_cast<double>(count - 1);
  double best_h = 0.0, best_r = -std::numeric_limits<double>::infinity();
  const double r_top = residual(hmax);
  if (r_top <= 0.0 && r_top > -tol) {
    best_h = hmax;
    best_r = r_top;
  } else {
    constexpr int kGrid = 64;
    double h_hi = hmax, r_hi = r_top;
    for (int k = kGrid - 1; k >= 0 && best_r < -tol; --k) {
      const double h_lo = hmax * static_cast<double>(k) / kGrid;
      const double r_lo = k == 0 ? -length : residual(h_lo);
      if (r_lo <= 0.0 && r_hi > 0.0) {
        double lo = h_lo, hi = h_hi, rl = r_lo;
        for (int it = 0; it < 200; ++it) {
          const double mid = 0.5 * (lo + hi);
          if (mid <= lo || mid >= hi) break;
          const double rm = residual(mid);
          if (rm <= 0.0) {
            lo = mid;
            rl = rm;
          } else {
            hi = mid;
          }
        }
        if (rl > best_r) {
          best_r = rl;
          best_h = lo;
        }
      } else if (r_lo <= 0.0 && r_lo > best_r) {
        best_r = r_lo;
        best_h = h_lo;
      }
      h_hi = h_lo;
      r_hi = r_lo;
    }
  }
  walk(pts, cum, best_h, count, &out.points);
  out.points.back() = pts.back();
  return out;
}

ResampledFiber resample(const Streamline& fiber, std::size_t count) {
  return resample(std::span<const Vec3>(fiber.points()), count);
}

std::vector<ResampledFiber> resample_all(const Tractogram& t, std::size_t count) {
  std::vector<ResampledFiber> out;
  out.reserve(t.size());
  for (const auto& s : t.streamlines) out.push_back(resample(s, count));
  return out;
}

std::vector<std::size_t> subsample_indices(std::size_t total, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValidationError("subsample size must be >= 1");
  if (n > total)
    throw ValidationError("subsample size " + std::to_string(n) + " exceeds streamline count " +
                          std::to_string(total));
  Rng rng(seed);
  auto idx = rng.sample_without_replacement(total, n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tractogram subsample(const Tractogram& t, std::size_t n, std::uint64_t seed) {
  Tractogram out{t.subject_id, {}, t.meta};
  const auto idx = subsample_indices(t.size(), n, seed);
  out.streamlines.reserve(n);
  for (std::size_t i : idx) out.streamlines.push_back(t.streamlines[i]);
  return out;
}

Streamline apply_transform(const Streamline& s, const AffineTransform& t) {
  std::vector<Vec3> pts;
  pts.reserve(s.size());
  for (const auto& p : s.points()) pts.push_back(t.apply(p));
  return Streamline(std::move(pts), s.scalars());
}

Tractogram apply_transform(const Tractogram& tract, const AffineTransform& t) {
  Tractogram out{tract.subject_id, {}, tract.meta};
  out.streamlines.reserve(tract.size());
  for (const auto& s : tract.streamlines) out.streamlines.push_back(apply_transform(s, t));
  return out;
}

ResampledFiber apply_transform(const ResampledFiber& f, const AffineTransform& t) {
  ResampledFiber out;
  out.points.reserve(f.size());
  for (const auto& p : f.points) out.points.push_back(t.apply(p));
  return out;
}

AffineTransform centroid_scaling(const Tractogram& t, double factor) {
  return AffineTransform::scaling(factor, t.centroid());
}

}  // namespace fibermap

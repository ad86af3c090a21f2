#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibermap/geometry.hpp"

namespace fibermap {

inline constexpr std::size_t kDefaultResamplePoints = 15;
inline constexpr const char* kFA = "FA";
inline constexpr const char* kMD = "MD";

using ScalarChannels = std::map<std::string, std::vector<double>>;

// Ordered 3D polyline with optional per-point scalar channels.
class Streamline {
 public:
  // Throws ValidationError when an invariant is violated: fewer than two
  // points, non-finite coordinates, channel length mismatch, FA outside [0,1].
  explicit Streamline(std::vector<Vec3> points, ScalarChannels scalars = {});

  const std::vector<Vec3>& points() const { return points_; }
  const ScalarChannels& scalars() const { return scalars_; }
  std::size_t size() const { return points_.size(); }
  bool has_channel(const std::string& name) const { return scalars_.count(name) != 0; }
  const std::vector<double>& channel(const std::string& name) const;
  double length() const;

 private:
  std::vector<Vec3> points_;
  ScalarChannels scalars_;
};

// Fixed-size fiber used by every distance computation.
struct ResampledFiber {
  std::vector<Vec3> points;

  std::size_t size() const { return points.size(); }
  ResampledFiber reversed() const;
};

enum class Sex { female, male, unknown };
enum class Group { neonate, adult };

struct SubjectMeta {
  double age_at_scan = 1.0;  // weeks PMA for neonates, years for adults
  Sex sex = Sex::unknown;
  Group group = Group::adult;
  std::optional<double> birth_age;  // weeks PMA
  std::map<std::string, double> covariates;

  void validate() const;
};

const char* to_string(Sex s);
const char* to_string(Group g);
Sex parse_sex(const std::string& s);
Group parse_group(const std::string& s);

struct Tractogram {
  std::string subject_id;
  std::vector<Streamline> streamlines;
  SubjectMeta meta;

  std::size_t size() const { return streamlines.size(); }
  // Nonempty id, at least one streamline, valid meta.
  void validate() const;
  Vec3 centroid() const;
};

// Equal-spacing resample along the polyline: the returned P points lie on the
// input curve, include both endpoints, and consecutive points are the same
// Euclidean distance apart. A fiber that already has that property maps to
// itself, so resampling is idempotent.
ResampledFiber resample(std::span<const Vec3> points, std::size_t count);
ResampledFiber resample(const Streamline& fiber, std::size_t count);
std::vector<ResampledFiber> resample_all(const Tractogram& t, std::size_t count);

// Indices of a uniform random n-subset, ascending.
std::vector<std::size_t> subsample_indices(std::size_t total, std::size_t n, std::uint64_t seed);
Tractogram subsample(const Tractogram& t, std::size_t n, std::uint64_t seed);

Streamline apply_transform(const Streamline& s, const AffineTransform& t);
Tractogram apply_transform(const Tractogram& tract, const AffineTransform& t);
ResampledFiber apply_transform(const ResampledFiber& f, const AffineTransform& t);

// Uniform enlargement about the tractogram centroid (neonate -> adult size).
AffineTransform centroid_scaling(const Tractogram& t, double factor);

}  // namespace fibermap

#pragma once

#include <Eigen/Dense>
#include <array>
#include <span>

namespace fibermap {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// x -> linear * x + translation, coordinates in millimetres.
class AffineTransform {
 public:
  AffineTransform();  // identity
  // Throws ValidationError when |det(linear)| <= 1e-9 or any entry is non-finite.
  AffineTransform(const Mat3& linear, const Vec3& translation);

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(const Vec3& t);
  // Uniform scaling about `center`.
  static AffineTransform scaling(double factor, const Vec3& center = Vec3::Zero());
  // Rotation by |axis_angle| radians about axis_angle/|axis_angle|, about `center`.
  static AffineTransform rotation(const Vec3& axis_angle, const Vec3& center = Vec3::Zero());
  // Row-major 3x4 [A | b].
  static AffineTransform from_row_major(std::span<const double, 12> m);

  const Mat3& linear() const { return linear_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return linear_ * p + translation_; }
  // (*this) after `first`: x -> this(first(x)).
  AffineTransform compose(const AffineTransform& first) const;
  AffineTransform inverse() const;
  std::array<double, 12> row_major() const;

 private:
  Mat3 linear_;
  Vec3 translation_;
};

Mat3 rotation_matrix(const Vec3& axis_angle);
// Rotation angle (radians) of the orthogonal polar factor of `m`.
double rotation_angle(const Mat3& m);

}  // namespace fibermap

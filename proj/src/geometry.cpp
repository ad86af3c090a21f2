#include "fibermap/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "fibermap/error.hpp"

namespace fibermap {

AffineTransform::AffineTransform() : linear_(Mat3::Identity()), translation_(Vec3::Zero()) {}

AffineTransform::AffineTransform(const Mat3& linear, const Vec3& translation)
    : linear_(linear), translation_(translation) {
  if (!linear_.allFinite() || !translation_.allFinite())
    throw ValidationError("affine transform has non-finite entries");
  if (std::abs(linear_.determinant()) <= 1e-9)
    throw ValidationError("affine transform is singular");
}

AffineTransform AffineTransform::translation(const Vec3& t) { return {Mat3::Identity(), t}; }

AffineTransform AffineTransform::scaling(double factor, const Vec3& center) {
  const Mat3 a = factor * Mat3::Identity();
  return {a, center - a * center};
}

AffineTransform AffineTransform::rotation(const Vec3& axis_angle, const Vec3& center) {
  const Mat3 r = rotation_matrix(axis_angle);
  return {r, center - r * center};
}

AffineTransform AffineTransform::from_row_major(std::span<const double, 12> m) {
  Mat3 a;
  Vec3 b;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a(r, c) = m[r * 4 + c];
    b(r) = m[r * 4 + 3];
  }
  return {a, b};
}

AffineTransform AffineTransform::compose(const AffineTransform& first) const {
  return {linear_ * first.linear_, linear_ * first.translation_ + translation_};
}

AffineTransform AffineTransform::inverse() const {
  const Mat3 inv = linear_.inverse();
  return {inv, -(inv * translation_)};
}

std::array<double, 12> AffineTransform::row_major() const {
  std::array<double, 12> m{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r * 4 + c] = linear_(r, c);
    m[r * 4 + 3] = translation_(r);
  }
  return m;
}

Mat3 rotation_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

double rotation_angle(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace fibermap

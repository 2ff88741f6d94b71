#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <random>

namespace rino {

/// Uniform sample from SO(3): a normalized 4D Gaussian is a uniform unit
/// quaternion.
template <typename Rng>
Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Rotation about the vertical (y) axis by a uniform angle.
template <typename Rng>
Eigen::Matrix3d random_y_rotation(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * 3.14159265358979323846);
  return Eigen::AngleAxisd(u(rng), Eigen::Vector3d::UnitY()).toRotationMatrix();
}

/// Geodesic distance on SO(3) in radians. atan2 of the sine and cosine
/// parts stays accurate near 0 and pi, where acos of the trace does not.
inline double rotation_angle_between(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const Eigen::Matrix3d r = a.transpose() * b;
  const double c = (r.trace() - 1.0) / 2.0;
  const double s = 0.5 * Eigen::Vector3d(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return std::atan2(s, c);
}

}  // namespace rino

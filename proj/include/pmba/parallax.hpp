#pragma once

// Parallax-angle feature parameterization and the ray-direction error.
//
// A feature is (theta, n, m, a): n is the unit ray towards the feature in the
// main anchor's frame and theta the angle at the feature between the rays from
// the main (m) and associate (a) anchors. With b = p_m - p_a and w = R_m n,
//
//   N_i = sin(alpha - theta) |b| w + sin(theta) (p_m - p_i)
//       = (cos(theta) |b x w| - sin(theta) b.w) w + sin(theta) (p_m - p_i)
//
// is sin(theta) times the world ray from camera i to the feature, and the
// residual of observation i is normalize(N_i) - R_i * measured_ray.

#include "pmba/manifold.hpp"
#include "pmba/types.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pmba {

inline constexpr double kMinSinTheta = 1e-12;
inline constexpr double kMinRayNorm = 1e-14;
inline constexpr double kThetaMargin = 1e-10;

/// Angle between (p_m - p_a) and the world-frame feature ray w = R_m n.
template <typename Scalar>
Scalar anchor_angle(const Pose<Scalar>& main, const Pose<Scalar>& assoc, const Vector3<Scalar>& ray) {
  const Vector3<Scalar> b = main.position - assoc.position;
  return angle_between(b, (main.rotation * ray).eval());
}

/// Depth of the feature along w, from the sine rule in the anchor triangle.
template <typename Scalar>
Scalar feature_depth(Scalar theta, const Vector3<Scalar>& ray, const Pose<Scalar>& main,
                     const Pose<Scalar>& assoc) {
  using std::sin;
  const Scalar sin_theta = sin(theta);
  if (sin_theta <= Scalar(kMinSinTheta)) throw NumericalError("feature_depth: degenerate parallax angle");
  const Scalar baseline = (main.position - assoc.position).norm();
  if (baseline == Scalar(0)) throw NumericalError("feature_depth: coincident anchors");
  const Scalar alpha = anchor_angle(main, assoc, ray);
  return sin(alpha - theta) / sin_theta * baseline;
}

inline double feature_depth(const ParallaxFeature& f, const CameraPose& main, const CameraPose& assoc) {
  return feature_depth(f.theta, Eigen::Vector3d(f.ray), main, assoc);
}

inline Eigen::Vector3d feature_to_point(const ParallaxFeature& f, const CameraPose& main,
                                        const CameraPose& assoc) {
  return feature_depth(f, main, assoc) * (main.rotation * f.ray) + main.position;
}

/// Inverse of feature_to_point for fixed anchors.
inline ParallaxFeature point_to_feature(const Eigen::Vector3d& point, const CameraPose& main,
                                        const CameraPose& assoc, int main_id, int assoc_id) {
  const Eigen::Vector3d to_main = point - main.position;
  const Eigen::Vector3d to_assoc = point - assoc.position;
  if (to_main.norm() <= kMinRayNorm || to_assoc.norm() <= kMinRayNorm)
    throw NumericalError("point_to_feature: point coincides with an anchor centre");
  ParallaxFeature f;
  f.ray = main.rotation.transpose() * to_main.normalized();
  f.theta = angle_between(to_main, to_assoc);
  f.main_anchor = main_id;
  f.assoc_anchor = assoc_id;
  return f;
}

/// sin(theta) * (feature - p_i), evaluated without any division.
template <typename Scalar>
Vector3<Scalar> scaled_ray(Scalar theta, const Vector3<Scalar>& ray, const Pose<Scalar>& main,
                           const Pose<Scalar>& assoc, const Vector3<Scalar>& observer_position) {
  using std::cos;
  using std::sin;
  const Vector3<Scalar> w = main.rotation * ray;
  const Vector3<Scalar> b = main.position - assoc.position;
  const Scalar k = cos(theta) * b.cross(w).norm() - sin(theta) * b.dot(w);
  return k * w + sin(theta) * (main.position - observer_position);
}

inline Eigen::Vector3d scaled_ray(const ParallaxFeature& f, const CameraPose& main, const CameraPose& assoc,
                                  const Eigen::Vector3d& observer_position) {
  return scaled_ray(f.theta, Eigen::Vector3d(f.ray), main, assoc, observer_position);
}

/// normalize(N_i) - R_i * measured_ray, in the world frame. Bounded by 2.
template <typename Scalar>
Vector3<Scalar> ray_error(Scalar theta, const Vector3<Scalar>& ray, const Pose<Scalar>& main,
                          const Pose<Scalar>& assoc, const Pose<Scalar>& observer,
                          const Vector3<Scalar>& measured_ray) {
  const Vector3<Scalar> n = scaled_ray(theta, ray, main, assoc, observer.position);
  const Scalar norm = n.norm();
  if (norm <= Scalar(kMinRayNorm)) throw NumericalError("ray_error: observer coincides with the feature");
  return n / norm - observer.rotation * measured_ray;
}

inline Eigen::Vector3d ray_error(const ParallaxFeature& f, const CameraPose& main, const CameraPose& assoc,
                                 const CameraPose& observer, const Eigen::Vector3d& measured_ray) {
  return ray_error(f.theta, Eigen::Vector3d(f.ray), main, assoc, observer, measured_ray);
}

/// Increment dF = (d_theta, d_ray). Theta is clamped to (0, pi) by a small
/// margin; `clamped` reports when that happened.
inline ParallaxFeature retract_feature(const ParallaxFeature& f, const Eigen::Vector3d& df,
                                       bool* clamped = nullptr) {
  ParallaxFeature out = f;
  const double raw = f.theta + df(0);
  out.theta = std::clamp(raw, kThetaMargin, std::numbers::pi - kThetaMargin);
  if (clamped != nullptr) *clamped = out.theta != raw;
  out.ray = retract_ray(f.ray, df.tail<2>());
  return out;
}

/// Role-wise Jacobians of ray_error with respect to the feature and the three
/// poses, under retract_feature / retract_pose. When pose roles coincide the
/// caller adds the blocks.
template <typename Scalar>
struct RayErrorJacobians {
  Eigen::Matrix<Scalar, 3, 3> feature;
  Eigen::Matrix<Scalar, 3, 6> main;
  Eigen::Matrix<Scalar, 3, 6> assoc;
  Eigen::Matrix<Scalar, 3, 6> observer;
};

template <typename Scalar>
RayErrorJacobians<Scalar> ray_error_jacobians(Scalar theta, const Vector3<Scalar>& ray,
                                              const Pose<Scalar>& main, const Pose<Scalar>& assoc,
                                              const Pose<Scalar>& observer,
                                              const Vector3<Scalar>& measured_ray) {
  using std::cos;
  using std::sin;
  using Mat3 = Matrix3<Scalar>;
  const Scalar c = cos(theta);
  const Scalar sn = sin(theta);
  const Vector3<Scalar> w = main.rotation * ray;
  const Vector3<Scalar> b = main.position - assoc.position;
  const Vector3<Scalar> bxw = b.cross(w);
  const Scalar s = bxw.norm();
  const Scalar bw = b.dot(w);
  const Scalar k = c * s - sn * bw;
  const Vector3<Scalar> offset = main.position - observer.position;
  const Vector3<Scalar> n = k * w + sn * offset;
  const Scalar norm = n.norm();
  if (norm <= Scalar(kMinRayNorm)) throw NumericalError("ray_error_jacobians: observer coincides with the feature");
  const Vector3<Scalar> nh = n / norm;
  const Mat3 proj = (Mat3::Identity() - nh * nh.transpose()) / norm;

  // |b x w| is not differentiable at b || w; its subgradient 0 is used there.
  Eigen::Matrix<Scalar, 1, 3> ds_dw = Eigen::Matrix<Scalar, 1, 3>::Zero();
  Eigen::Matrix<Scalar, 1, 3> ds_db = Eigen::Matrix<Scalar, 1, 3>::Zero();
  if (s > Scalar(0)) {
    ds_dw = bxw.transpose() * skew(b) / s;
    ds_db = -bxw.transpose() * skew(w) / s;
  }
  const Vector3<Scalar> dn_dtheta = (-sn * s - c * bw) * w + c * offset;
  const Mat3 dn_dw = c * w * ds_dw - sn * w * b.transpose() + k * Mat3::Identity();
  const Mat3 dn_db = c * w * ds_db - sn * w * w.transpose();
  const Mat3 dw_drot = -main.rotation * skew(ray);

  RayErrorJacobians<Scalar> j;
  j.feature.col(0) = proj * dn_dtheta;
  j.feature.template rightCols<2>() = proj * dn_dw * dw_drot * tangent_basis(ray);

  j.main.template leftCols<3>() = proj * dn_dw * dw_drot;
  j.main.template rightCols<3>() = proj * (dn_db + sn * Mat3::Identity());
  j.assoc.template leftCols<3>().setZero();
  j.assoc.template rightCols<3>() = -proj * dn_db;
  j.observer.template leftCols<3>() = observer.rotation * skew(measured_ray);
  j.observer.template rightCols<3>() = -sn * proj;
  return j;
}

inline RayErrorJacobians<double> ray_error_jacobians(const ParallaxFeature& f, const CameraPose& main,
                                                     const CameraPose& assoc, const CameraPose& observer,
                                                     const Eigen::Vector3d& measured_ray) {
  return ray_error_jacobians(f.theta, Eigen::Vector3d(f.ray), main, assoc, observer, measured_ray);
}

}  // namespace pmba

#pragma once

// Pixel reprojection error and the Euclidean / inverse-depth baselines.

#include "pmba/manifold.hpp"
#include "pmba/types.hpp"

#include <cmath>

namespace pmba {

/// K o distort o pi applied to a camera-frame point.
template <typename Scalar>
Vector2<Scalar> project_point(const CameraIntrinsics& k, const Vector3<Scalar>& local) {
  if (local.z() == Scalar(0)) throw NumericalError("projection of a point on the camera plane");
  const Vector2<Scalar> q = local.template head<2>() / local.z();
  const Scalar r2 = q.squaredNorm();
  const Scalar radial = Scalar(1) + Scalar(k.k1) * r2 + Scalar(k.k2) * r2 * r2;
  return {Scalar(k.fx) * radial * q.x() + Scalar(k.cx), Scalar(k.fy) * radial * q.y() + Scalar(k.cy)};
}

/// 2x3 derivative of project_point with respect to the camera-frame point.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 3> project_point_jacobian(const CameraIntrinsics& k, const Vector3<Scalar>& local) {
  const Scalar iz = Scalar(1) / local.z();
  const Vector2<Scalar> q = local.template head<2>() * iz;
  Eigen::Matrix<Scalar, 2, 3> dq;
  dq << iz, Scalar(0), -q.x() * iz,
        Scalar(0), iz, -q.y() * iz;
  const Scalar r2 = q.squaredNorm();
  const Scalar radial = Scalar(1) + Scalar(k.k1) * r2 + Scalar(k.k2) * r2 * r2;
  const Scalar dradial_dr2 = Scalar(k.k1) + Scalar(2) * Scalar(k.k2) * r2;
  Eigen::Matrix<Scalar, 2, 2> dd = radial * Eigen::Matrix<Scalar, 2, 2>::Identity() +
                                   Scalar(2) * dradial_dr2 * q * q.transpose();
  dd.row(0) *= Scalar(k.fx);
  dd.row(1) *= Scalar(k.fy);
  return dd * dq;
}

/// K o pi(R^T (f - p)) - u. A point behind the camera still yields a finite
/// residual (the well-known sign pathology of pixel errors); `behind` flags it.
template <typename Scalar>
Vector2<Scalar> reprojection_error(const Vector3<Scalar>& point, const Pose<Scalar>& pose,
                                   const Vector2<Scalar>& pixel, const CameraIntrinsics& k,
                                   bool* behind = nullptr) {
  const Vector3<Scalar> local = pose.rotation.transpose() * (point - pose.position);
  if (behind != nullptr) *behind = local.z() < Scalar(0);
  return project_point(k, local) - pixel;
}

struct ReprojectionJacobians {
  Eigen::Matrix<double, 2, 6> pose;
  Eigen::Matrix<double, 2, 3> point;
};

inline ReprojectionJacobians reprojection_jacobians(const Eigen::Vector3d& point, const CameraPose& pose,
                                                    const CameraIntrinsics& k) {
  const Eigen::Vector3d local = pose.rotation.transpose() * (point - pose.position);
  const Eigen::Matrix<double, 2, 3> dproj = project_point_jacobian(k, local);
  ReprojectionJacobians j;
  j.pose.leftCols<3>() = dproj * skew(local);
  j.pose.rightCols<3>() = -dproj * pose.rotation.transpose();
  j.point = dproj * pose.rotation.transpose();
  return j;
}

/// World point encoded by an inverse-depth feature.
template <typename Scalar>
Vector3<Scalar> inverse_depth_point(const Pose<Scalar>& anchor, const Vector3<Scalar>& ray, Scalar rho) {
  return anchor.position + anchor.rotation * ray / rho;
}

inline Eigen::Vector3d inverse_depth_point(const InverseDepthFeature& f, const CameraPose& anchor) {
  return inverse_depth_point(anchor, Eigen::Vector3d(f.ray), f.rho);
}

/// Pixel residual of an inverse-depth feature seen from `observer`. The point
/// is formed relative to the anchor so that rho -> 0 stays finite.
template <typename Scalar>
Vector2<Scalar> inverse_depth_error(const Pose<Scalar>& anchor, const Vector3<Scalar>& ray, Scalar rho,
                                    const Pose<Scalar>& observer, const Vector2<Scalar>& pixel,
                                    const CameraIntrinsics& k) {
  // rho * R_i^T (f - p_i), a positive multiple of the local point.
  const Vector3<Scalar> local = observer.rotation.transpose() *
                                (rho * (anchor.position - observer.position) + anchor.rotation * ray);
  return project_point(k, local) - pixel;
}

struct InverseDepthJacobians {
  Eigen::Matrix<double, 2, 6> anchor;
  Eigen::Matrix<double, 2, 6> observer;
  Eigen::Matrix<double, 2, 1> rho;
};

inline InverseDepthJacobians inverse_depth_jacobians(const InverseDepthFeature& f, const CameraPose& anchor,
                                                     const CameraPose& observer, const CameraIntrinsics& k) {
  const Eigen::Matrix3d rt = observer.rotation.transpose();
  const Eigen::Vector3d baseline = anchor.position - observer.position;
  const Eigen::Vector3d local = rt * (f.rho * baseline + anchor.rotation * f.ray);
  const Eigen::Matrix<double, 2, 3> dproj = project_point_jacobian(k, local);
  InverseDepthJacobians j;
  j.anchor.leftCols<3>() = -dproj * rt * anchor.rotation * skew(f.ray);
  j.anchor.rightCols<3>() = f.rho * dproj * rt;
  j.observer.leftCols<3>() = dproj * skew(local);
  j.observer.rightCols<3>() = -f.rho * dproj * rt;
  j.rho = dproj * rt * baseline;
  return j;
}

}  // namespace pmba

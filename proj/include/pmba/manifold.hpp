#pragma once

// Rotation-group and unit-ray primitives. Everything here is templated on the
// scalar so that finite-difference oracles can run in extended precision.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>

namespace pmba {

template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vector6 = Eigen::Matrix<Scalar, 6, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Matrix32 = Eigen::Matrix<Scalar, 3, 2>;

// Exp-map angles below this use the second-order series.
inline constexpr double kSmallAngle = 1e-8;

/// Camera pose T = (R, p): R maps camera-local directions to the world frame,
/// p is the camera centre in world coordinates.
template <typename Scalar>
struct Pose {
  Matrix3<Scalar> rotation = Matrix3<Scalar>::Identity();
  Vector3<Scalar> position = Vector3<Scalar>::Zero();

  template <typename Other>
  Pose<Other> cast() const {
    return {rotation.template cast<Other>(), position.template cast<Other>()};
  }
};

using CameraPose = Pose<double>;

/// Cross-product matrix: skew(x) * y == x.cross(y).
template <typename Derived>
Matrix3<typename Derived::Scalar> skew(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Matrix3<Scalar> s;
  s << Scalar(0), -x(2), x(1),
       x(2), Scalar(0), -x(0),
       -x(1), x(0), Scalar(0);
  return s;
}

/// Rodrigues formula.
template <typename Derived>
Matrix3<typename Derived::Scalar> exp_so3(const Eigen::MatrixBase<Derived>& w) {
  using Scalar = typename Derived::Scalar;
  using std::cos;
  using std::sin;
  using std::sqrt;
  const Scalar angle2 = w.squaredNorm();
  const Scalar angle = sqrt(angle2);
  const Matrix3<Scalar> k = skew(w);
  Scalar a;
  Scalar b;
  if (angle < Scalar(kSmallAngle)) {
    a = Scalar(1) - angle2 / Scalar(6);
    b = Scalar(0.5) - angle2 / Scalar(24);
  } else {
    a = sin(angle) / angle;
    b = (Scalar(1) - cos(angle)) / angle2;
  }
  return Matrix3<Scalar>::Identity() + a * k + b * k * k;
}

/// Rotation vector of R with norm in [0, pi]. When the angle is close to pi
/// the axis is read off the symmetric part of R; `pi_branch` reports that.
template <typename Derived>
Vector3<typename Derived::Scalar> log_so3(const Eigen::MatrixBase<Derived>& r,
                                          bool* pi_branch = nullptr) {
  using Scalar = typename Derived::Scalar;
  using std::atan2;
  using std::sqrt;
  const Vector3<Scalar> vee(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const Scalar sin2 = vee.norm();  // 2 sin(angle)
  Scalar cos_angle = (r.trace() - Scalar(1)) / Scalar(2);
  cos_angle = std::min(Scalar(1), std::max(Scalar(-1), cos_angle));
  const Scalar angle = atan2(sin2 / Scalar(2), cos_angle);
  if (pi_branch != nullptr) *pi_branch = false;

  if (cos_angle > Scalar(-0.99)) {
    if (angle < Scalar(kSmallAngle)) return Scalar(0.5) * (Scalar(1) + angle * angle / Scalar(6)) * vee;
    return angle / (Scalar(2) * std::sin(angle)) * vee;
  }

  // (R + R^T)/2 = cos(a) I + (1 - cos(a)) u u^T
  if (pi_branch != nullptr) *pi_branch = true;
  const Matrix3<Scalar> sym = (r + r.transpose()) / Scalar(2);
  Matrix3<Scalar> uut = (sym - cos_angle * Matrix3<Scalar>::Identity()) / (Scalar(1) - cos_angle);
  Eigen::Index k = 0;
  uut.diagonal().maxCoeff(&k);
  Vector3<Scalar> axis = uut.col(k) / sqrt(uut(k, k));
  axis.normalize();
  if (axis.dot(vee) < Scalar(0)) axis = -axis;
  return angle * axis;
}

/// Orthonormal 3x2 basis A of the plane normal to the unit ray n, with
/// [A n] a proper rotation. The seed axis is the canonical axis least aligned
/// with n (lowest index on ties), which makes the result deterministic.
template <typename Derived>
Matrix32<typename Derived::Scalar> tangent_basis(const Eigen::MatrixBase<Derived>& n) {
  using Scalar = typename Derived::Scalar;
  Eigen::Index seed = 0;
  n.cwiseAbs().minCoeff(&seed);
  const Vector3<Scalar> e = Vector3<Scalar>::Unit(seed);
  const Vector3<Scalar> a1 = n.cross(e).normalized();
  const Vector3<Scalar> a2 = n.cross(a1);
  Matrix32<Scalar> basis;
  basis.col(0) = a1;
  basis.col(1) = a2;
  return basis;
}

/// n <- Exp(A_n dn) n
template <typename DerivedN, typename DerivedD>
Vector3<typename DerivedN::Scalar> retract_ray(const Eigen::MatrixBase<DerivedN>& n,
                                               const Eigen::MatrixBase<DerivedD>& dn) {
  using Scalar = typename DerivedN::Scalar;
  const Vector3<Scalar> axis = tangent_basis(n) * dn;
  return (exp_so3(axis) * n).normalized();
}

/// Right-multiplicative rotation increment, additive position increment.
/// d = (d_rotation, d_position).
template <typename Scalar, typename Derived>
Pose<Scalar> retract_pose(const Pose<Scalar>& pose, const Eigen::MatrixBase<Derived>& d) {
  Pose<Scalar> out;
  out.rotation = pose.rotation * exp_so3(d.template head<3>());
  out.position = pose.position + d.template tail<3>();
  return out;
}

/// Nearest rotation in Frobenius norm (SVD with determinant correction).
template <typename Derived>
Matrix3<typename Derived::Scalar> project_to_so3(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Eigen::JacobiSVD<Matrix3<Scalar>> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3<Scalar> d = Matrix3<Scalar>::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < Scalar(0)) d(2, 2) = Scalar(-1);
  return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Angle between two (not necessarily unit) vectors, stable near 0 and pi.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar angle_between(const Eigen::MatrixBase<DerivedA>& a,
                                        const Eigen::MatrixBase<DerivedB>& b) {
  using std::atan2;
  return atan2(a.cross(b).norm(), a.dot(b));
}

/// Geodesic distance between two rotations, radians.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar rotation_distance(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  return log_so3((a.transpose() * b).eval()).norm();
}

}  // namespace pmba

#include "pmba/types.hpp"

#include "pmba/reprojection.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pmba {

Eigen::Vector3d pixel_to_ray(const CameraIntrinsics& k, const Eigen::Vector2d& pixel) {
  const Eigen::Vector2d distorted((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy);
  Eigen::Vector2d q = distorted;
  if (k.has_distortion()) {
    // Newton on q * (1 + k1 |q|^2 + k2 |q|^4) = distorted.
    for (int it = 0; it < 50; ++it) {
      const double r2 = q.squaredNorm();
      const double radial = 1.0 + k.k1 * r2 + k.k2 * r2 * r2;
      const Eigen::Vector2d f = radial * q - distorted;
      if (f.norm() < 1e-15) break;
      const Eigen::Matrix2d jac =
          radial * Eigen::Matrix2d::Identity() + 2.0 * (k.k1 + 2.0 * k.k2 * r2) * q * q.transpose();
      q -= jac.lu().solve(f);
    }
  }
  return Eigen::Vector3d(q.x(), q.y(), 1.0).normalized();
}

Eigen::Vector2d project(const CameraIntrinsics& k, const Eigen::Vector3d& local) {
  return project_point(k, local);
}

std::string to_string(Parameterization p) {
  switch (p) {
    case Parameterization::parallax: return "pmba";
    case Parameterization::euclidean: return "xyz";
    case Parameterization::inverse_depth: return "idp";
  }
  return "unknown";
}

Parameterization parse_parameterization(const std::string& name) {
  if (name == "pmba" || name == "parallax") return Parameterization::parallax;
  if (name == "xyz" || name == "euclidean") return Parameterization::euclidean;
  if (name == "idp" || name == "inverse_depth") return Parameterization::inverse_depth;
  throw DataError("unknown parameterization '" + name + "'");
}

std::size_t BaProblem::num_features() const {
  return std::visit([](const auto& v) { return v.size(); }, features);
}

void validate(const BaProblem& problem) {
  const int num_poses = static_cast<int>(problem.poses.size());
  const int num_features = static_cast<int>(problem.num_features());
  if (problem.intrinsics.empty() ||
      (problem.intrinsics.size() != 1 && problem.intrinsics.size() != problem.poses.size()))
    throw DataError("intrinsics must be shared (one entry) or given per pose");
  for (const auto& k : problem.intrinsics)
    if (!(k.fx > 0.0) || !(k.fy > 0.0)) throw DataError("focal lengths must be positive");

  std::vector<std::vector<int>> observers(static_cast<std::size_t>(num_features));
  for (std::size_t o = 0; o < problem.observations.size(); ++o) {
    const auto& obs = problem.observations[o];
    if (obs.pose_id < 0 || obs.pose_id >= num_poses || obs.feature_id < 0 || obs.feature_id >= num_features) {
      std::ostringstream msg;
      msg << "observation " << o << " references pose " << obs.pose_id << " / feature " << obs.feature_id
          << " outside the problem";
      throw DataError(msg.str());
    }
    observers[static_cast<std::size_t>(obs.feature_id)].push_back(obs.pose_id);
  }

  if (const auto* features = std::get_if<std::vector<ParallaxFeature>>(&problem.features)) {
    for (std::size_t j = 0; j < features->size(); ++j) {
      const auto& f = (*features)[j];
      const auto& seen = observers[j];
      const auto observes = [&](int pose) { return std::find(seen.begin(), seen.end(), pose) != seen.end(); };
      if (f.main_anchor == f.assoc_anchor || !observes(f.main_anchor) || !observes(f.assoc_anchor)) {
        std::ostringstream msg;
        msg << "feature " << j << ": anchors (" << f.main_anchor << ", " << f.assoc_anchor
            << ") must be two distinct observing poses";
        throw DataError(msg.str());
      }
    }
  } else if (const auto* features = std::get_if<std::vector<InverseDepthFeature>>(&problem.features)) {
    for (std::size_t j = 0; j < features->size(); ++j)
      if ((*features)[j].anchor < 0 || (*features)[j].anchor >= num_poses)
        throw DataError("inverse-depth feature " + std::to_string(j) + " has an invalid anchor");
  }
  if (num_poses > 0 && (problem.gauge.fixed_pose < 0 || problem.gauge.fixed_pose >= num_poses))
    throw DataError("gauge pose out of range");
}

Gauge resolve_gauge(const BaProblem& problem) {
  Gauge g = problem.gauge;
  const int n = static_cast<int>(problem.poses.size());
  if (g.scale_pose < 0 || g.scale_pose >= n || g.scale_pose == g.fixed_pose) {
    g.scale_pose = -1;
    return g;
  }
  if (g.scale_axis < 0) {
    const Eigen::Vector3d baseline = problem.poses[static_cast<std::size_t>(g.scale_pose)].position -
                                     problem.poses[static_cast<std::size_t>(g.fixed_pose)].position;
    Eigen::Index axis = 0;
    baseline.cwiseAbs().maxCoeff(&axis);
    g.scale_axis = static_cast<int>(axis);
  }
  return g;
}

}  // namespace pmba

#include "pmba/parallax.hpp"
#include "pmba/reprojection.hpp"
#include "pmba/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace pmba {

namespace {

std::vector<std::vector<int>> observers_by_feature(const BaProblem& problem) {
  std::vector<std::vector<int>> observers(problem.num_features());
  for (const auto& obs : problem.observations) observers[static_cast<std::size_t>(obs.feature_id)].push_back(obs.pose_id);
  for (auto& list : observers) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return observers;
}

const CameraPose& pose_at(const BaProblem& problem, int id) { return problem.poses[static_cast<std::size_t>(id)]; }

}  // namespace

double robust_cost(double s, double delta) {
  if (delta <= 0.0) return s;
  const double d2 = delta * delta;
  return 2.0 * d2 * (std::sqrt(1.0 + s / d2) - 1.0);
}

double robust_sqrt_weight(double s, double delta) {
  if (delta <= 0.0) return 1.0;
  return std::pow(1.0 + s / (delta * delta), -0.25);
}

BundleModel::BundleModel(BaProblem problem) : problem_(std::move(problem)) {
  validate(problem_);
  gauge_ = resolve_gauge(problem_);
}

int BundleModel::feature_dim() const {
  return problem_.parameterization() == Parameterization::inverse_depth ? 1 : 3;
}

bool BundleModel::is_fixed(int pose, int coordinate) const {
  if (pose == gauge_.fixed_pose) return true;
  return pose == gauge_.scale_pose && coordinate == 3 + gauge_.scale_axis;
}

ResidualVector BundleModel::residual(const Observation& obs) const {
  const CameraPose& observer = pose_at(problem_, obs.pose_id);
  const auto j = static_cast<std::size_t>(obs.feature_id);
  switch (problem_.parameterization()) {
    case Parameterization::parallax: {
      const auto& f = std::get<std::vector<ParallaxFeature>>(problem_.features)[j];
      return ray_error(f, pose_at(problem_, f.main_anchor), pose_at(problem_, f.assoc_anchor), observer,
                       obs.measured_ray);
    }
    case Parameterization::euclidean: {
      const auto& f = std::get<std::vector<EuclideanFeature>>(problem_.features)[j];
      return reprojection_error(Eigen::Vector3d(f.point), observer, Eigen::Vector2d(obs.pixel),
                                problem_.intrinsics_for(obs.pose_id));
    }
    case Parameterization::inverse_depth: {
      const auto& f = std::get<std::vector<InverseDepthFeature>>(problem_.features)[j];
      return inverse_depth_error(pose_at(problem_, f.anchor), Eigen::Vector3d(f.ray), f.rho, observer,
                                 Eigen::Vector2d(obs.pixel), problem_.intrinsics_for(obs.pose_id));
    }
  }
  return {};
}

LinearizedTerm BundleModel::linearize_one(const Observation& obs) const {
  LinearizedTerm term;
  term.feature = obs.feature_id;
  const CameraPose& observer = pose_at(problem_, obs.pose_id);
  const auto j = static_cast<std::size_t>(obs.feature_id);
  const ResidualVector r = residual(obs);
  const double scale =
      std::sqrt(std::max(obs.weight, 0.0)) * robust_sqrt_weight(r.squaredNorm(), problem_.huber_scale);
  term.residual = scale * r;

  switch (problem_.parameterization()) {
    case Parameterization::parallax: {
      const auto& f = std::get<std::vector<ParallaxFeature>>(problem_.features)[j];
      const auto jac = ray_error_jacobians(f, pose_at(problem_, f.main_anchor), pose_at(problem_, f.assoc_anchor),
                                           observer, obs.measured_ray);
      term.feature_jacobian = scale * jac.feature;
      term.add_pose(f.main_anchor, scale * jac.main);
      term.add_pose(f.assoc_anchor, scale * jac.assoc);
      term.add_pose(obs.pose_id, scale * jac.observer);
      break;
    }
    case Parameterization::euclidean: {
      const auto& f = std::get<std::vector<EuclideanFeature>>(problem_.features)[j];
      const auto jac = reprojection_jacobians(f.point, observer, problem_.intrinsics_for(obs.pose_id));
      term.feature_jacobian = scale * jac.point;
      term.add_pose(obs.pose_id, scale * jac.pose);
      break;
    }
    case Parameterization::inverse_depth: {
      const auto& f = std::get<std::vector<InverseDepthFeature>>(problem_.features)[j];
      const auto jac =
          inverse_depth_jacobians(f, pose_at(problem_, f.anchor), observer, problem_.intrinsics_for(obs.pose_id));
      term.feature_jacobian = scale * jac.rho;
      term.add_pose(f.anchor, scale * jac.anchor);
      term.add_pose(obs.pose_id, scale * jac.observer);
      break;
    }
  }
  return term;
}

void BundleModel::linearize(std::vector<LinearizedTerm>& terms) const {
  terms.clear();
  terms.reserve(problem_.observations.size());
  for (const auto& obs : problem_.observations) terms.push_back(linearize_one(obs));
}

double BundleModel::cost() const {
  double total = 0.0;
  try {
    for (const auto& obs : problem_.observations)
      total += obs.weight * robust_cost(residual(obs).squaredNorm(), problem_.huber_scale);
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
  return std::isfinite(total) ? total : std::numeric_limits<double>::infinity();
}

double BundleModel::chi2_ray() const { return pmba::chi2_ray(problem_); }
double BundleModel::chi2_uv() const { return pmba::chi2_uv(problem_); }

std::unique_ptr<LeastSquaresModel> BundleModel::clone() const { return std::make_unique<BundleModel>(*this); }

void BundleModel::retract(const Eigen::VectorXd& pose_step, const Eigen::VectorXd& feature_step) {
  for (int p = 0; p < num_poses(); ++p) {
    Vector6<double> d = pose_step.segment<6>(6 * p);
    for (int c = 0; c < 6; ++c)
      if (is_fixed(p, c)) d(c) = 0.0;
    auto& pose = problem_.poses[static_cast<std::size_t>(p)];
    pose = retract_pose(pose, d);
  }
  std::visit(
      [&](auto& features) {
        using T = typename std::decay_t<decltype(features)>::value_type;
        for (std::size_t j = 0; j < features.size(); ++j) {
          const auto jj = static_cast<Eigen::Index>(j);
          if constexpr (std::is_same_v<T, ParallaxFeature>) {
            bool clamped = false;
            features[j] = retract_feature(features[j], feature_step.segment<3>(3 * jj), &clamped);
            if (clamped) ++clamped_;
          } else if constexpr (std::is_same_v<T, EuclideanFeature>) {
            features[j].point += feature_step.segment<3>(3 * jj);
          } else {
            features[j].rho += feature_step(jj);
          }
        }
      },
      problem_.features);
}

std::vector<Eigen::Vector3d> feature_points(const BaProblem& problem) {
  std::vector<Eigen::Vector3d> points;
  points.reserve(problem.num_features());
  std::visit(
      [&](const auto& features) {
        using T = typename std::decay_t<decltype(features)>::value_type;
        for (const auto& f : features) {
          if constexpr (std::is_same_v<T, ParallaxFeature>) {
            points.push_back(feature_to_point(f, pose_at(problem, f.main_anchor), pose_at(problem, f.assoc_anchor)));
          } else if constexpr (std::is_same_v<T, EuclideanFeature>) {
            points.push_back(f.point);
          } else {
            points.push_back(inverse_depth_point(f, pose_at(problem, f.anchor)));
          }
        }
      },
      problem.features);
  return points;
}

double chi2_ray(const BaProblem& problem) {
  double total = 0.0;
  if (problem.parameterization() == Parameterization::parallax) {
    const auto& features = std::get<std::vector<ParallaxFeature>>(problem.features);
    for (const auto& obs : problem.observations) {
      const auto& f = features[static_cast<std::size_t>(obs.feature_id)];
      total += obs.weight * ray_error(f, pose_at(problem, f.main_anchor), pose_at(problem, f.assoc_anchor),
                                      pose_at(problem, obs.pose_id), obs.measured_ray)
                                .squaredNorm();
    }
    return total;
  }
  const auto points = feature_points(problem);
  for (const auto& obs : problem.observations) {
    const CameraPose& pose = pose_at(problem, obs.pose_id);
    const Eigen::Vector3d d = points[static_cast<std::size_t>(obs.feature_id)] - pose.position;
    if (d.norm() <= kMinRayNorm) return std::numeric_limits<double>::infinity();
    total += obs.weight * (d.normalized() - pose.rotation * obs.measured_ray).squaredNorm();
  }
  return total;
}

double chi2_uv(const BaProblem& problem, int* skipped) {
  int missing = 0;
  double total = 0.0;
  std::vector<Eigen::Vector3d> points;
  std::vector<bool> valid(problem.num_features(), true);
  if (problem.parameterization() == Parameterization::parallax) {
    const auto& features = std::get<std::vector<ParallaxFeature>>(problem.features);
    for (std::size_t j = 0; j < features.size(); ++j) {
      const auto& f = features[j];
      try {
        points.push_back(feature_to_point(f, pose_at(problem, f.main_anchor), pose_at(problem, f.assoc_anchor)));
      } catch (const NumericalError&) {
        points.emplace_back(Eigen::Vector3d::Zero());
        valid[j] = false;
      }
    }
  } else {
    points = feature_points(problem);
  }
  for (const auto& obs : problem.observations) {
    const auto j = static_cast<std::size_t>(obs.feature_id);
    const CameraPose& pose = pose_at(problem, obs.pose_id);
    const Eigen::Vector3d local = pose.rotation.transpose() * (points[j] - pose.position);
    if (!valid[j] || local.z() == 0.0 || !points[j].allFinite()) {
      ++missing;
      continue;
    }
    total += obs.weight * (project(problem.intrinsics_for(obs.pose_id), local) - obs.pixel).squaredNorm();
  }
  if (skipped != nullptr) *skipped = missing;
  return total;
}

std::pair<int, int> select_anchor_pair(const std::vector<CameraPose>& poses, const std::vector<int>& observers,
                                       const Eigen::Vector3d& point) {
  std::vector<int> ids = observers;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw DataError("anchor selection needs at least two observing poses");
  std::pair<int, int> best{ids[0], ids[1]};
  double best_angle = -1.0;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      const double angle = angle_between((point - poses[static_cast<std::size_t>(ids[a])].position).eval(),
                                         (point - poses[static_cast<std::size_t>(ids[b])].position).eval());
      if (angle > best_angle) {
        best_angle = angle;
        best = {ids[a], ids[b]};
      }
    }
  }
  return best;
}

BaProblem convert_parameterization(const BaProblem& problem, Parameterization target) {
  BaProblem out = problem;
  if (problem.parameterization() == target) return out;
  const auto points = feature_points(problem);
  const auto observers = observers_by_feature(problem);

  switch (target) {
    case Parameterization::euclidean: {
      std::vector<EuclideanFeature> features(points.size());
      for (std::size_t j = 0; j < points.size(); ++j) features[j].point = points[j];
      out.features = std::move(features);
      break;
    }
    case Parameterization::parallax: {
      std::vector<ParallaxFeature> features;
      features.reserve(points.size());
      for (std::size_t j = 0; j < points.size(); ++j) {
        const auto [m, a] = select_anchor_pair(problem.poses, observers[j], points[j]);
        features.push_back(point_to_feature(points[j], pose_at(problem, m), pose_at(problem, a), m, a));
      }
      out.features = std::move(features);
      break;
    }
    case Parameterization::inverse_depth: {
      // Anchor at the first observation; its measured ray is kept fixed.
      std::vector<const Observation*> first(points.size(), nullptr);
      for (const auto& obs : problem.observations)
        if (first[static_cast<std::size_t>(obs.feature_id)] == nullptr) first[static_cast<std::size_t>(obs.feature_id)] = &obs;
      std::vector<InverseDepthFeature> features(points.size());
      for (std::size_t j = 0; j < points.size(); ++j) {
        if (first[j] == nullptr) throw DataError("feature " + std::to_string(j) + " has no observations");
        const int anchor = first[j]->pose_id;
        const CameraPose& pose = pose_at(problem, anchor);
        const Eigen::Vector3d d = points[j] - pose.position;
        double depth = d.dot(pose.rotation * first[j]->measured_ray);
        if (!(depth > kMinRayNorm)) depth = d.norm();
        if (!(depth > kMinRayNorm)) throw NumericalError("inverse-depth anchor coincides with the feature");
        features[j].anchor = anchor;
        features[j].ray = first[j]->measured_ray;
        features[j].rho = 1.0 / depth;
      }
      out.features = std::move(features);
      break;
    }
  }
  return out;
}

OptimizeResult optimize(const BaProblem& problem, const SolverConfig& config) {
  BundleModel model(problem);
  OptimizeResult result;
  result.summary = optimize(model, config);
  result.problem = model.problem();
  result.clamped_features = model.clamped_features();
  const auto points = feature_points(result.problem);
  for (const auto& obs : result.problem.observations) {
    const CameraPose& pose = pose_at(result.problem, obs.pose_id);
    if ((pose.rotation.transpose() * (points[static_cast<std::size_t>(obs.feature_id)] - pose.position)).z() < 0.0)
      ++result.behind_camera;
  }
  return result;
}

}  // namespace pmba

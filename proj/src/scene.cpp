#include "pmba/scene.hpp"

#include "pmba/parallax.hpp"
#include "pmba/reprojection.hpp"
#include "pmba/solver.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <numeric>
#include <random>
#include <tuple>

namespace pmba {

namespace {

constexpr int kPlacementAttempts = 2000;

struct Visibility {
  const SceneSpec& spec;
  const std::vector<CameraPose>& poses;

  bool sees(int pose, const Eigen::Vector3d& point) const {
    const CameraPose& t = poses[static_cast<std::size_t>(pose)];
    const Eigen::Vector3d local = t.rotation.transpose() * (point - t.position);
    if (local.z() < 0.1 * spec.baseline) return false;
    const Eigen::Vector2d px = project(spec.intrinsics, local);
    return std::abs(px.x() - spec.intrinsics.cx) <= 0.5 * spec.image_width &&
           std::abs(px.y() - spec.intrinsics.cy) <= 0.5 * spec.image_height;
  }

  std::vector<int> observers(const Eigen::Vector3d& point) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(poses.size()); ++i)
      if (sees(i, point)) out.push_back(i);
    return out;
  }
};

}  // namespace

std::string to_string(FeatureTag tag) {
  switch (tag) {
    case FeatureTag::normal: return "normal";
    case FeatureTag::far: return "far";
    case FeatureTag::collinear: return "collinear";
  }
  return "unknown";
}

FeatureTag parse_feature_tag(const std::string& name) {
  if (name == "normal") return FeatureTag::normal;
  if (name == "far") return FeatureTag::far;
  if (name == "collinear") return FeatureTag::collinear;
  throw DataError("unknown feature tag '" + name + "'");
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  if (spec.num_poses < 2) throw DataError("a scene needs at least two poses");
  if (spec.num_features < 0 || spec.num_far < 0 || spec.num_collinear < 0 ||
      spec.num_far + spec.num_collinear > spec.num_features)
    throw DataError("far + collinear feature counts exceed the feature count");
  if (!(spec.baseline > 0.0) || !(spec.pixel_noise >= 0.0)) throw DataError("baseline must be positive, noise >= 0");

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  SyntheticScene scene;
  scene.intrinsics = spec.intrinsics;

  // Mostly forward motion with a small sideways drift and jitter.
  const Eigen::Vector3d heading = Eigen::Vector3d(0.3, 0.05, 1.0).normalized();
  for (int i = 0; i < spec.num_poses; ++i) {
    CameraPose pose;
    if (i > 0) {
      const Eigen::Vector3d jitter(gauss(rng), gauss(rng), gauss(rng));
      const Eigen::Vector3d tilt(gauss(rng), gauss(rng), gauss(rng));
      pose.position = spec.baseline * (i * heading + 0.05 * jitter);
      pose.rotation = exp_so3((0.03 * tilt).eval());
    }
    scene.poses.push_back(pose);
  }
  double max_baseline = 0.0;
  double max_z = 0.0;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& a : scene.poses) {
    centroid += a.position / spec.num_poses;
    max_z = std::max(max_z, a.position.z());
    for (const auto& b : scene.poses) max_baseline = std::max(max_baseline, (a.position - b.position).norm());
  }

  const Visibility vis{spec, scene.poses};
  std::vector<std::vector<int>> observers;
  const int num_normal = spec.num_features - spec.num_far - spec.num_collinear;

  for (int j = 0; j < num_normal; ++j) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const double z = max_z + spec.baseline * (3.0 + 7.0 * uniform(rng));
      const Eigen::Vector3d point(centroid.x() + (uniform(rng) - 0.5) * 0.6 * z,
                                  centroid.y() + (uniform(rng) - 0.5) * 0.45 * z, z);
      auto seen = vis.observers(point);
      if (seen.size() < 2) continue;
      scene.points.push_back(point);
      scene.tags.push_back(FeatureTag::normal);
      observers.push_back(std::move(seen));
      placed = true;
    }
    if (!placed) throw DataError("could not place a feature visible from two poses");
  }

  for (int j = 0; j < spec.num_far; ++j) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const Eigen::Vector3d dir =
          Eigen::Vector3d((uniform(rng) - 0.5) * 0.3, (uniform(rng) - 0.5) * 0.2, 1.0).normalized();
      const Eigen::Vector3d point = centroid + 1000.0 * max_baseline * dir;
      auto seen = vis.observers(point);
      if (seen.size() < 2) continue;
      scene.points.push_back(point);
      scene.tags.push_back(FeatureTag::far);
      observers.push_back(std::move(seen));
      placed = true;
    }
    if (!placed) throw DataError("could not place a far feature visible from two poses");
  }

  const Eigen::Vector3d axis = scene.poses[1].position - scene.poses[0].position;
  for (int j = 0; j < spec.num_collinear; ++j) {
    // Past pose 1 on the line through poses 0 and 1, offset by a hair.
    const Eigen::Vector3d side = axis.cross(Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng))).normalized();
    const Eigen::Vector3d point =
        scene.poses[0].position + (4.0 + j) * axis + 1e-4 * spec.baseline * side;
    if (!vis.sees(0, point) || !vis.sees(1, point))
      throw DataError("collinear feature is not visible from poses 0 and 1");
    scene.points.push_back(point);
    scene.tags.push_back(FeatureTag::collinear);
    observers.push_back({0, 1});
  }

  BaProblem& problem = scene.problem;
  problem.poses = scene.poses;
  problem.intrinsics = {spec.intrinsics};
  std::vector<EuclideanFeature> features(scene.points.size());
  for (std::size_t j = 0; j < scene.points.size(); ++j) {
    features[j].point = scene.points[j];
    for (const int i : observers[j]) {
      const CameraPose& t = scene.poses[static_cast<std::size_t>(i)];
      Observation obs;
      obs.pose_id = i;
      obs.feature_id = static_cast<int>(j);
      obs.pixel = project(spec.intrinsics, (t.rotation.transpose() * (scene.points[j] - t.position)).eval());
      if (spec.pixel_noise > 0.0) obs.pixel += spec.pixel_noise * Eigen::Vector2d(gauss(rng), gauss(rng));
      obs.measured_ray = pixel_to_ray(spec.intrinsics, obs.pixel);
      problem.observations.push_back(obs);
    }
  }
  problem.features = std::move(features);
  return scene;
}

BaProblem scene_problem(const SyntheticScene& scene, Parameterization param) {
  return convert_parameterization(scene.problem, param);
}

void perturb_poses(BaProblem& problem, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, sigma);
  for (int i = 0; i < static_cast<int>(problem.poses.size()); ++i) {
    Vector6<double> d;
    for (int c = 0; c < 6; ++c) d(c) = gauss(rng);
    if (i == problem.gauge.fixed_pose) continue;
    auto& pose = problem.poses[static_cast<std::size_t>(i)];
    pose = retract_pose(pose, d);
  }
}

void perturb_points(BaProblem& problem, double relative_sigma, std::uint64_t seed) {
  auto* features = std::get_if<std::vector<EuclideanFeature>>(&problem.features);
  if (features == nullptr) throw DataError("perturb_points expects Euclidean features");
  std::vector<int> first(features->size(), -1);
  for (const auto& obs : problem.observations)
    if (first[static_cast<std::size_t>(obs.feature_id)] < 0) first[static_cast<std::size_t>(obs.feature_id)] = obs.pose_id;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, relative_sigma);
  for (std::size_t j = 0; j < features->size(); ++j) {
    const Eigen::Vector3d d(gauss(rng), gauss(rng), gauss(rng));
    if (first[j] < 0) continue;
    auto& f = (*features)[j];
    f.point += (f.point - problem.poses[static_cast<std::size_t>(first[j])].position).norm() * d;
  }
}

BaProblem permute_poses(const BaProblem& problem, const std::vector<int>& order) {
  const std::size_t n = problem.poses.size();
  if (order.size() != n) throw DataError("permutation size does not match the pose count");
  std::vector<int> new_id(n, -1);
  for (std::size_t k = 0; k < n; ++k) {
    const int old = order[k];
    if (old < 0 || static_cast<std::size_t>(old) >= n || new_id[static_cast<std::size_t>(old)] >= 0)
      throw DataError("not a permutation");
    new_id[static_cast<std::size_t>(old)] = static_cast<int>(k);
  }
  BaProblem out = problem;
  for (std::size_t k = 0; k < n; ++k) out.poses[k] = problem.poses[static_cast<std::size_t>(order[k])];
  if (problem.intrinsics.size() == n)
    for (std::size_t k = 0; k < n; ++k) out.intrinsics[k] = problem.intrinsics[static_cast<std::size_t>(order[k])];
  for (auto& obs : out.observations) obs.pose_id = new_id[static_cast<std::size_t>(obs.pose_id)];
  std::stable_sort(out.observations.begin(), out.observations.end(), [](const Observation& a, const Observation& b) {
    return std::tie(a.feature_id, a.pose_id) < std::tie(b.feature_id, b.pose_id);
  });
  const auto remap = [&](int id) { return id >= 0 && static_cast<std::size_t>(id) < n ? new_id[static_cast<std::size_t>(id)] : id; };
  std::visit(
      [&](auto& features) {
        using T = typename std::decay_t<decltype(features)>::value_type;
        for (auto& f : features) {
          if constexpr (std::is_same_v<T, ParallaxFeature>) {
            f.main_anchor = remap(f.main_anchor);
            f.assoc_anchor = remap(f.assoc_anchor);
          } else if constexpr (std::is_same_v<T, InverseDepthFeature>) {
            f.anchor = remap(f.anchor);
          }
        }
      },
      out.features);
  out.gauge.fixed_pose = remap(problem.gauge.fixed_pose);
  out.gauge.scale_pose = remap(problem.gauge.scale_pose);
  return out;
}

AlignmentResult align_similarity(const std::vector<Eigen::Vector3d>& estimate,
                                 const std::vector<Eigen::Vector3d>& ground_truth) {
  if (estimate.size() != ground_truth.size()) throw DataError("alignment needs corresponding point lists");
  const auto n = static_cast<Eigen::Index>(estimate.size());
  if (n < 3) throw DataError("alignment needs at least three points");
  Eigen::Matrix3Xd x(3, n);
  Eigen::Matrix3Xd y(3, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    x.col(k) = estimate[static_cast<std::size_t>(k)];
    y.col(k) = ground_truth[static_cast<std::size_t>(k)];
  }
  const Eigen::Vector3d mx = x.rowwise().mean();
  const Eigen::Vector3d my = y.rowwise().mean();
  x.colwise() -= mx;
  y.colwise() -= my;

  const Eigen::JacobiSVD<Eigen::Matrix3d> spread(x * x.transpose());
  const Eigen::Vector3d sv = spread.singularValues();
  if (!(sv(1) > 1e-20 * std::max(sv(0), 1e-300))) throw DataError("alignment points are collinear");

  AlignmentResult r;
  r.scale = y.norm() / x.norm();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(y * x.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  r.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  r.translation = my - r.scale * r.rotation * mx;
  double sum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) sum += (r.scale * r.rotation * x.col(k) - y.col(k)).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(n));
  return r;
}

ReconstructionError compare_reconstruction(const std::vector<CameraPose>& poses,
                                           const std::vector<Eigen::Vector3d>& points,
                                           const std::vector<CameraPose>& true_poses,
                                           const std::vector<Eigen::Vector3d>& true_points,
                                           const std::vector<bool>& use_point) {
  if (poses.size() != true_poses.size() || points.size() != true_points.size())
    throw DataError("reconstruction and ground truth differ in size");
  std::vector<Eigen::Vector3d> est;
  std::vector<Eigen::Vector3d> ref;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    est.push_back(poses[i].position);
    ref.push_back(true_poses[i].position);
  }
  for (std::size_t j = 0; j < points.size(); ++j) {
    if (!use_point.empty() && !use_point[j]) continue;
    est.push_back(points[j]);
    ref.push_back(true_points[j]);
  }
  ReconstructionError e;
  e.alignment = align_similarity(est, ref);
  double pose_sum = 0.0;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    pose_sum += (e.alignment.apply(poses[i].position) - true_poses[i].position).squaredNorm();
    e.max_rotation_error =
        std::max(e.max_rotation_error, rotation_distance((e.alignment.rotation * poses[i].rotation).eval(),
                                                         true_poses[i].rotation));
  }
  e.pose_rmse = poses.empty() ? 0.0 : std::sqrt(pose_sum / static_cast<double>(poses.size()));
  double point_sum = 0.0;
  for (std::size_t j = 0; j < points.size(); ++j)
    point_sum += (e.alignment.apply(points[j]) - true_points[j]).squaredNorm();
  e.point_rmse = points.empty() ? 0.0 : std::sqrt(point_sum / static_cast<double>(points.size()));
  return e;
}

void refresh_measured_rays(BaProblem& problem) {
  for (auto& obs : problem.observations) obs.measured_ray = pixel_to_ray(problem.intrinsics_for(obs.pose_id), obs.pixel);
}

}  // namespace pmba

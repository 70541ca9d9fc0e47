#pragma once

// Synthetic scenes with the pathological features of the simulation study,
// small perturbation helpers and similarity alignment against ground truth.

#include "pmba/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pmba {

enum class FeatureTag { normal, far, collinear };
std::string to_string(FeatureTag tag);
FeatureTag parse_feature_tag(const std::string& name);

struct SceneSpec {
  int num_poses = 4;
  int num_features = 10;
  int num_far = 1;        // placed at ~1000x the largest baseline
  int num_collinear = 1;  // on the line through poses 0 and 1, seen only by them
  double pixel_noise = 0.0;
  double baseline = 1.0;
  std::uint64_t seed = 0;
  CameraIntrinsics intrinsics{};
  double image_width = 640.0;
  double image_height = 480.0;
};

struct SyntheticScene {
  std::vector<CameraPose> poses;
  std::vector<Eigen::Vector3d> points;
  std::vector<FeatureTag> tags;
  CameraIntrinsics intrinsics;
  // Noisy measurements; the features hold the ground-truth points.
  BaProblem problem;
};

/// Deterministic for a given spec. Throws DataError when a feature cannot be
/// placed where at least two poses see it.
SyntheticScene generate_scene(const SceneSpec& spec);

/// Ground-truth-seeded problem in the requested parameterization.
BaProblem scene_problem(const SyntheticScene& scene, Parameterization param);

/// Adds N(0, sigma) to every free pose's rotation vector and position.
void perturb_poses(BaProblem& problem, double sigma, std::uint64_t seed);

/// Moves every Euclidean feature by N(0, sigma * distance to its first observer).
void perturb_points(BaProblem& problem, double relative_sigma, std::uint64_t seed);

/// Relabels poses with `order[new_id] = old_id`; observations are re-sorted by
/// feature, then new pose id. Parallax anchors and the gauge follow their poses.
BaProblem permute_poses(const BaProblem& problem, const std::vector<int>& order);

/// y ~ scale * rotation * x + translation
struct AlignmentResult {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double rmse = 0.0;

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return scale * rotation * x + translation; }
};

/// Closed-form similarity: scale is the ratio of the centred norms, rotation
/// from the SVD of the cross-covariance. Needs three non-collinear points.
AlignmentResult align_similarity(const std::vector<Eigen::Vector3d>& estimate,
                                 const std::vector<Eigen::Vector3d>& ground_truth);

struct ReconstructionError {
  AlignmentResult alignment;
  double pose_rmse = 0.0;           // camera centres after alignment
  double point_rmse = 0.0;          // all points after alignment
  double max_rotation_error = 0.0;  // radians
};

/// Aligns camera centres plus the points marked in `use_point` (all when
/// empty), then reports errors of every pose and point.
ReconstructionError compare_reconstruction(const std::vector<CameraPose>& poses,
                                           const std::vector<Eigen::Vector3d>& points,
                                           const std::vector<CameraPose>& true_poses,
                                           const std::vector<Eigen::Vector3d>& true_points,
                                           const std::vector<bool>& use_point = {});

/// Recomputes every measured ray from its pixel and camera intrinsics.
void refresh_measured_rays(BaProblem& problem);

}  // namespace pmba

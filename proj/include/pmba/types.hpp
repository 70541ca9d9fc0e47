#pragma once

#include "pmba/manifold.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace pmba {

/// Malformed or inconsistent input (bad file, bad ids, disconnected graph).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation that cannot produce a meaningful number (singular system,
/// zero-length ray, degenerate geometry).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 0.0;
  double cy = 0.0;
  // Radial distortion applied on the normalized image plane, BAL style.
  double k1 = 0.0;
  double k2 = 0.0;

  bool has_distortion() const { return k1 != 0.0 || k2 != 0.0; }
};

/// Unit camera-frame ray through a pixel (undistorting first when needed).
Eigen::Vector3d pixel_to_ray(const CameraIntrinsics& k, const Eigen::Vector2d& pixel);

/// Pixel of a camera-frame point; the point's z must be nonzero.
Eigen::Vector2d project(const CameraIntrinsics& k, const Eigen::Vector3d& local);

struct Observation {
  int pose_id = 0;
  int feature_id = 0;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  // normalize(K^-1 [u; 1]) in the camera frame; cached at ingestion.
  Eigen::Vector3d measured_ray = Eigen::Vector3d::UnitZ();
  double weight = 1.0;
};

/// Parallax-angle feature: angle at the feature between the rays to the two
/// anchors, and the unit ray towards the feature in the main-anchor frame.
struct ParallaxFeature {
  double theta = 0.0;
  Eigen::Vector3d ray = Eigen::Vector3d::UnitZ();
  int main_anchor = 0;
  int assoc_anchor = 1;
};

struct EuclideanFeature {
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

/// Anchor ray is held fixed; only the inverse depth is optimized.
struct InverseDepthFeature {
  int anchor = 0;
  Eigen::Vector3d ray = Eigen::Vector3d::UnitZ();
  double rho = 1.0;
};

enum class Parameterization { parallax, euclidean, inverse_depth };

std::string to_string(Parameterization p);
Parameterization parse_parameterization(const std::string& name);

using FeatureSet = std::variant<std::vector<ParallaxFeature>, std::vector<EuclideanFeature>,
                                std::vector<InverseDepthFeature>>;

/// Removes the 7-DoF monocular gauge: `fixed_pose` is frozen entirely and
/// coordinate `scale_axis` of `scale_pose`'s position is frozen. A negative
/// axis means "pick the largest-magnitude baseline coordinate".
struct Gauge {
  int fixed_pose = 0;
  int scale_pose = 1;
  int scale_axis = -1;
};

struct BaProblem {
  std::vector<CameraPose> poses;
  // Either one shared entry or one per pose.
  std::vector<CameraIntrinsics> intrinsics{CameraIntrinsics{}};
  std::vector<Observation> observations;
  FeatureSet features = std::vector<ParallaxFeature>{};
  Gauge gauge;
  // Optional pseudo-Huber scale on residual norms; <= 0 disables it.
  double huber_scale = 0.0;

  const CameraIntrinsics& intrinsics_for(int pose) const {
    return intrinsics.size() == 1 ? intrinsics.front() : intrinsics.at(static_cast<std::size_t>(pose));
  }
  Parameterization parameterization() const { return static_cast<Parameterization>(features.index()); }
  std::size_t num_features() const;
};

/// Throws DataError on out-of-range ids, anchors equal or not observing, etc.
void validate(const BaProblem& problem);

/// Fills the scale axis when it is still automatic.
Gauge resolve_gauge(const BaProblem& problem);

}  // namespace pmba

#pragma once

// Global initialization: epipolar pairs, chordal rotation averaging,
// translation-direction refinement, rotation-only feature initialization,
// the QPLC position bootstrap and the convex position-only pose graph.

#include "pmba/solver.hpp"
#include "pmba/types.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pmba {

/// Relative geometry of poses i < k: R_ik = R_i^T R_k and the unit direction
/// t_ik = R_i^T (p_k - p_i) / |p_k - p_i|, so camera-frame points satisfy
/// X_i = R_ik X_k + s t_ik.
struct EgPair {
  int i = 0;
  int k = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  std::vector<int> inliers;  // feature ids
  int shared = 0;
};

struct EgConfig {
  int min_shared = 16;
  int ransac_iterations = 200;
  double threshold_px = 2.0;
  std::uint64_t seed = 0;
};

struct EgDiagnostic {
  int i = 0;
  int k = 0;
  std::string reason;
};

/// Essential matrix of bearing correspondences (x_i^T E x_k = 0) by the
/// normalized eight-point method, projected to the essential manifold.
/// Needs at least eight correspondences with positive depth.
Eigen::Matrix3d essential_eight_point(const std::vector<Eigen::Vector3d>& rays_i,
                                      const std::vector<Eigen::Vector3d>& rays_k);

/// Squared Sampson distance in normalized image units.
double sampson_error(const Eigen::Matrix3d& e, const Eigen::Vector3d& ray_i, const Eigen::Vector3d& ray_k);

/// Of the four (R, t) factorizations of E, the one placing most points in front of both cameras.
std::pair<Eigen::Matrix3d, Eigen::Vector3d> decompose_essential(const Eigen::Matrix3d& e,
                                                                const std::vector<Eigen::Vector3d>& rays_i,
                                                                const std::vector<Eigen::Vector3d>& rays_k,
                                                                int* in_front = nullptr);

/// Depths (d_i, d_k) with d_i x_i ~ R d_k x_k + t, least squares.
Eigen::Vector2d triangulate_depths(const Eigen::Matrix3d& r, const Eigen::Vector3d& t, const Eigen::Vector3d& ray_i,
                                   const Eigen::Vector3d& ray_k);

/// Relative pose of one image pair by RANSAC; nullopt-like failure reported through `reason`.
bool estimate_eg_pair(const std::vector<Eigen::Vector3d>& rays_i, const std::vector<Eigen::Vector3d>& rays_k,
                      double threshold, int iterations, std::uint64_t seed, Eigen::Matrix3d& rotation,
                      Eigen::Vector3d& direction, std::vector<int>& inliers, std::string& reason);

/// All pose pairs sharing at least `min_shared` features. Pose positions and
/// features of `tracks` are ignored; only observations and intrinsics are used.
std::vector<EgPair> estimate_eg_pairs(const BaProblem& tracks, const EgConfig& config,
                                      std::vector<EgDiagnostic>* skipped = nullptr);

/// Connected components (sorted pose ids) of the graph on `num_poses` nodes.
std::vector<std::vector<int>> view_graph_components(int num_poses, const std::vector<EgPair>& pairs);

/// Minimizes sum |R_i R_ik - R_k|_F^2 over unconstrained 3x3 blocks with
/// R_0 = I, then projects each block to SO(3). Throws DataError listing the
/// components when the graph is disconnected.
std::vector<Eigen::Matrix3d> chordal_rotation_averaging(int num_poses, const std::vector<EgPair>& pairs);

/// Re-estimates each pair's direction with the rotations fixed: two-point
/// RANSAC, least-squares refit on the inliers, sign by a cheirality vote.
void refine_translation_directions(std::vector<EgPair>& pairs, const BaProblem& tracks,
                                   const std::vector<Eigen::Matrix3d>& rotations, const EgConfig& config);

struct FeatureInit {
  std::vector<ParallaxFeature> features;
  std::vector<int> source_feature;    // input feature id of every kept feature
  std::vector<bool> eg_anchored;      // anchors form an EG pair
  std::vector<int> dropped_features;  // fewer than two observing poses
};

/// Anchors maximize the angle between the rotated measured rays over
/// observing pairs that are EG pairs (lower pose pair on ties); theta is that
/// angle and the ray is the main anchor's measurement.
FeatureInit initialize_features(const BaProblem& tracks, const std::vector<Eigen::Matrix3d>& rotations,
                                const std::vector<EgPair>& pairs);

/// One observation of the linear ray model
///   N = a_main p_m + a_assoc p_a + a_obs p_i
///     = sin(alpha - theta) Exp(n_z (pi - alpha)) (p_a - p_m) + sin(theta) (p_m - p_i).
struct LinearRay {
  int main = 0;
  int assoc = 0;
  int observer = 0;
  Eigen::Matrix3d a_main = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d a_assoc = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d a_observer = Eigen::Matrix3d::Zero();
  Eigen::Vector3d target = Eigen::Vector3d::UnitZ();  // R_i * measured ray, world frame
  Eigen::Matrix3d observer_rotation = Eigen::Matrix3d::Identity();
  double weight = 1.0;

  Eigen::Vector3d evaluate(const std::vector<Eigen::Vector3d>& positions) const;
};

/// Rotation taking the unit anchor direction u = (p_a - p_m)/|.| onto the
/// scaled main ray: Exp(n_z (pi - alpha)) with n_z = normalize(u x w) and
/// alpha = angle(-u, w).
Eigen::Matrix3d anchor_rotation(const Eigen::Vector3d& anchor_direction, const Eigen::Vector3d& main_ray_world);

struct ConvexPositionProblem {
  int num_poses = 0;
  std::vector<LinearRay> rays;
  int fixed_pose = 0;                     // position pinned to the origin
  int scale_pose = 1;
  int scale_axis = 0;
  double scale_value = 1.0;               // p[scale_pose][scale_axis]
  int skipped_features = 0;               // no EG pair between the anchors
  double huber_scale = 0.0;
};

/// Builds the linear ray model from fixed rotations, features and EG directions.
ConvexPositionProblem build_convex_problem(const BaProblem& tracks, const std::vector<Eigen::Matrix3d>& rotations,
                                           const FeatureInit& init, const std::vector<EgPair>& pairs,
                                           int fixed_pose = 0);

/// Position-only cost h(p) = sum |normalize(N) - R_i f|^2 (zero-length N skipped).
double convex_cost(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& positions,
                   int* skipped = nullptr);

/// Cross-product objective sum |S(R_i f) N|^2.
double qplc_objective(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& positions);

/// Free unknowns of the gauge-fixed problem: all position coordinates except
/// the fixed pose and the scale coordinate.
struct GaugeMap {
  std::vector<int> index;  // 3 * num_poses entries, -1 where fixed
  int unknowns = 0;
};
GaugeMap gauge_map(const ConvexPositionProblem& problem);
std::vector<Eigen::Vector3d> expand_positions(const ConvexPositionProblem& problem, const Eigen::VectorXd& x);

/// Dense quadratic form of the QPLC objective in the free unknowns:
/// 0.5 x^T Q x + c^T x + const.
void qplc_quadratic(const ConvexPositionProblem& problem, Eigen::MatrixXd& q, Eigen::VectorXd& c);

struct QplcResult {
  std::vector<Eigen::Vector3d> positions;
  double objective = 0.0;
  int active_constraints = 0;
  int iterations = 0;
  bool regularized = false;
  bool feasible = true;
  double min_constraint = 0.0;  // smallest z(R_i^T N) over observations
};

/// min sum |S(R_i f) N|^2  s.t.  z(R_i^T N) >= 0 for every observation.
QplcResult qplc_bootstrap(const ConvexPositionProblem& problem, bool enforce_cheirality = true);

struct ConvexResult {
  std::vector<Eigen::Vector3d> positions;
  OptimizeSummary summary;
  double cost = 0.0;
  int skipped_observations = 0;
};

/// Minimizes h(p) with the sparse solver restricted to position blocks.
ConvexResult convex_pose_graph(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& start,
                               const SolverConfig& config);

/// Least-squares model of h(p) for the generic solver (pose_dim 3, no features).
class PositionGraphModel : public LeastSquaresModel {
 public:
  PositionGraphModel(const ConvexPositionProblem& problem, std::vector<Eigen::Vector3d> positions);

  int num_poses() const override { return problem_->num_poses; }
  int pose_dim() const override { return 3; }
  int num_features() const override { return 0; }
  int feature_dim() const override { return 0; }
  bool is_fixed(int pose, int coordinate) const override;
  void linearize(std::vector<LinearizedTerm>& terms) const override;
  double cost() const override;
  double chi2_ray() const override { return convex_cost(*problem_, positions_); }
  std::unique_ptr<LeastSquaresModel> clone() const override;
  void retract(const Eigen::VectorXd& pose_step, const Eigen::VectorXd& feature_step) override;

  const std::vector<Eigen::Vector3d>& positions() const { return positions_; }

 private:
  const ConvexPositionProblem* problem_;
  std::vector<Eigen::Vector3d> positions_;
};

/// Positions with the gauge applied and the rest drawn from N(0, 1).
std::vector<Eigen::Vector3d> random_positions(const ConvexPositionProblem& problem, std::uint64_t seed);

struct StageReport {
  std::string stage;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::string> flags;
};

struct PipelineConfig {
  EgConfig eg;
  bool skip_qplc = false;
  bool run_bundle_adjustment = true;
  SolverConfig convex_solver{Method::levenberg_marquardt};
  SolverConfig bundle_solver{Method::dogleg};
  double huber_scale = 0.0;  // on the convex stage residuals
};

/// key=value lines ('#' comments); unknown keys raise DataError.
PipelineConfig parse_pipeline_config(const std::string& text, PipelineConfig base = {});

struct PipelineResult {
  BaProblem initialized;  // parallax problem after the convex stage
  BaProblem optimized;    // after full bundle adjustment (copy of initialized when skipped)
  OptimizeSummary bundle_summary;
  std::vector<StageReport> reports;
  FeatureInit features;
  std::vector<EgPair> pairs;
};

/// Raised by run_pipeline; carries the reports of the stages that finished.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& what, bool numerical, std::vector<StageReport> reports,
                BaProblem partial = {})
      : std::runtime_error(stage + ": " + what),
        stage_(std::move(stage)),
        numerical_(numerical),
        reports_(std::move(reports)),
        partial_(std::move(partial)) {}

  const std::string& stage() const { return stage_; }
  bool numerical() const { return numerical_; }
  const std::vector<StageReport>& reports() const { return reports_; }
  const BaProblem& partial() const { return partial_; }

 private:
  std::string stage_;
  bool numerical_;
  std::vector<StageReport> reports_;
  BaProblem partial_;
};

/// EG pairs -> rotation averaging -> direction refinement -> features -> QPLC
/// -> convex pose graph -> (optionally) parallax bundle adjustment.
PipelineResult run_pipeline(const BaProblem& tracks, const PipelineConfig& config);

}  // namespace pmba

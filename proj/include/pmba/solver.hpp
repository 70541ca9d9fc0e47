#pragma once

// Block-sparse nonlinear least squares with feature elimination.
//
// A model exposes residual terms that touch up to three pose blocks and at
// most one feature block. The engine assembles H = J^T J and g = J^T r,
// eliminates the (block diagonal) feature part and takes GN, LM or dogleg
// steps on the reduced camera system.

#include "pmba/types.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <array>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace pmba {

using ResidualVector = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, 3, 1>;
using PoseJacobian = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, 3, 6>;
using FeatureJacobian = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, 3, 3>;

struct LinearizedTerm {
  static constexpr int kMaxPoses = 3;

  ResidualVector residual;
  int num_poses = 0;
  std::array<int, kMaxPoses> pose{};
  std::array<PoseJacobian, kMaxPoses> pose_jacobian;
  int feature = -1;
  FeatureJacobian feature_jacobian;

  /// Adds a pose block, summing into an existing entry for the same pose.
  void add_pose(int id, const PoseJacobian& jacobian);
};

class LeastSquaresModel {
 public:
  virtual ~LeastSquaresModel() = default;

  virtual int num_poses() const = 0;
  virtual int pose_dim() const = 0;
  virtual int num_features() const = 0;
  virtual int feature_dim() const = 0;
  virtual bool is_fixed(int pose, int coordinate) const = 0;

  /// Weighted residuals and Jacobians at the current state.
  virtual void linearize(std::vector<LinearizedTerm>& terms) const = 0;
  /// Objective the step acceptance is measured against; +inf when the state
  /// cannot be evaluated.
  virtual double cost() const = 0;
  virtual double chi2_ray() const { return std::numeric_limits<double>::quiet_NaN(); }
  virtual double chi2_uv() const { return std::numeric_limits<double>::quiet_NaN(); }

  virtual std::unique_ptr<LeastSquaresModel> clone() const = 0;
  virtual void retract(const Eigen::VectorXd& pose_step, const Eigen::VectorXd& feature_step) = 0;
};

/// Normal equations partitioned into pose (T) and feature (F) blocks. Only the
/// upper triangle of H_TT is stored. Gauge-fixed coordinates are pinned: their
/// rows and columns are zero except for a unit diagonal.
struct SchurSystem {
  int num_poses = 0;
  int pose_dim = 0;
  int num_features = 0;
  int feature_dim = 0;

  std::map<std::pair<int, int>, Eigen::MatrixXd> htt;
  // Per feature: pose id -> pose_dim x feature_dim coupling block.
  std::vector<std::map<int, Eigen::MatrixXd>> htf;
  std::vector<Eigen::MatrixXd> hff;
  Eigen::VectorXd gradient_pose;
  Eigen::VectorXd gradient_feature;
  double chi2 = 0.0;

  int pose_unknowns() const { return num_poses * pose_dim; }
  int feature_unknowns() const { return num_features * feature_dim; }
};

SchurSystem build_normal_equations(const LeastSquaresModel& model);
SchurSystem build_normal_equations(const BaProblem& problem);

/// Full symmetric H (poses first, then features) and gradient; for checks.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> dense_normal_equations(const SchurSystem& system);

struct ReducedSystem {
  int num_poses = 0;
  int pose_dim = 0;
  // Upper-triangular blocks of H_TT - H_TF H_FF^-1 H_TF^T (with damping).
  std::map<std::pair<int, int>, Eigen::MatrixXd> blocks;
  Eigen::VectorXd rhs;  // -g_T + H_TF H_FF^-1 g_F
  std::vector<Eigen::MatrixXd> hff_inverse;
  int regularized_blocks = 0;  // feature blocks that needed a ridge

  Eigen::MatrixXd dense() const;
  Eigen::SparseMatrix<double> sparse() const;
};

/// Eliminates the feature blocks with damping `lambda` added to every diagonal.
ReducedSystem schur_reduce(const SchurSystem& system, double lambda = 0.0);

/// Solves the reduced system; dense Cholesky below `dense_pose_threshold` pose
/// blocks, sparse Cholesky in pose-block order otherwise. `ok` is false when the
/// factorization fails (matrix not numerically positive definite).
Eigen::VectorXd solve_reduced(const ReducedSystem& reduced, int dense_pose_threshold, bool* ok);

/// Feature increments from a pose increment: dF = H_FF^-1 (-g_F - H_TF^T dT).
Eigen::VectorXd back_substitute(const SchurSystem& system, const ReducedSystem& reduced,
                                const Eigen::VectorXd& pose_step);

/// (pose, pose) block pairs with a nonzero reduced-camera entry.
std::vector<std::pair<int, int>> reduced_sparsity(const SchurSystem& system);

struct ConditionDiagnostics {
  std::vector<double> block_condition;
  std::vector<double> block_min_eigenvalue;
  std::vector<double> block_max_eigenvalue;
  double condition = std::numeric_limits<double>::quiet_NaN();
  double min_eigenvalue = std::numeric_limits<double>::quiet_NaN();
  double max_eigenvalue = std::numeric_limits<double>::quiet_NaN();
};

/// Exact per-block symmetric eigenvalues of H_FF; the aggregate condition is
/// the largest eigenvalue over all blocks divided by the smallest.
ConditionDiagnostics condition_diagnostics(const SchurSystem& system);

enum class Method { gauss_newton, levenberg_marquardt, dogleg };
std::string to_string(Method m);
Method parse_method(const std::string& name);

struct SolverConfig {
  Method method = Method::dogleg;
  int max_iterations = 200;
  double initial_lambda_scale = 1e-4;  // lambda0 = scale * mean(diag H)
  double initial_radius = 1.0;
  double relative_chi2_tolerance = 1e-10;
  double step_tolerance = 1e-8;
  double gradient_tolerance = 1e-10;
  int dense_pose_threshold = 60;
  bool diagnostics = true;
};

struct StepResult {
  Eigen::VectorXd pose_step;
  Eigen::VectorXd feature_step;
  bool ok = true;
  int regularized_blocks = 0;
};

/// Solves (H + lambda I) dx = -g through the reduced camera system.
StepResult solve_damped(const SchurSystem& system, double lambda, int dense_pose_threshold = 60);

StepResult step_gn(const SchurSystem& system, const SolverConfig& config);
StepResult step_lm(const SchurSystem& system, const SolverConfig& config, double lambda);

/// Powell dogleg blend of the Gauss-Newton step and the Cauchy point.
StepResult step_dl(const SchurSystem& system, const StepResult& gauss_newton, double radius);

/// x^T H x for x = (pose part, feature part).
double hessian_quadratic(const SchurSystem& system, const Eigen::VectorXd& pose_step,
                         const Eigen::VectorXd& feature_step);

struct IterationRecord {
  int iteration = 0;
  double chi2_ray = 0.0;
  double chi2_uv = 0.0;
  double step_norm = 0.0;
  double damping_or_radius = 0.0;
  double cond_hff = 0.0;
  double min_eig_hff = 0.0;
  int linear_solves = 0;
  double wall_ms = 0.0;
};

enum class Termination {
  converged_gradient,
  converged_step,
  max_iterations,
  gn_singular,
  gn_diverged,
  no_progress,
};
std::string to_string(Termination t);

struct OptimizeSummary {
  std::vector<IterationRecord> records;
  Termination termination = Termination::max_iterations;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int linear_solves = 0;
  int regularized_blocks = 0;
  bool converged() const {
    return termination == Termination::converged_gradient || termination == Termination::converged_step;
  }
};

/// Runs the configured method on `model`, which holds the accepted state on return.
OptimizeSummary optimize(LeastSquaresModel& model, const SolverConfig& config);

struct OptimizeResult {
  BaProblem problem;
  OptimizeSummary summary;
  int clamped_features = 0;
  int behind_camera = 0;
};

OptimizeResult optimize(const BaProblem& problem, const SolverConfig& config);

/// Model for a bundle-adjustment problem in any of the three feature parameterizations.
class BundleModel : public LeastSquaresModel {
 public:
  explicit BundleModel(BaProblem problem);

  int num_poses() const override { return static_cast<int>(problem_.poses.size()); }
  int pose_dim() const override { return 6; }
  int num_features() const override { return static_cast<int>(problem_.num_features()); }
  int feature_dim() const override;
  bool is_fixed(int pose, int coordinate) const override;

  void linearize(std::vector<LinearizedTerm>& terms) const override;
  double cost() const override;
  double chi2_ray() const override;
  double chi2_uv() const override;

  std::unique_ptr<LeastSquaresModel> clone() const override;
  void retract(const Eigen::VectorXd& pose_step, const Eigen::VectorXd& feature_step) override;

  const BaProblem& problem() const { return problem_; }
  int clamped_features() const { return clamped_; }

 private:
  // Unweighted residual of one observation.
  ResidualVector residual(const Observation& obs) const;
  LinearizedTerm linearize_one(const Observation& obs) const;

  BaProblem problem_;
  Gauge gauge_;
  int clamped_ = 0;
};

/// Sum of squared ray-direction residuals, any parameterization (points are
/// formed first for the baselines).
double chi2_ray(const BaProblem& problem);
/// Sum of squared pixel residuals, with parallax features converted to points.
double chi2_uv(const BaProblem& problem, int* skipped = nullptr);

/// World points for every feature of the problem.
std::vector<Eigen::Vector3d> feature_points(const BaProblem& problem);

/// Re-expresses the features in another parameterization through world points.
/// Parallax anchors are the observing pair with the widest ray angle (lower ids
/// on ties); an inverse-depth anchor is the first observation's pose, with
/// that observation's measured ray held fixed.
BaProblem convert_parameterization(const BaProblem& problem, Parameterization target);

/// Anchor pair (main, assoc) with the widest angle between rays towards `point`.
std::pair<int, int> select_anchor_pair(const std::vector<CameraPose>& poses, const std::vector<int>& observers,
                                       const Eigen::Vector3d& point);

/// Pseudo-Huber cost of a squared norm s with scale delta (s itself if delta <= 0).
double robust_cost(double squared_norm, double delta);
/// Square root of the IRLS weight d(robust_cost)/ds.
double robust_sqrt_weight(double squared_norm, double delta);

}  // namespace pmba

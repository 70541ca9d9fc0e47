// Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when any
// criterion fails so that ctest reports it.
//
// Usage: pmba_acceptance [path/to/pmba-cli]

#include "pmba/global_init.hpp"
#include "pmba/io.hpp"
#include "pmba/parallax.hpp"
#include "pmba/reprojection.hpp"
#include "pmba/scene.hpp"
#include "pmba/solver.hpp"

#include "../support/random_geometry.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace pmba;
using pmba::testing::central_difference;
using pmba::testing::random_pose;
using pmba::testing::random_unit;
using pmba::testing::random_vector;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(3) << v;
  return s.str();
}

double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  return (analytic - numeric).norm() / std::max(1.0, numeric.norm());
}

SyntheticScene scene_of(int poses, int features, std::uint64_t seed, double noise = 0.0, int far = 1,
                        int collinear = 1) {
  SceneSpec spec;
  spec.num_poses = poses;
  spec.num_features = features;
  spec.seed = seed;
  spec.pixel_noise = noise;
  spec.num_far = far;
  spec.num_collinear = collinear;
  return generate_scene(spec);
}

// ------------------------------------------------------------------ 1

Outcome feature_information() {
  std::mt19937_64 rng(1001);
  const Eigen::Matrix3d diag_m = Eigen::Vector3d(0, 1, 1).asDiagonal();
  const Eigen::Matrix3d diag_a = Eigen::Vector3d(1, 0, 0).asDiagonal();
  double min_eig = std::numeric_limits<double>::infinity();
  double err_m = 0.0, err_a = 0.0;
  int eig_fail = 0, m_fail = 0, a_fail = 0, evaluated = 0;
  for (int i = 0; i < 10000; ++i) {
    CameraPose main = random_pose(rng);
    CameraPose assoc = random_pose(rng);
    Eigen::Vector3d point = random_vector(rng, 3.0);
    switch (i % 5) {
      case 1: point = main.position + 1e5 * random_unit(rng); break;              // far feature
      case 2: assoc.position = main.position + 1e4 * random_unit(rng); break;     // far anchors
      case 3: {                                                                   // collinear with the baseline
        const Eigen::Vector3d b = assoc.position - main.position;
        point = main.position + 3.0 * b + 1e-7 * random_unit(rng);
        break;
      }
      default: break;
    }
    ParallaxFeature f;
    try {
      f = point_to_feature(point, main, assoc, 0, 1);
    } catch (const NumericalError&) {
      continue;
    }
    if (i % 50 == 4) f.theta = 1e-6;
    if (i % 50 == 9) f.theta = std::numbers::pi - 1e-6;
    // Exact anchor measurements of the (possibly modified) feature.
    Eigen::Vector3d xm, xa;
    try {
      xm = main.rotation.transpose() * scaled_ray(f, main, assoc, main.position).normalized();
      xa = assoc.rotation.transpose() * scaled_ray(f, main, assoc, assoc.position).normalized();
    } catch (const NumericalError&) {
      continue;
    }
    const Eigen::Matrix3d jm = ray_error_jacobians(f, main, assoc, main, xm).feature;
    const Eigen::Matrix3d ja = ray_error_jacobians(f, main, assoc, assoc, xa).feature;
    const Eigen::Matrix3d hm = jm.transpose() * jm, ha = ja.transpose() * ja;
    const double lo = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(hm + ha).eigenvalues().minCoeff();
    ++evaluated;
    min_eig = std::min(min_eig, lo);
    err_m = std::max(err_m, (hm - diag_m).cwiseAbs().maxCoeff());
    err_a = std::max(err_a, (ha - diag_a).cwiseAbs().maxCoeff());
    eig_fail += lo < 1.0 - 1e-9;
    m_fail += (hm - diag_m).cwiseAbs().maxCoeff() > 1e-9;
    a_fail += (ha - diag_a).cwiseAbs().maxCoeff() > 1e-9;
  }
  Outcome o;
  o.pass = evaluated == 10000 && eig_fail == 0 && m_fail == 0 && a_fail == 0;
  o.detail = std::to_string(evaluated) + " configs; min eig(H_FF) " + fmt(min_eig) + " (" + std::to_string(eig_fail) +
             " below 1); J_m^TJ_m max dev " + fmt(err_m) + "; J_a^TJ_a max dev " + fmt(err_a) + " (" +
             std::to_string(a_fail) + " off diag(1,0,0))";
  return o;
}

// ------------------------------------------------------------------ 2

Outcome conditioning() {
  const SyntheticScene scene = scene_of(4, 10, 0);
  BaProblem start = scene_problem(scene, Parameterization::euclidean);
  perturb_poses(start, 0.02, 17);
  perturb_points(start, 0.02, 18);
  SolverConfig cfg{Method::dogleg};
  cfg.max_iterations = 4;
  const OptimizeResult pm = optimize(convert_parameterization(start, Parameterization::parallax), cfg);
  const OptimizeResult xyz = optimize(start, cfg);
  double pm_max = 0.0;
  for (const auto& r : pm.summary.records) pm_max = std::max(pm_max, r.cond_hff);
  const double xyz0 = xyz.summary.records.front().cond_hff;
  const double chi_pm = pm.summary.records.back().chi2_uv, chi_xyz = xyz.summary.records.back().chi2_uv;
  Outcome o;
  o.pass = pm_max < 1e2 && xyz0 > 1e10 && chi_pm <= 1e-2 * chi_xyz;
  o.detail = "PMBA max cond " + fmt(pm_max) + ", XYZ cond at iteration 0 " + fmt(xyz0) + "; after 4 DL iterations chi2_uv " +
             fmt(chi_pm) + " vs " + fmt(chi_xyz);
  return o;
}

// ------------------------------------------------------------------ 3

Outcome ray_identities() {
  std::mt19937_64 rng(1003);
  double worst = 0.0, largest = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const CameraPose main = random_pose(rng), assoc = random_pose(rng), observer = random_pose(rng);
    const Eigen::Vector3d point = random_vector(rng, 3.0);
    ParallaxFeature f;
    try {
      f = point_to_feature(point, main, assoc, 0, 1);
    } catch (const NumericalError&) {
      continue;
    }
    const Eigen::Vector3d measured = random_unit(rng);
    const Eigen::Vector3d e = ray_error(f, main, assoc, observer, measured);
    // Independent prediction: ray from the observer to the point, world frame.
    const double beta = angle_between((point - observer.position).eval(), (observer.rotation * measured).eval());
    worst = std::max(worst, std::abs(e.norm() - 2.0 * std::sin(beta / 2.0)));
    largest = std::max(largest, e.norm());
  }
  // Feature crossing the observer's z = 0 plane.
  CameraPose main, assoc, observer;
  assoc.position = Eigen::Vector3d(0, 1, 0);
  observer.position = Eigen::Vector3d(0, 0, 5);
  const Eigen::Vector3d measured = Eigen::Vector3d(0.2, 0.1, 1.0).normalized();
  double jump = 0.0;
  Eigen::Vector3d prev = Eigen::Vector3d::Constant(std::nan(""));
  for (int s = -1000; s <= 1000; ++s) {
    const Eigen::Vector3d point(300.0, 0.5, 5.0 + 1e-4 * s + 0.5e-4);
    const Eigen::Vector3d e = ray_error(point_to_feature(point, main, assoc, 0, 1), main, assoc, observer, measured);
    if (prev.allFinite()) jump = std::max(jump, (e - prev).norm());
    prev = e;
  }
  Outcome o;
  o.pass = worst < 1e-12 && largest <= 2.0 && jump < 1e-6;
  o.detail = "| |e| - 2 sin(beta/2) | max " + fmt(worst) + ", max |e| " + fmt(largest) + ", max jump across plane " +
             fmt(jump);
  return o;
}

// ------------------------------------------------------------------ 4

using LPose = Pose<long double>;
using LVec3 = Vector3<long double>;

Outcome jacobians() {
  std::mt19937_64 rng(1004);
  double worst_parallax = 0.0, worst_xyz = 0.0, worst_idp = 0.0;
  int failing = 0;
  CameraIntrinsics k;
  k.k1 = -0.05;
  k.k2 = 0.01;
  for (int i = 0; i < 1000; ++i) {
    const CameraPose main = random_pose(rng), assoc = random_pose(rng), observer = random_pose(rng);
    Eigen::Vector3d point = random_vector(rng, 3.0);
    if (i % 10 == 0) point = main.position + 1e5 * random_unit(rng);
    ParallaxFeature f;
    try {
      f = point_to_feature(point, main, assoc, 0, 1);
    } catch (const NumericalError&) {
      continue;
    }
    const Eigen::Vector3d local = observer.rotation.transpose() * (point - observer.position);
    const Eigen::Vector3d measured = (local.normalized() + 0.05 * random_vector(rng)).normalized();
    const auto a = ray_error_jacobians(f, main, assoc, observer, measured);
    const LPose m = main.cast<long double>(), as = assoc.cast<long double>(), ob = observer.cast<long double>();
    const long double th = f.theta;
    const LVec3 ray = f.ray.cast<long double>(), meas = measured.cast<long double>();
    const Eigen::Matrix3d nf = central_difference<3, 3>([&](const LVec3& d) {
                                 return ray_error(th + d(0), retract_ray(ray, d.tail<2>()), m, as, ob, meas);
                               }).cast<double>();
    const Eigen::Matrix<double, 3, 6> nm = central_difference<3, 6>([&](const Vector6<long double>& d) {
                                             return ray_error(th, ray, retract_pose(m, d), as, ob, meas);
                                           }).cast<double>();
    const Eigen::Matrix<double, 3, 6> na = central_difference<3, 6>([&](const Vector6<long double>& d) {
                                             return ray_error(th, ray, m, retract_pose(as, d), ob, meas);
                                           }).cast<double>();
    const Eigen::Matrix<double, 3, 6> no = central_difference<3, 6>([&](const Vector6<long double>& d) {
                                             return ray_error(th, ray, m, as, retract_pose(ob, d), meas);
                                           }).cast<double>();
    const double ep = std::max({relative_error(a.feature, nf), relative_error(a.main, nm), relative_error(a.assoc, na),
                                relative_error(a.observer, no)});
    worst_parallax = std::max(worst_parallax, ep);

    // Pixel baselines on a point in front of the observer.
    const Eigen::Vector3d front =
        observer.position + observer.rotation * Eigen::Vector3d(0.3 * random_vector(rng).x(), 0.2, 4.0);
    const Eigen::Vector2d pixel =
        project(k, observer.rotation.transpose() * (front - observer.position)) + random_vector(rng).head<2>();
    const Vector2<long double> lpx = pixel.cast<long double>();
    const auto jx = reprojection_jacobians(front, observer, k);
    const Eigen::Matrix<double, 2, 6> nxp = central_difference<2, 6>([&](const Vector6<long double>& d) {
                                              return reprojection_error(front.cast<long double>().eval(),
                                                                        retract_pose(ob, d), lpx, k);
                                            }).cast<double>();
    const Eigen::Matrix<double, 2, 3> nxf = central_difference<2, 3>([&](const LVec3& d) {
                                              return reprojection_error((front.cast<long double>() + d).eval(), ob, lpx, k);
                                            }).cast<double>();
    const double ex = std::max(relative_error(jx.pose, nxp), relative_error(jx.point, nxf));
    worst_xyz = std::max(worst_xyz, ex);

    InverseDepthFeature idp;
    idp.anchor = 0;
    idp.ray = assoc.rotation.transpose() * (front - assoc.position).normalized();
    idp.rho = 1.0 / (front - assoc.position).norm();
    const auto ji = inverse_depth_jacobians(idp, assoc, observer, k);
    const LVec3 iray = idp.ray.cast<long double>();
    const long double rho = idp.rho;
    const Eigen::Matrix<double, 2, 6> nia = central_difference<2, 6>([&](const Vector6<long double>& d) {
                                              return inverse_depth_error(retract_pose(as, d), iray, rho, ob, lpx, k);
                                            }).cast<double>();
    const Eigen::Matrix<double, 2, 6> nio = central_difference<2, 6>([&](const Vector6<long double>& d) {
                                              return inverse_depth_error(as, iray, rho, retract_pose(ob, d), lpx, k);
                                            }).cast<double>();
    const Eigen::Matrix<double, 2, 1> nir =
        central_difference<2, 1>([&](const Eigen::Matrix<long double, 1, 1>& d) {
          return inverse_depth_error(as, iray, rho + d(0), ob, lpx, k);
        }).cast<double>();
    const double ei = std::max({relative_error(ji.anchor, nia), relative_error(ji.observer, nio),
                                relative_error(ji.rho, nir)});
    worst_idp = std::max(worst_idp, ei);
    failing += (ep >= 1e-5) + (ex >= 1e-5) + (ei >= 1e-5);
  }
  Outcome o;
  o.pass = failing == 0;
  o.detail = "max relative error: parallax " + fmt(worst_parallax) + ", xyz " + fmt(worst_xyz) + ", idp " +
             fmt(worst_idp) + "; failing blocks " + std::to_string(failing);
  return o;
}

// ------------------------------------------------------------------ 5

Outcome schur() {
  double worst = 0.0;
  int trials = 0, max_blocks = 0;
  for (int t = 0; t < 50; ++t) {
    const int poses = 3 + t % 5;
    const int features = 8 + (t * 7) % 30;
    const Parameterization param = t % 3 == 0   ? Parameterization::parallax
                                   : t % 3 == 1 ? Parameterization::inverse_depth
                                                : Parameterization::euclidean;
    // Far points are left out of XYZ: the dense double oracle itself loses accuracy there.
    const SyntheticScene scene =
        scene_of(poses, features, 500 + static_cast<std::uint64_t>(t), 0.5, param == Parameterization::euclidean ? 0 : 1);
    BaProblem p = scene_problem(scene, param);
    perturb_poses(p, 0.02, static_cast<std::uint64_t>(t));
    max_blocks = std::max(max_blocks, poses + features);
    const SchurSystem sys = build_normal_equations(p);
    const double lambda = t % 2 == 0 ? 0.0 : 1e-3;
    const StepResult step = solve_damped(sys, lambda, t % 4 == 0 ? 0 : 60);
    if (!step.ok) return {false, "reduced solve failed on trial " + std::to_string(t)};
    auto [h, g] = dense_normal_equations(sys);
    h.diagonal().array() += lambda;
    const Eigen::VectorXd x = h.ldlt().solve(-g);
    Eigen::VectorXd y(x.size());
    y << step.pose_step, step.feature_step;
    worst = std::max(worst, (x - y).norm() / x.norm());
    ++trials;
  }
  return {worst < 1e-8, std::to_string(trials) + " problems (<= " + std::to_string(max_blocks) +
                            " blocks), max relative difference " + fmt(worst)};
}

// ------------------------------------------------------------------ 6

std::vector<EgPair> exact_pairs(const BaProblem& tracks, const std::vector<CameraPose>& poses) {
  std::map<int, std::set<int>> observers;
  for (const auto& o : tracks.observations) observers[o.feature_id].insert(o.pose_id);
  std::map<std::pair<int, int>, std::vector<int>> shared;
  for (const auto& [f, s] : observers)
    for (int i : s)
      for (int k : s)
        if (i < k) shared[{i, k}].push_back(f);
  std::vector<EgPair> out;
  for (const auto& [key, features] : shared) {
    EgPair p;
    p.i = key.first;
    p.k = key.second;
    p.rotation = poses[p.i].rotation.transpose() * poses[p.k].rotation;
    p.direction = (poses[p.i].rotation.transpose() * (poses[p.k].position - poses[p.i].position)).normalized();
    p.inliers = features;
    p.shared = static_cast<int>(features.size());
    out.push_back(p);
  }
  return out;
}

ConvexPositionProblem convex_from_truth(const SyntheticScene& scene) {
  std::vector<Eigen::Matrix3d> rotations;
  for (const auto& p : scene.poses) rotations.push_back(p.rotation);
  const auto pairs = exact_pairs(scene.problem, scene.poses);
  return build_convex_problem(scene.problem, rotations, initialize_features(scene.problem, rotations, pairs), pairs, 0);
}

double aligned_rmse(const std::vector<Eigen::Vector3d>& a, const std::vector<Eigen::Vector3d>& b) {
  return align_similarity(a, b).rmse;
}

Outcome convex_initialization() {
  const SyntheticScene scene = scene_of(10, 50, 6);
  const ConvexPositionProblem problem = convex_from_truth(scene);
  std::vector<Eigen::Vector3d> truth;
  {
    const Eigen::Vector3d o = scene.poses[problem.fixed_pose].position;
    const double s = std::abs((scene.poses[problem.scale_pose].position - o)[problem.scale_axis]);
    for (const auto& p : scene.poses) truth.push_back((p.position - o) / s);
  }
  // (a) segment inequality around the noise-free minimizer.
  std::mt19937_64 rng(1006);
  std::uniform_real_distribution<double> lam(0.0, 1.0);
  const double h0 = convex_cost(problem, truth);
  int violations = 0;
  for (int t = 0; t < 10000; ++t) {
    const double l = lam(rng);
    const double spread = t % 3 == 0 ? 5.0 : 0.5;
    std::vector<Eigen::Vector3d> far(truth.size()), mid(truth.size());
    for (std::size_t j = 0; j < truth.size(); ++j) {
      const Eigen::Vector3d d = random_vector(rng, spread);
      far[j] = truth[j] + d;
      mid[j] = truth[j] + l * d;
    }
    violations += convex_cost(problem, mid) > h0 + convex_cost(problem, far) + 1e-12;
  }
  // (b) 32 random starts, noise-free.
  SolverConfig cfg{Method::levenberg_marquardt};
  std::vector<std::vector<Eigen::Vector3d>> runs;
  for (std::uint64_t s = 0; s < 32; ++s) runs.push_back(convex_pose_graph(problem, random_positions(problem, s), cfg).positions);
  double pairwise = 0.0;
  for (std::size_t a = 0; a < runs.size(); ++a)
    for (std::size_t b = a + 1; b < runs.size(); ++b) pairwise = std::max(pairwise, aligned_rmse(runs[a], runs[b]));
  // (c) near-optimality, noise-free and with 0.5 px noise in the barred rays.
  bool bound = true;
  double worst_ratio = 0.0;
  for (double noise : {0.0, 0.5}) {
    const SyntheticScene s2 = noise == 0.0 ? scene : scene_of(10, 50, 6, noise);
    const ConvexPositionProblem p2 = noise == 0.0 ? problem : convex_from_truth(s2);
    std::vector<double> h;
    for (std::uint64_t s = 0; s < 32; ++s)
      h.push_back(convex_pose_graph(p2, random_positions(p2, 100 + s), cfg).cost);
    const double best = *std::min_element(h.begin(), h.end());
    for (double v : h) {
      bound = bound && v <= 2.0 * best + 1e-9;
      if (noise > 0.0) worst_ratio = std::max(worst_ratio, v / best);
    }
  }
  Outcome o;
  o.pass = violations == 0 && pairwise < 1e-6 && bound;
  o.detail = "(a) " + std::to_string(violations) + " violations / 1e4; (b) max pairwise RMSE " + fmt(pairwise) +
             " over 32 starts; (c) with 0.5 px noise max h/h_best " + fmt(worst_ratio) + (bound ? " within" : " outside") + " bound";
  return o;
}

// ------------------------------------------------------------------ 7

double uv_rmse(const BaProblem& p) { return std::sqrt(chi2_uv(p) / static_cast<double>(2 * p.observations.size())); }

Outcome end_to_end() {
  const SyntheticScene scene = scene_of(6, 60, 7);
  double worst_pose = 0.0, worst_point = 0.0, worst_chi2 = 0.0;
  for (bool shuffle : {false, true}) {
    std::vector<int> order(scene.poses.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) std::shuffle(order.begin(), order.end(), std::mt19937_64(77));
    const BaProblem tracks = permute_poses(scene.problem, order);
    const PipelineResult r = run_pipeline(tracks, PipelineConfig{});
    std::vector<CameraPose> tp;
    for (int id : order) tp.push_back(scene.poses[id]);
    std::vector<Eigen::Vector3d> tpts;
    for (int f : r.features.source_feature) tpts.push_back(scene.points[f]);
    const auto points = feature_points(r.optimized);
    // Align on the camera centres only; every point error is then reported.
    const auto err = compare_reconstruction(r.optimized.poses, points, tp, tpts, std::vector<bool>(points.size(), false));
    worst_pose = std::max(worst_pose, err.pose_rmse);
    worst_point = std::max(worst_point, err.point_rmse);
    worst_chi2 = std::max(worst_chi2, chi2_ray(r.optimized));
  }
  // 0.5 px noise against a ground-truth-seeded parallax run.
  const SyntheticScene noisy = scene_of(6, 60, 7, 0.5);
  const PipelineResult r = run_pipeline(noisy.problem, PipelineConfig{});
  const OptimizeResult ref = optimize(scene_problem(noisy, Parameterization::parallax), SolverConfig{Method::dogleg});
  const double ratio = uv_rmse(r.optimized) / uv_rmse(ref.problem);
  Outcome o;
  o.pass = worst_pose < 1e-8 && worst_point < 1e-8 && worst_chi2 < 1e-12 && std::abs(ratio - 1.0) <= 0.05;
  o.detail = "noise-free: pose RMSE " + fmt(worst_pose) + ", point RMSE " + fmt(worst_point) +
             ", chi2 " + fmt(worst_chi2) + "; 0.5px: uv-RMSE ratio to GT-seeded run " + fmt(ratio);
  return o;
}

// ------------------------------------------------------------------ 8

Outcome rotation_averaging() {
  std::mt19937_64 rng(1008);
  double noise_free = 0.0;
  for (int n : {3, 20}) {
    std::vector<Eigen::Matrix3d> truth{Eigen::Matrix3d::Identity()};
    for (int j = 1; j < n; ++j) truth.push_back(exp_so3(random_vector(rng)));
    std::vector<EgPair> edges;
    for (int j = 0; j < n; ++j) {
      EgPair p;
      p.i = std::min(j, (j + 1) % n);
      p.k = std::max(j, (j + 1) % n);
      p.rotation = truth[p.i].transpose() * truth[p.k];
      edges.push_back(p);
    }
    const auto r = chordal_rotation_averaging(n, edges);
    for (int j = 0; j < n; ++j) noise_free = std::max(noise_free, rotation_distance(r[j], truth[j]));
  }
  // 1 degree RMS edge noise on a 20-pose ring matched to its next two neighbours.
  const int n = 20;
  const double sigma = std::numbers::pi / 180.0;
  double mean = 0.0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    std::vector<Eigen::Matrix3d> truth{Eigen::Matrix3d::Identity()};
    for (int j = 1; j < n; ++j) truth.push_back(exp_so3(random_vector(rng, 0.7)));
    std::vector<EgPair> edges;
    for (int j = 0; j < 2 * n; ++j) {
      const int a = j % n, b = (a + 1 + j / n) % n;
      EgPair p;
      p.i = std::min(a, b);
      p.k = std::max(a, b);
      p.rotation = truth[p.i].transpose() * truth[p.k] * exp_so3(random_vector(rng, sigma / std::sqrt(3.0)));
      edges.push_back(p);
    }
    const auto r = chordal_rotation_averaging(n, edges);
    for (int j = 0; j < n; ++j) mean += rotation_distance(r[j], truth[j]);
  }
  mean /= n * trials;
  const double mean_deg = mean * 180.0 / std::numbers::pi;
  return {noise_free < 1e-8 && mean_deg < 1.0,
          "noise-free max log-error " + fmt(noise_free) + "; 1 deg noise mean error " + fmt(mean_deg) + " deg"};
}

// ------------------------------------------------------------------ 9

Eigen::Vector2d bal_projection(const BalCamera& cam, const Eigen::Vector3d& x) {
  const double angle = cam.rotation.norm();
  const Eigen::Matrix3d r = angle > 0 ? Eigen::AngleAxisd(angle, cam.rotation / angle).toRotationMatrix()
                                      : Eigen::Matrix3d::Identity();
  const Eigen::Vector3d p = r * x + cam.translation;
  const Eigen::Vector2d q = -p.head<2>() / p.z();
  const double r2 = q.squaredNorm();
  return cam.focal * (1.0 + cam.k1 * r2 + cam.k2 * r2 * r2) * q;
}

Outcome bal() {
  const SyntheticScene scene = scene_of(10, 80, 9, 0.0, 0, 0);
  const BalDataset data = problem_to_bal(scene_problem(scene, Parameterization::euclidean));
  std::ostringstream first;
  serialize_bal(data, first);
  std::istringstream in(first.str());
  std::ostringstream second;
  serialize_bal(parse_bal(in), second);
  const bool lossless = first.str() == second.str();

  const BaProblem converted = bal_to_problem(data).problem;
  const auto& pts = std::get<std::vector<EuclideanFeature>>(converted.features);
  double worst_px = 0.0;
  for (std::size_t o = 0; o < converted.observations.size(); ++o) {
    const auto& obs = converted.observations[o];
    const auto& pose = converted.poses[obs.pose_id];
    const Eigen::Vector2d ours = project(converted.intrinsics_for(obs.pose_id),
                                         pose.rotation.transpose() * (pts[obs.feature_id].point - pose.position));
    const auto& bo = data.observations[o];
    const Eigen::Vector2d theirs = bal_projection(data.cameras[bo.camera], data.points[bo.point]);
    worst_px = std::max({worst_px, (ours - obs.pixel).norm(), (theirs - Eigen::Vector2d(bo.x, bo.y)).norm()});
  }

  // Optimization run on a BAL file: the user-provided one, else a synthetic stand-in.
  std::string source;
  BalDataset run_data;
  if (const char* env = std::getenv("PMBA_BAL_FILE"); env != nullptr && *env != '\0') {
    run_data = read_bal(env);
    source = fs::path(env).filename().string();
  } else {
    const SyntheticScene s = scene_of(12, 150, 19, 0.5, 1, 0);
    BaProblem p = scene_problem(s, Parameterization::euclidean);
    perturb_poses(p, 0.01, 3);
    perturb_points(p, 0.02, 4);
    const fs::path file = fs::temp_directory_path() / "pmba_acceptance_standin.bal";
    write_bal(problem_to_bal(p), file);
    run_data = read_bal(file);
    source = "synthetic stand-in (no public BAL file offline; set PMBA_BAL_FILE)";
  }
  const BaProblem start = convert_parameterization(bal_to_problem(run_data).problem, Parameterization::parallax);
  const OptimizeResult r = optimize(start, SolverConfig{Method::dogleg});
  const double reduction = r.summary.records.front().chi2_uv / r.summary.records.back().chi2_uv;
  const bool small = run_data.cameras.size() <= 50;
  Outcome o;
  o.pass = lossless && worst_px < 1e-6 && reduction >= 10.0 && r.summary.converged() && small;
  o.detail = std::string("round trip ") + (lossless ? "lossless" : "LOSSY") + ", reprojection max " + fmt(worst_px) +
             " px; " + source + ": chi2_uv reduced " + fmt(reduction) + "x, " + to_string(r.summary.termination);
  return o;
}

// ------------------------------------------------------------------ 10

Outcome determinism(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not given"};
  const fs::path root = fs::temp_directory_path() / "pmba_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::string> steps = {
      "simulate --seed 3 --poses 6 --features 60 --noise 0.5 --init-noise 0.01 --bal",
      "optimize -i {d}/problem.json --param pmba --method dl",
      "optimize -i {d}/problem.json --param xyz --method lm --max-iterations 20",
      "compare -i {d}/problem.json --max-iterations 30",
      "init -i {d}/problem.json --bundle",
  };
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    for (std::string step : steps) {
      for (auto pos = step.find("{d}"); pos != std::string::npos; pos = step.find("{d}")) step.replace(pos, 3, dir.string());
      const std::string cmd = "\"" + cli + "\" " + step + " -o \"" + dir.string() + "\" > /dev/null 2>&1";
      const int code = std::system(cmd.c_str());
      if (code != 0) return {false, "command failed: " + step};
    }
  }
  int files = 0;
  std::vector<std::string> differing;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const std::string name = entry.path().filename().string();
    if (name == "timing.csv") continue;
    ++files;
    const fs::path other = root / "b" / name;
    if (!fs::exists(other) || read_file(entry.path()) != read_file(other)) differing.push_back(name);
  }
  std::string detail = std::to_string(files) + " data files compared";
  for (const auto& d : differing) detail += ", differs: " + d;
  return {differing.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  struct Criterion {
    int id;
    std::string name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "feature information structure", 30, feature_information},
      {2, "conditioning contrast", 10, conditioning},
      {3, "error-function identities", 0, ray_identities},
      {4, "Jacobian correctness", 0, jacobians},
      {5, "Schur equivalence", 0, schur},
      {6, "convex initialization", 60, convex_initialization},
      {7, "end-to-end pipeline", 120, end_to_end},
      {8, "rotation averaging", 0, rotation_averaging},
      {9, "BAL ingestion", 0, bal},
      {10, "CLI determinism", 0, [&] { return determinism(cli); }},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.budget_s) + " s budget";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << std::fixed << std::setprecision(2) << secs << " s]" << std::defaultfloat << std::endl;
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria pass" << std::endl;
  return failed > 0 ? 1 : 0;
}

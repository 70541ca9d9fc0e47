#include "pmba/global_init.hpp"

#include "pmba/qp.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <map>
#include <random>
#include <set>

namespace pmba {
namespace {

using PairIndex = std::map<std::pair<int, int>, const EgPair*>;

PairIndex index_pairs(const std::vector<EgPair>& pairs) {
  PairIndex out;
  for (const auto& p : pairs) out[{std::min(p.i, p.k), std::max(p.i, p.k)}] = &p;
  return out;
}

// World-frame unit direction from pose `from` to pose `to` of an EG pair.
Eigen::Vector3d world_direction(const EgPair& pair, const std::vector<Eigen::Matrix3d>& rotations, int from) {
  const Eigen::Vector3d d = rotations[pair.i] * pair.direction;
  return from == pair.i ? d : Eigen::Vector3d(-d);
}

}  // namespace

FeatureInit initialize_features(const BaProblem& tracks, const std::vector<Eigen::Matrix3d>& rotations,
                                const std::vector<EgPair>& pairs) {
  const PairIndex index = index_pairs(pairs);
  std::map<int, std::map<int, Eigen::Vector3d>> rays;  // feature -> pose -> measured ray
  for (const auto& obs : tracks.observations) rays[obs.feature_id].emplace(obs.pose_id, obs.measured_ray);

  FeatureInit out;
  for (const auto& [feature, observers] : rays) {
    if (observers.size() < 2) {
      out.dropped_features.push_back(feature);
      continue;
    }
    double best_eg = -1.0, best_any = -1.0;
    std::pair<int, int> eg{-1, -1}, any{-1, -1};
    for (auto a = observers.begin(); a != observers.end(); ++a) {
      const Eigen::Vector3d wa = rotations[a->first] * a->second;
      for (auto b = std::next(a); b != observers.end(); ++b) {
        const double angle = angle_between(wa, (rotations[b->first] * b->second).eval());
        if (angle > best_any) {
          best_any = angle;
          any = {a->first, b->first};
        }
        if (index.count({a->first, b->first}) != 0 && angle > best_eg) {
          best_eg = angle;
          eg = {a->first, b->first};
        }
      }
    }
    const bool anchored = eg.first >= 0;
    const auto chosen = anchored ? eg : any;
    ParallaxFeature f;
    f.main_anchor = chosen.first;
    f.assoc_anchor = chosen.second;
    f.theta = std::clamp(anchored ? best_eg : best_any, 1e-10, M_PI - 1e-10);
    f.ray = observers.at(chosen.first).normalized();
    out.features.push_back(f);
    out.source_feature.push_back(feature);
    out.eg_anchored.push_back(anchored);
  }
  return out;
}

Eigen::Matrix3d anchor_rotation(const Eigen::Vector3d& anchor_direction, const Eigen::Vector3d& main_ray_world) {
  const Eigen::Vector3d u = anchor_direction.normalized();
  const Eigen::Vector3d w = main_ray_world.normalized();
  const double alpha = angle_between((-u).eval(), w);
  Eigen::Vector3d axis = u.cross(w);
  if (axis.norm() < 1e-12) {
    // Parallel rays: any axis orthogonal to u does the (trivial or half-turn) rotation.
    axis = tangent_basis(u).col(0);
  }
  return exp_so3((axis.normalized() * (M_PI - alpha)).eval());
}

Eigen::Vector3d LinearRay::evaluate(const std::vector<Eigen::Vector3d>& positions) const {
  return a_main * positions[main] + a_assoc * positions[assoc] + a_observer * positions[observer];
}

ConvexPositionProblem build_convex_problem(const BaProblem& tracks, const std::vector<Eigen::Matrix3d>& rotations,
                                           const FeatureInit& init, const std::vector<EgPair>& pairs,
                                           int fixed_pose) {
  const PairIndex index = index_pairs(pairs);
  ConvexPositionProblem out;
  out.num_poses = static_cast<int>(rotations.size());
  out.fixed_pose = fixed_pose;
  out.huber_scale = tracks.huber_scale;

  // Scale gauge: the EG pair at the fixed pose with the most inliers.
  const EgPair* gauge_pair = nullptr;
  for (const auto& p : pairs) {
    if (p.i != fixed_pose && p.k != fixed_pose) continue;
    if (gauge_pair == nullptr || p.inliers.size() > gauge_pair->inliers.size()) gauge_pair = &p;
  }
  if (gauge_pair == nullptr) throw DataError("fixed pose has no EG pair to set the scale");
  out.scale_pose = gauge_pair->i == fixed_pose ? gauge_pair->k : gauge_pair->i;
  const Eigen::Vector3d d = world_direction(*gauge_pair, rotations, fixed_pose);
  d.cwiseAbs().maxCoeff(&out.scale_axis);
  out.scale_value = d[out.scale_axis] >= 0.0 ? 1.0 : -1.0;

  std::map<int, int> kept;  // source feature -> init index
  for (std::size_t j = 0; j < init.source_feature.size(); ++j) kept[init.source_feature[j]] = static_cast<int>(j);
  std::vector<Eigen::Matrix3d> rotation_of(init.features.size());
  std::vector<double> s1(init.features.size()), s2(init.features.size());
  for (std::size_t j = 0; j < init.features.size(); ++j) {
    if (!init.eg_anchored[j]) {
      ++out.skipped_features;
      continue;
    }
    const auto& f = init.features[j];
    const EgPair& pair = *index.at({std::min(f.main_anchor, f.assoc_anchor), std::max(f.main_anchor, f.assoc_anchor)});
    const Eigen::Vector3d u = world_direction(pair, rotations, f.main_anchor);
    const Eigen::Vector3d w = rotations[f.main_anchor] * f.ray;
    const double alpha = angle_between((-u).eval(), w);
    rotation_of[j] = anchor_rotation(u, w);
    s1[j] = std::sin(alpha - f.theta);
    s2[j] = std::sin(f.theta);
  }
  for (const auto& obs : tracks.observations) {
    const auto it = kept.find(obs.feature_id);
    if (it == kept.end() || !init.eg_anchored[it->second]) continue;
    const auto j = static_cast<std::size_t>(it->second);
    const auto& f = init.features[j];
    LinearRay ray;
    ray.main = f.main_anchor;
    ray.assoc = f.assoc_anchor;
    ray.observer = obs.pose_id;
    ray.a_assoc = s1[j] * rotation_of[j];
    ray.a_main = -s1[j] * rotation_of[j] + s2[j] * Eigen::Matrix3d::Identity();
    ray.a_observer = -s2[j] * Eigen::Matrix3d::Identity();
    ray.observer_rotation = rotations[obs.pose_id];
    ray.target = rotations[obs.pose_id] * obs.measured_ray;
    ray.weight = obs.weight;
    out.rays.push_back(ray);
  }
  return out;
}

double convex_cost(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& positions,
                   int* skipped) {
  double sum = 0.0;
  int skip = 0;
  for (const auto& ray : problem.rays) {
    const Eigen::Vector3d n = ray.evaluate(positions);
    const double norm = n.norm();
    if (!(norm > 1e-14)) {
      ++skip;
      continue;
    }
    sum += ray.weight * (n / norm - ray.target).squaredNorm();
  }
  if (skipped != nullptr) *skipped = skip;
  return sum;
}

double qplc_objective(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& positions) {
  double sum = 0.0;
  for (const auto& ray : problem.rays) sum += ray.weight * ray.target.cross(ray.evaluate(positions)).squaredNorm();
  return sum;
}

GaugeMap gauge_map(const ConvexPositionProblem& problem) {
  GaugeMap out;
  out.index.assign(static_cast<std::size_t>(3 * problem.num_poses), -1);
  for (int p = 0; p < problem.num_poses; ++p) {
    if (p == problem.fixed_pose) continue;
    for (int c = 0; c < 3; ++c) {
      if (p == problem.scale_pose && c == problem.scale_axis) continue;
      out.index[static_cast<std::size_t>(3 * p + c)] = out.unknowns++;
    }
  }
  return out;
}

std::vector<Eigen::Vector3d> expand_positions(const ConvexPositionProblem& problem, const Eigen::VectorXd& x) {
  const GaugeMap map = gauge_map(problem);
  std::vector<Eigen::Vector3d> out(static_cast<std::size_t>(problem.num_poses), Eigen::Vector3d::Zero());
  for (int p = 0; p < problem.num_poses; ++p)
    for (int c = 0; c < 3; ++c) {
      const int idx = map.index[static_cast<std::size_t>(3 * p + c)];
      if (idx >= 0) out[p][c] = x[idx];
    }
  if (problem.scale_pose != problem.fixed_pose) out[problem.scale_pose][problem.scale_axis] = problem.scale_value;
  return out;
}

namespace {

// N = B x + b for one ray in the free unknowns.
void ray_affine(const ConvexPositionProblem& problem, const GaugeMap& map, const LinearRay& ray, Eigen::MatrixXd& b_mat,
                Eigen::Vector3d& b_vec) {
  b_mat.setZero(3, map.unknowns);
  b_vec.setZero();
  const std::pair<int, const Eigen::Matrix3d*> blocks[3] = {
      {ray.main, &ray.a_main}, {ray.assoc, &ray.a_assoc}, {ray.observer, &ray.a_observer}};
  for (const auto& [pose, a] : blocks) {
    for (int c = 0; c < 3; ++c) {
      const int idx = map.index[static_cast<std::size_t>(3 * pose + c)];
      if (idx >= 0)
        b_mat.col(idx) += a->col(c);
      else if (pose == problem.scale_pose && c == problem.scale_axis && pose != problem.fixed_pose)
        b_vec += problem.scale_value * a->col(c);
    }
  }
}

}  // namespace

void qplc_quadratic(const ConvexPositionProblem& problem, Eigen::MatrixXd& q, Eigen::VectorXd& c) {
  const GaugeMap map = gauge_map(problem);
  q.setZero(map.unknowns, map.unknowns);
  c.setZero(map.unknowns);
  Eigen::MatrixXd b_mat;
  Eigen::Vector3d b_vec;
  for (const auto& ray : problem.rays) {
    ray_affine(problem, map, ray, b_mat, b_vec);
    const Eigen::Matrix3d s = skew(ray.target);
    const Eigen::Matrix3d w = ray.weight * s.transpose() * s;
    const Eigen::MatrixXd wb = w * b_mat;
    q.noalias() += 2.0 * b_mat.transpose() * wb;
    c.noalias() += 2.0 * wb.transpose() * b_vec;
  }
}

QplcResult qplc_bootstrap(const ConvexPositionProblem& problem, bool enforce_cheirality) {
  if (problem.rays.empty()) throw NumericalError("QPLC has no observations");
  const GaugeMap map = gauge_map(problem);
  Eigen::MatrixXd q;
  Eigen::VectorXd c;
  qplc_quadratic(problem, q, c);
  QplcResult out;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q, Eigen::EigenvaluesOnly);
  const double max_eig = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (!(max_eig > 0.0)) throw NumericalError("QPLC quadratic form is zero");
  if (eig.eigenvalues().minCoeff() <= 1e-12 * max_eig) {
    q.diagonal().array() += 1e-12;
    out.regularized = true;
  }

  Eigen::MatrixXd cons(map.unknowns, enforce_cheirality ? problem.rays.size() : 0);
  Eigen::VectorXd offset(cons.cols());
  if (enforce_cheirality) {
    Eigen::MatrixXd b_mat;
    Eigen::Vector3d b_vec;
    for (std::size_t r = 0; r < problem.rays.size(); ++r) {
      const auto& ray = problem.rays[r];
      ray_affine(problem, map, ray, b_mat, b_vec);
      const Eigen::Vector3d forward = ray.observer_rotation.col(2);  // z(R^T N) = (R e3) . N
      cons.col(static_cast<Eigen::Index>(r)) = b_mat.transpose() * forward;
      offset[static_cast<Eigen::Index>(r)] = forward.dot(b_vec);
    }
  }
  const QpResult qp = solve_qp(q, c, cons, offset);
  out.positions = expand_positions(problem, qp.x);
  out.objective = qplc_objective(problem, out.positions);
  out.active_constraints = static_cast<int>(qp.active.size());
  out.iterations = qp.iterations;
  out.feasible = qp.feasible;
  out.min_constraint = std::numeric_limits<double>::infinity();
  for (const auto& ray : problem.rays)
    out.min_constraint = std::min(out.min_constraint, ray.observer_rotation.col(2).dot(ray.evaluate(out.positions)));
  return out;
}

PositionGraphModel::PositionGraphModel(const ConvexPositionProblem& problem, std::vector<Eigen::Vector3d> positions)
    : problem_(&problem), positions_(std::move(positions)) {
  if (static_cast<int>(positions_.size()) != problem.num_poses) throw DataError("position count mismatch");
}

bool PositionGraphModel::is_fixed(int pose, int coordinate) const {
  return pose == problem_->fixed_pose || (pose == problem_->scale_pose && coordinate == problem_->scale_axis);
}

void PositionGraphModel::linearize(std::vector<LinearizedTerm>& terms) const {
  terms.clear();
  terms.reserve(problem_->rays.size());
  for (const auto& ray : problem_->rays) {
    const Eigen::Vector3d n = ray.evaluate(positions_);
    const double norm = n.norm();
    if (!(norm > 1e-14)) continue;
    const Eigen::Vector3d unit = n / norm;
    const Eigen::Vector3d r = unit - ray.target;
    const double scale = std::sqrt(ray.weight) * robust_sqrt_weight(r.squaredNorm(), problem_->huber_scale);
    const Eigen::Matrix3d proj = scale * (Eigen::Matrix3d::Identity() - unit * unit.transpose()) / norm;
    LinearizedTerm term;
    term.residual = scale * r;
    term.add_pose(ray.main, proj * ray.a_main);
    term.add_pose(ray.assoc, proj * ray.a_assoc);
    term.add_pose(ray.observer, proj * ray.a_observer);
    terms.push_back(std::move(term));
  }
}

double PositionGraphModel::cost() const {
  double sum = 0.0;
  for (const auto& ray : problem_->rays) {
    const Eigen::Vector3d n = ray.evaluate(positions_);
    const double norm = n.norm();
    if (!(norm > 1e-14)) continue;
    sum += ray.weight * robust_cost((n / norm - ray.target).squaredNorm(), problem_->huber_scale);
  }
  return std::isfinite(sum) ? sum : std::numeric_limits<double>::infinity();
}

std::unique_ptr<LeastSquaresModel> PositionGraphModel::clone() const {
  return std::make_unique<PositionGraphModel>(*this);
}

void PositionGraphModel::retract(const Eigen::VectorXd& pose_step, const Eigen::VectorXd&) {
  for (int p = 0; p < problem_->num_poses; ++p)
    for (int c = 0; c < 3; ++c)
      if (!is_fixed(p, c)) positions_[p][c] += pose_step[3 * p + c];
}

ConvexResult convex_pose_graph(const ConvexPositionProblem& problem, const std::vector<Eigen::Vector3d>& start,
                               const SolverConfig& config) {
  PositionGraphModel model(problem, start);
  ConvexResult out;
  out.summary = optimize(model, config);
  out.positions = model.positions();
  out.cost = convex_cost(problem, out.positions, &out.skipped_observations);
  return out;
}

std::vector<Eigen::Vector3d> random_positions(const ConvexPositionProblem& problem, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::Vector3d> out(static_cast<std::size_t>(problem.num_poses));
  for (auto& p : out)
    for (int c = 0; c < 3; ++c) p[c] = normal(rng);
  out[problem.fixed_pose].setZero();
  if (problem.scale_pose != problem.fixed_pose) out[problem.scale_pose][problem.scale_axis] = problem.scale_value;
  return out;
}

}  // namespace pmba

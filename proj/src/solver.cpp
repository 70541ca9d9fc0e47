#include "pmba/solver.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <set>
#include <tuple>

namespace pmba {

namespace {

constexpr double kBlockConditionLimit = 1e14;
constexpr double kBlockRidge = 1e-10;

Eigen::MatrixXd& block_at(std::map<std::pair<int, int>, Eigen::MatrixXd>& blocks, int p, int q, int rows,
                          int cols) {
  auto [it, inserted] = blocks.try_emplace({p, q});
  if (inserted) it->second = Eigen::MatrixXd::Zero(rows, cols);
  return it->second;
}

double block_condition(const Eigen::MatrixXd& block, double* min_eig = nullptr, double* max_eig = nullptr) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(block, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (min_eig != nullptr) *min_eig = lo;
  if (max_eig != nullptr) *max_eig = hi;
  return lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
}

}  // namespace

void LinearizedTerm::add_pose(int id, const PoseJacobian& jacobian) {
  for (int k = 0; k < num_poses; ++k) {
    if (pose[static_cast<std::size_t>(k)] == id) {
      pose_jacobian[static_cast<std::size_t>(k)] += jacobian;
      return;
    }
  }
  pose[static_cast<std::size_t>(num_poses)] = id;
  pose_jacobian[static_cast<std::size_t>(num_poses)] = jacobian;
  ++num_poses;
}

SchurSystem build_normal_equations(const LeastSquaresModel& model) {
  SchurSystem sys;
  sys.num_poses = model.num_poses();
  sys.pose_dim = model.pose_dim();
  sys.num_features = model.num_features();
  sys.feature_dim = model.feature_dim();
  const int pd = sys.pose_dim;
  const int fd = sys.feature_dim;
  sys.htf.resize(static_cast<std::size_t>(sys.num_features));
  sys.hff.assign(static_cast<std::size_t>(sys.num_features), Eigen::MatrixXd::Zero(fd, fd));
  sys.gradient_pose = Eigen::VectorXd::Zero(sys.pose_unknowns());
  sys.gradient_feature = Eigen::VectorXd::Zero(sys.feature_unknowns());

  std::vector<LinearizedTerm> terms;
  model.linearize(terms);

  // Terms are accumulated in model order, so repeated builds are bitwise equal.
  for (auto& term : terms) {
    for (int k = 0; k < term.num_poses; ++k) {
      const int p = term.pose[static_cast<std::size_t>(k)];
      auto& jac = term.pose_jacobian[static_cast<std::size_t>(k)];
      for (int c = 0; c < pd; ++c)
        if (model.is_fixed(p, c)) jac.col(c).setZero();
    }
    sys.chi2 += term.residual.squaredNorm();
    for (int k = 0; k < term.num_poses; ++k) {
      const int p = term.pose[static_cast<std::size_t>(k)];
      const auto& jp = term.pose_jacobian[static_cast<std::size_t>(k)];
      sys.gradient_pose.segment(p * pd, pd) += jp.transpose() * term.residual;
      for (int l = 0; l < term.num_poses; ++l) {
        const int q = term.pose[static_cast<std::size_t>(l)];
        if (q < p) continue;
        block_at(sys.htt, p, q, pd, pd) += jp.transpose() * term.pose_jacobian[static_cast<std::size_t>(l)];
      }
    }
    if (term.feature >= 0) {
      const auto j = static_cast<std::size_t>(term.feature);
      const auto& jf = term.feature_jacobian;
      sys.hff[j] += jf.transpose() * jf;
      sys.gradient_feature.segment(term.feature * fd, fd) += jf.transpose() * term.residual;
      for (int k = 0; k < term.num_poses; ++k) {
        const int p = term.pose[static_cast<std::size_t>(k)];
        auto [it, inserted] = sys.htf[j].try_emplace(p);
        if (inserted) it->second = Eigen::MatrixXd::Zero(pd, fd);
        it->second += term.pose_jacobian[static_cast<std::size_t>(k)].transpose() * jf;
      }
    }
  }

  for (int p = 0; p < sys.num_poses; ++p)
    for (int c = 0; c < pd; ++c)
      if (model.is_fixed(p, c)) block_at(sys.htt, p, p, pd, pd)(c, c) = 1.0;
  return sys;
}

SchurSystem build_normal_equations(const BaProblem& problem) {
  return build_normal_equations(BundleModel(problem));
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> dense_normal_equations(const SchurSystem& sys) {
  const int nt = sys.pose_unknowns();
  const int n = nt + sys.feature_unknowns();
  const int pd = sys.pose_dim;
  const int fd = sys.feature_dim;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
  for (const auto& [key, block] : sys.htt) {
    h.block(key.first * pd, key.second * pd, pd, pd) = block;
    if (key.first != key.second) h.block(key.second * pd, key.first * pd, pd, pd) = block.transpose();
  }
  for (int j = 0; j < sys.num_features; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    h.block(nt + j * fd, nt + j * fd, fd, fd) = sys.hff[ju];
    for (const auto& [p, block] : sys.htf[ju]) {
      h.block(p * pd, nt + j * fd, pd, fd) = block;
      h.block(nt + j * fd, p * pd, fd, pd) = block.transpose();
    }
  }
  Eigen::VectorXd g(n);
  g << sys.gradient_pose, sys.gradient_feature;
  return {h, g};
}

Eigen::MatrixXd ReducedSystem::dense() const {
  const int n = num_poses * pose_dim;
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
  for (const auto& [key, block] : blocks) {
    s.block(key.first * pose_dim, key.second * pose_dim, pose_dim, pose_dim) = block;
    if (key.first != key.second)
      s.block(key.second * pose_dim, key.first * pose_dim, pose_dim, pose_dim) = block.transpose();
  }
  return s;
}

Eigen::SparseMatrix<double> ReducedSystem::sparse() const {
  const int n = num_poses * pose_dim;
  std::vector<Eigen::Triplet<double>> triplets;
  for (const auto& [key, block] : blocks) {
    for (int r = 0; r < pose_dim; ++r) {
      for (int c = 0; c < pose_dim; ++c) {
        const double v = block(r, c);
        if (v == 0.0) continue;
        triplets.emplace_back(key.first * pose_dim + r, key.second * pose_dim + c, v);
        if (key.first != key.second) triplets.emplace_back(key.second * pose_dim + c, key.first * pose_dim + r, v);
      }
    }
  }
  Eigen::SparseMatrix<double> s(n, n);
  s.setFromTriplets(triplets.begin(), triplets.end());
  return s;
}

ReducedSystem schur_reduce(const SchurSystem& sys, double lambda) {
  ReducedSystem red;
  red.num_poses = sys.num_poses;
  red.pose_dim = sys.pose_dim;
  const int pd = sys.pose_dim;
  const int fd = sys.feature_dim;
  red.blocks = sys.htt;
  for (int p = 0; p < sys.num_poses; ++p) {
    auto& diag = block_at(red.blocks, p, p, pd, pd);
    diag.diagonal().array() += lambda;
  }
  red.rhs = -sys.gradient_pose;
  red.hff_inverse.resize(static_cast<std::size_t>(sys.num_features));

  for (int j = 0; j < sys.num_features; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    Eigen::MatrixXd hjj = sys.hff[ju];
    hjj.diagonal().array() += lambda;
    if (block_condition(hjj) > kBlockConditionLimit) {
      const double ridge = kBlockRidge * std::max(hjj.trace(), std::numeric_limits<double>::min());
      hjj.diagonal().array() += ridge;
      ++red.regularized_blocks;
    }
    const Eigen::MatrixXd inv = hjj.ldlt().solve(Eigen::MatrixXd::Identity(fd, fd));
    red.hff_inverse[ju] = inv;
    const Eigen::VectorXd gf = sys.gradient_feature.segment(j * fd, fd);
    const Eigen::VectorXd inv_gf = inv * gf;
    for (auto it = sys.htf[ju].begin(); it != sys.htf[ju].end(); ++it) {
      const int p = it->first;
      const Eigen::MatrixXd w_inv = it->second * inv;
      red.rhs.segment(p * pd, pd) += it->second * inv_gf;
      for (auto jt = it; jt != sys.htf[ju].end(); ++jt)
        block_at(red.blocks, p, jt->first, pd, pd) -= w_inv * jt->second.transpose();
    }
  }
  return red;
}

Eigen::VectorXd solve_reduced(const ReducedSystem& red, int dense_pose_threshold, bool* ok) {
  const int n = red.num_poses * red.pose_dim;
  if (ok != nullptr) *ok = true;
  if (n == 0) return Eigen::VectorXd::Zero(0);
  Eigen::VectorXd x;
  bool success = true;
  if (red.num_poses < dense_pose_threshold) {
    Eigen::LLT<Eigen::MatrixXd> llt(red.dense());
    success = llt.info() == Eigen::Success;
    if (success) x = llt.solve(red.rhs);
  } else {
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::NaturalOrdering<int>> llt(red.sparse());
    success = llt.info() == Eigen::Success;
    if (success) x = llt.solve(red.rhs);
  }
  if (success && !x.allFinite()) success = false;
  if (ok != nullptr) *ok = success;
  if (!success) return Eigen::VectorXd::Zero(n);
  return x;
}

Eigen::VectorXd back_substitute(const SchurSystem& sys, const ReducedSystem& red, const Eigen::VectorXd& pose_step) {
  const int pd = sys.pose_dim;
  const int fd = sys.feature_dim;
  Eigen::VectorXd df(sys.feature_unknowns());
  for (int j = 0; j < sys.num_features; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    Eigen::VectorXd rhs = -sys.gradient_feature.segment(j * fd, fd);
    for (const auto& [p, block] : sys.htf[ju]) rhs -= block.transpose() * pose_step.segment(p * pd, pd);
    df.segment(j * fd, fd) = red.hff_inverse[ju] * rhs;
  }
  return df;
}

std::vector<std::pair<int, int>> reduced_sparsity(const SchurSystem& sys) {
  std::set<std::pair<int, int>> pattern;
  for (const auto& [key, block] : sys.htt)
    if (!block.isZero(0.0)) pattern.insert(key);
  for (const auto& coupling : sys.htf)
    for (auto it = coupling.begin(); it != coupling.end(); ++it)
      for (auto jt = it; jt != coupling.end(); ++jt) pattern.insert({it->first, jt->first});
  return {pattern.begin(), pattern.end()};
}

ConditionDiagnostics condition_diagnostics(const SchurSystem& sys) {
  ConditionDiagnostics d;
  if (sys.num_features == 0 || sys.feature_dim == 0) return d;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& block : sys.hff) {
    double bmin = 0.0;
    double bmax = 0.0;
    d.block_condition.push_back(block_condition(block, &bmin, &bmax));
    d.block_min_eigenvalue.push_back(bmin);
    d.block_max_eigenvalue.push_back(bmax);
    lo = std::min(lo, bmin);
    hi = std::max(hi, bmax);
  }
  d.min_eigenvalue = lo;
  d.max_eigenvalue = hi;
  d.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  return d;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::gauss_newton: return "gn";
    case Method::levenberg_marquardt: return "lm";
    case Method::dogleg: return "dl";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "gn") return Method::gauss_newton;
  if (name == "lm") return Method::levenberg_marquardt;
  if (name == "dl") return Method::dogleg;
  throw DataError("unknown solver method '" + name + "'");
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::converged_gradient: return "converged_gradient";
    case Termination::converged_step: return "converged_step";
    case Termination::max_iterations: return "max_iterations";
    case Termination::gn_singular: return "gn_singular";
    case Termination::gn_diverged: return "gn_diverged";
    case Termination::no_progress: return "no_progress";
  }
  return "unknown";
}

StepResult solve_damped(const SchurSystem& sys, double lambda, int dense_pose_threshold) {
  StepResult step;
  const ReducedSystem red = schur_reduce(sys, lambda);
  step.regularized_blocks = red.regularized_blocks;
  step.pose_step = solve_reduced(red, dense_pose_threshold, &step.ok);
  step.feature_step = back_substitute(sys, red, step.pose_step);
  if (!step.feature_step.allFinite()) step.ok = false;
  return step;
}

StepResult step_gn(const SchurSystem& sys, const SolverConfig& config) {
  return solve_damped(sys, 0.0, config.dense_pose_threshold);
}

StepResult step_lm(const SchurSystem& sys, const SolverConfig& config, double lambda) {
  return solve_damped(sys, lambda, config.dense_pose_threshold);
}

double hessian_quadratic(const SchurSystem& sys, const Eigen::VectorXd& dt, const Eigen::VectorXd& df) {
  const int pd = sys.pose_dim;
  const int fd = sys.feature_dim;
  double q = 0.0;
  for (const auto& [key, block] : sys.htt) {
    const double v = dt.segment(key.first * pd, pd).dot(block * dt.segment(key.second * pd, pd));
    q += key.first == key.second ? v : 2.0 * v;
  }
  for (int j = 0; j < sys.num_features; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const Eigen::VectorXd x = df.segment(j * fd, fd);
    q += x.dot(sys.hff[ju] * x);
    for (const auto& [p, block] : sys.htf[ju]) q += 2.0 * dt.segment(p * pd, pd).dot(block * x);
  }
  return q;
}

StepResult step_dl(const SchurSystem& sys, const StepResult& gn, double radius) {
  StepResult step;
  const Eigen::VectorXd& gt = sys.gradient_pose;
  const Eigen::VectorXd& gf = sys.gradient_feature;
  const double gn_norm = std::sqrt(gn.pose_step.squaredNorm() + gn.feature_step.squaredNorm());
  if (gn.ok && gn_norm <= radius) {
    step.pose_step = gn.pose_step;
    step.feature_step = gn.feature_step;
    return step;
  }
  const double g2 = gt.squaredNorm() + gf.squaredNorm();
  const double ghg = hessian_quadratic(sys, gt, gf);
  const double g_norm = std::sqrt(g2);
  if (g_norm == 0.0) {
    step.pose_step = Eigen::VectorXd::Zero(gt.size());
    step.feature_step = Eigen::VectorXd::Zero(gf.size());
    return step;
  }
  const double alpha = ghg > 0.0 ? g2 / ghg : radius / g_norm;
  const double sd_norm = alpha * g_norm;
  if (!gn.ok || sd_norm >= radius) {
    step.pose_step = -(radius / g_norm) * gt;
    step.feature_step = -(radius / g_norm) * gf;
    return step;
  }
  // h = a + beta (b - a) with |h| = radius, a = Cauchy point, b = GN step.
  Eigen::VectorXd a(gt.size() + gf.size());
  Eigen::VectorXd b(a.size());
  a << -alpha * gt, -alpha * gf;
  b << gn.pose_step, gn.feature_step;
  const Eigen::VectorXd d = b - a;
  const double aa = a.squaredNorm();
  const double dd = d.squaredNorm();
  const double ad = a.dot(d);
  const double disc = std::sqrt(std::max(0.0, ad * ad + dd * (radius * radius - aa)));
  const double beta = ad <= 0.0 ? (disc - ad) / dd : (radius * radius - aa) / (ad + disc);
  const Eigen::VectorXd h = a + beta * d;
  step.pose_step = h.head(gt.size());
  step.feature_step = h.tail(gf.size());
  return step;
}

OptimizeSummary optimize(LeastSquaresModel& model, const SolverConfig& config) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  OptimizeSummary summary;

  SchurSystem sys = build_normal_equations(model);
  double cost = model.cost();
  summary.initial_cost = cost;

  const auto record = [&](int iteration, double step_norm, double damping) {
    IterationRecord r;
    r.iteration = iteration;
    r.chi2_ray = model.chi2_ray();
    r.chi2_uv = model.chi2_uv();
    r.step_norm = step_norm;
    r.damping_or_radius = damping;
    if (config.diagnostics) {
      const ConditionDiagnostics d = condition_diagnostics(sys);
      r.cond_hff = d.condition;
      r.min_eig_hff = d.min_eigenvalue;
    } else {
      r.cond_hff = std::numeric_limits<double>::quiet_NaN();
      r.min_eig_hff = std::numeric_limits<double>::quiet_NaN();
    }
    r.linear_solves = summary.linear_solves;
    r.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    summary.records.push_back(r);
  };
  const auto gradient_inf = [&] {
    double m = 0.0;
    if (sys.gradient_pose.size() > 0) m = sys.gradient_pose.cwiseAbs().maxCoeff();
    if (sys.gradient_feature.size() > 0) m = std::max(m, sys.gradient_feature.cwiseAbs().maxCoeff());
    return m;
  };

  double lambda = 0.0;
  if (config.method == Method::levenberg_marquardt) {
    double trace = 0.0;
    int count = 0;
    for (const auto& [key, block] : sys.htt)
      if (key.first == key.second) trace += block.trace(), count += sys.pose_dim;
    for (const auto& block : sys.hff) trace += block.trace(), count += sys.feature_dim;
    lambda = config.initial_lambda_scale * (count > 0 ? trace / count : 1.0);
    if (!(lambda > 0.0)) lambda = config.initial_lambda_scale;
  }
  double radius = config.initial_radius;
  const auto damping = [&] {
    return config.method == Method::levenberg_marquardt ? lambda
           : config.method == Method::dogleg             ? radius
                                                         : 0.0;
  };

  record(0, 0.0, damping());
  if (gradient_inf() < config.gradient_tolerance || cost == 0.0) {
    summary.termination = Termination::converged_gradient;
    summary.final_cost = cost;
    return summary;
  }

  summary.termination = Termination::max_iterations;
  for (int iteration = 1; iteration <= config.max_iterations; ++iteration) {
    std::unique_ptr<LeastSquaresModel> accepted;
    StepResult accepted_step;
    double new_cost = cost;
    double step_norm = 0.0;

    const auto try_step = [&](const StepResult& step) {
      auto candidate = model.clone();
      candidate->retract(step.pose_step, step.feature_step);
      const double c = candidate->cost();
      const double g_dot_h = sys.gradient_pose.dot(step.pose_step) + sys.gradient_feature.dot(step.feature_step);
      const double predicted = -2.0 * g_dot_h - hessian_quadratic(sys, step.pose_step, step.feature_step);
      const double rho = predicted > 0.0 ? (cost - c) / predicted : (c < cost ? 1.0 : -1.0);
      return std::make_tuple(std::move(candidate), c, rho);
    };

    if (config.method == Method::gauss_newton) {
      const StepResult step = step_gn(sys, config);
      ++summary.linear_solves;
      summary.regularized_blocks += step.regularized_blocks;
      if (!step.ok) {
        summary.termination = Termination::gn_singular;
        break;
      }
      auto [candidate, c, rho] = try_step(step);
      (void)rho;
      if (!(c <= cost)) {
        summary.termination = Termination::gn_diverged;
        break;
      }
      accepted = std::move(candidate);
      accepted_step = step;
      new_cost = c;
      step_norm = std::sqrt(step.pose_step.squaredNorm() + step.feature_step.squaredNorm());
    } else if (config.method == Method::levenberg_marquardt) {
      while (!accepted) {
        const StepResult step = step_lm(sys, config, lambda);
        ++summary.linear_solves;
        summary.regularized_blocks += step.regularized_blocks;
        if (step.ok) {
          auto [candidate, c, rho] = try_step(step);
          if (rho > 0.0 && c <= cost) {
            accepted = std::move(candidate);
            accepted_step = step;
            new_cost = c;
            step_norm = std::sqrt(step.pose_step.squaredNorm() + step.feature_step.squaredNorm());
            lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
            break;
          }
        }
        lambda *= 10.0;
        if (lambda > 1e32) break;
      }
      if (!accepted) {
        summary.termination = Termination::no_progress;
        break;
      }
    } else {
      StepResult gn = step_gn(sys, config);
      ++summary.linear_solves;
      summary.regularized_blocks += gn.regularized_blocks;
      while (!accepted) {
        const StepResult step = step_dl(sys, gn, radius);
        const double norm = std::sqrt(step.pose_step.squaredNorm() + step.feature_step.squaredNorm());
        auto [candidate, c, rho] = try_step(step);
        if (rho > 0.75) {
          radius *= 2.0;
        } else if (rho < 0.25) {
          radius *= 0.5;
        }
        if (rho > 0.0 && c <= cost) {
          accepted = std::move(candidate);
          accepted_step = step;
          new_cost = c;
          step_norm = norm;
          break;
        }
        if (radius < 1e-14) break;
      }
      if (!accepted) {
        summary.termination = Termination::no_progress;
        break;
      }
    }

    // Retraction is deterministic, so replaying the step reproduces the trial state.
    model.retract(accepted_step.pose_step, accepted_step.feature_step);
    const double old_cost = cost;
    cost = new_cost;
    sys = build_normal_equations(model);
    record(iteration, step_norm, damping());

    const double rel_decrease = old_cost > 0.0 ? (old_cost - cost) / old_cost : 0.0;
    if (gradient_inf() < config.gradient_tolerance || cost == 0.0) {
      summary.termination = Termination::converged_gradient;
      break;
    }
    if (rel_decrease < config.relative_chi2_tolerance && step_norm < config.step_tolerance) {
      summary.termination = Termination::converged_step;
      break;
    }
  }
  summary.final_cost = cost;
  return summary;
}

}  // namespace pmba

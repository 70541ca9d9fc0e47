#pragma once

// Dense strictly convex QP with inequality constraints:
//   min 0.5 x^T G x + g^T x   s.t.  C^T x + c >= 0
// solved by the Goldfarb-Idnani dual active-set method. The unconstrained
// minimizer is the starting point, so an inactive constraint set costs one
// Cholesky factorization.

#include <Eigen/Core>

#include <vector>

namespace pmba {

struct QpResult {
  Eigen::VectorXd x;
  double objective = 0.0;
  std::vector<int> active;
  int iterations = 0;
  bool feasible = true;
};

/// G must be symmetric positive definite.
QpResult solve_qp(const Eigen::MatrixXd& g, const Eigen::VectorXd& linear, const Eigen::MatrixXd& c,
                  const Eigen::VectorXd& offset, int max_iterations = 10000);

}  // namespace pmba

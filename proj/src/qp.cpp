#include "pmba/qp.hpp"

#include "pmba/types.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <limits>

namespace pmba {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Rotates columns (a, b) of j by the Givens pair (c, s).
void rotate_columns(Eigen::MatrixXd& j, int a, int b, double c, double s) {
  Eigen::VectorXd ca = j.col(a);
  j.col(a) = c * ca + s * j.col(b);
  j.col(b) = -s * ca + c * j.col(b);
}

// Appends the constraint whose transformed normal is d = J^T n. Returns false
// when it is linearly dependent on the active set.
bool add_constraint(Eigen::MatrixXd& r, Eigen::MatrixXd& j, Eigen::VectorXd& d, int& iq) {
  const int n = static_cast<int>(d.size());
  for (int k = n - 1; k > iq; --k) {
    const double h = std::hypot(d[k - 1], d[k]);
    if (h == 0.0) continue;
    const double c = d[k - 1] / h;
    const double s = d[k] / h;
    rotate_columns(j, k - 1, k, c, s);
    d[k - 1] = h;
    d[k] = 0.0;
  }
  if (std::abs(d[iq]) <= std::numeric_limits<double>::epsilon() * d.norm()) return false;
  r.col(iq).head(iq + 1) = d.head(iq + 1);
  ++iq;
  return true;
}

void delete_constraint(Eigen::MatrixXd& r, Eigen::MatrixXd& j, std::vector<int>& active, std::vector<double>& u,
                       int l, int& iq) {
  for (int k = l; k + 1 < iq; ++k) r.col(k) = r.col(k + 1);
  r.col(iq - 1).setZero();
  active.erase(active.begin() + l);
  u.erase(u.begin() + l);
  --iq;
  for (int k = l; k < iq; ++k) {
    const double h = std::hypot(r(k, k), r(k + 1, k));
    if (h == 0.0) continue;
    const double c = r(k, k) / h;
    const double s = r(k + 1, k) / h;
    for (int col = k; col < iq; ++col) {
      const double a = r(k, col);
      const double b = r(k + 1, col);
      r(k, col) = c * a + s * b;
      r(k + 1, col) = -s * a + c * b;
    }
    rotate_columns(j, k, k + 1, c, s);
  }
}

}  // namespace

QpResult solve_qp(const Eigen::MatrixXd& g, const Eigen::VectorXd& linear, const Eigen::MatrixXd& c,
                  const Eigen::VectorXd& offset, int max_iterations) {
  const int n = static_cast<int>(g.rows());
  const int m = static_cast<int>(c.cols());
  QpResult out;

  Eigen::LLT<Eigen::MatrixXd> llt(g);
  if (llt.info() != Eigen::Success) throw NumericalError("QP matrix is not positive definite");
  out.x = -llt.solve(linear);
  if (m == 0) {
    out.objective = 0.5 * out.x.dot(g * out.x) + linear.dot(out.x);
    return out;
  }

  // J = L^-T so that J^T G J = I; R holds J^T N for the active normals N.
  Eigen::MatrixXd j = llt.matrixU().solve(Eigen::MatrixXd::Identity(n, n));
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, n);
  std::vector<int>& active = out.active;
  std::vector<double> u;
  int iq = 0;
  const double scale = 1.0 + c.cwiseAbs().maxCoeff();
  const double tol = 1e-14 * scale * (1.0 + out.x.cwiseAbs().maxCoeff());

  Eigen::VectorXd x = out.x;
  while (out.iterations < max_iterations) {
    Eigen::VectorXd s = c.transpose() * x + offset;
    int p = -1;
    double worst = -tol;
    for (int i = 0; i < m; ++i) {
      if (s[i] < worst) {
        worst = s[i];
        p = i;
      }
    }
    if (p < 0) break;

    const Eigen::VectorXd np = c.col(p);
    double u_plus = 0.0;
    bool added = false;
    while (!added) {
      ++out.iterations;
      if (out.iterations > max_iterations) break;
      Eigen::VectorXd d = j.transpose() * np;
      Eigen::VectorXd z = j.rightCols(n - iq) * d.tail(n - iq);
      Eigen::VectorXd rv = Eigen::VectorXd::Zero(iq);
      if (iq > 0) rv = r.topLeftCorner(iq, iq).triangularView<Eigen::Upper>().solve(d.head(iq));

      double t1 = kInf;
      int l = -1;
      for (int k = 0; k < iq; ++k) {
        if (rv[k] > 0.0 && u[k] / rv[k] < t1) {
          t1 = u[k] / rv[k];
          l = k;
        }
      }
      const double sp = np.dot(x) + offset[p];
      const double zn = z.dot(np);
      const double t2 = (z.norm() > 1e-14 * (1.0 + np.norm()) && zn > 0.0) ? -sp / zn : kInf;
      const double t = std::min(t1, t2);
      if (t == kInf) {
        out.feasible = false;
        out.x = x;
        out.objective = 0.5 * x.dot(g * x) + linear.dot(x);
        return out;
      }
      if (t2 == kInf) {
        for (int k = 0; k < iq; ++k) u[k] -= t * rv[k];
        u_plus += t;
        delete_constraint(r, j, active, u, l, iq);
        continue;
      }
      x += t * z;
      for (int k = 0; k < iq; ++k) u[k] -= t * rv[k];
      u_plus += t;
      if (t == t2) {
        Eigen::VectorXd dd = j.transpose() * np;
        if (!add_constraint(r, j, dd, iq)) {
          out.feasible = false;
          break;
        }
        active.push_back(p);
        u.push_back(u_plus);
        added = true;
      } else {
        delete_constraint(r, j, active, u, l, iq);
      }
    }
    if (!out.feasible || out.iterations > max_iterations) break;
  }
  out.x = x;
  out.objective = 0.5 * x.dot(g * x) + linear.dot(x);
  return out;
}

}  // namespace pmba

#include "pmba/global_init.hpp"

#include <Eigen/SparseCholesky>

#include <numeric>
#include <sstream>

namespace pmba {

std::vector<std::vector<int>> view_graph_components(int num_poses, const std::vector<EgPair>& pairs) {
  std::vector<int> parent(static_cast<std::size_t>(num_poses));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const auto& p : pairs) {
    const int a = find(p.i), b = find(p.k);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  std::map<int, std::vector<int>> groups;
  for (int v = 0; v < num_poses; ++v) groups[find(v)].push_back(v);
  std::vector<std::vector<int>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  return out;
}

std::vector<Eigen::Matrix3d> chordal_rotation_averaging(int num_poses, const std::vector<EgPair>& pairs) {
  if (num_poses <= 0) return {};
  const auto components = view_graph_components(num_poses, pairs);
  if (components.size() > 1) {
    std::ostringstream msg;
    msg << "view graph is disconnected into " << components.size() << " components:";
    for (const auto& c : components) {
      msg << " {";
      for (std::size_t j = 0; j < c.size(); ++j) msg << (j ? "," : "") << c[j];
      msg << "}";
    }
    throw DataError(msg.str());
  }
  std::vector<Eigen::Matrix3d> out(static_cast<std::size_t>(num_poses), Eigen::Matrix3d::Identity());
  if (num_poses == 1) return out;

  // Row r of every rotation solves y_k - y_i R_ik = 0 with y_0 = e_r; the
  // three rows share the system matrix.
  const int unknowns = 3 * (num_poses - 1);
  auto col = [](int pose, int c) { return 3 * (pose - 1) + c; };
  std::vector<Eigen::Triplet<double>> trips;
  int row = 0;
  for (const auto& p : pairs) {
    for (int c = 0; c < 3; ++c, ++row) {
      if (p.k != 0) trips.emplace_back(row, col(p.k, c), 1.0);
      if (p.i != 0)
        for (int a = 0; a < 3; ++a) trips.emplace_back(row, col(p.i, a), -p.rotation(a, c));
    }
  }
  Eigen::SparseMatrix<double> a(row, unknowns);
  a.setFromTriplets(trips.begin(), trips.end());
  const Eigen::SparseMatrix<double> ata = Eigen::SparseMatrix<double>(a.transpose()) * a;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(ata);
  if (solver.info() != Eigen::Success) throw NumericalError("rotation averaging system is singular");

  std::vector<Eigen::Matrix3d> relaxed(static_cast<std::size_t>(num_poses), Eigen::Matrix3d::Identity());
  for (int r = 0; r < 3; ++r) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(row);
    int rr = 0;
    for (const auto& p : pairs) {
      for (int c = 0; c < 3; ++c, ++rr) {
        // Known y_0 = e_r moved to the right-hand side.
        if (p.k == 0) b[rr] -= (c == r ? 1.0 : 0.0);
        if (p.i == 0) b[rr] += p.rotation(r, c);
      }
    }
    const Eigen::VectorXd y = solver.solve(Eigen::VectorXd(a.transpose() * b));
    for (int pose = 1; pose < num_poses; ++pose) relaxed[pose].row(r) = y.segment<3>(col(pose, 0)).transpose();
  }
  for (int pose = 1; pose < num_poses; ++pose) out[pose] = project_to_so3(relaxed[pose]);
  return out;
}

}  // namespace pmba

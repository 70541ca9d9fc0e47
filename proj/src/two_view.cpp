#include "pmba/global_init.hpp"

#include <Eigen/SVD>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace pmba {
namespace {

// Hartley normalization of image-plane points x = ray / ray.z.
Eigen::Matrix3d normalizing_transform(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& q : pts) mean += q;
  mean /= static_cast<double>(pts.size());
  double spread = 0.0;
  for (const auto& q : pts) spread += (q - mean).norm();
  spread /= static_cast<double>(pts.size());
  const double s = spread > 0.0 ? std::sqrt(2.0) / spread : 1.0;
  Eigen::Matrix3d t;
  t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
  return t;
}

Eigen::Vector2d image_plane(const Eigen::Vector3d& ray) { return ray.head<2>() / ray.z(); }

std::uint64_t pair_seed(std::uint64_t seed, int i, int k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(k)};
  std::uint32_t v[2];
  seq.generate(v, v + 2);
  return (static_cast<std::uint64_t>(v[0]) << 32) | v[1];
}

// Mean angle left after the best pure rotation x_i ~ R x_k.
double pure_rotation_residual(const std::vector<Eigen::Vector3d>& rays_i, const std::vector<Eigen::Vector3d>& rays_k,
                              const std::vector<int>& subset) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  for (int id : subset) m += rays_i[id] * rays_k[id].transpose();
  const Eigen::Matrix3d r = project_to_so3(m);
  double sum = 0.0;
  for (int id : subset) sum += angle_between(rays_i[id], (r * rays_k[id]).eval());
  return sum / static_cast<double>(subset.size());
}

std::vector<int> sample_indices(std::mt19937_64& rng, int n, int count) {
  std::vector<int> out;
  while (static_cast<int>(out.size()) < count) {
    const int v = std::uniform_int_distribution<int>(0, n - 1)(rng);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

}  // namespace

Eigen::Matrix3d essential_eight_point(const std::vector<Eigen::Vector3d>& rays_i,
                                      const std::vector<Eigen::Vector3d>& rays_k) {
  const std::size_t n = rays_i.size();
  if (n < 8 || rays_k.size() != n) throw NumericalError("eight-point needs at least eight correspondences");
  std::vector<Eigen::Vector2d> xi(n), xk(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (rays_i[j].z() <= 0.0 || rays_k[j].z() <= 0.0) throw NumericalError("eight-point needs forward rays");
    xi[j] = image_plane(rays_i[j]);
    xk[j] = image_plane(rays_k[j]);
  }
  const Eigen::Matrix3d ti = normalizing_transform(xi);
  const Eigen::Matrix3d tk = normalizing_transform(xk);
  Eigen::MatrixXd a(std::max<std::size_t>(n, 9), 9);
  a.setZero();
  for (std::size_t j = 0; j < n; ++j) {
    const Eigen::Vector3d u = ti * xi[j].homogeneous();
    const Eigen::Vector3d v = tk * xk[j].homogeneous();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a(static_cast<Eigen::Index>(j), 3 * r + c) = u[r] * v[c];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Eigen::Matrix3d en;
  en << e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8];
  Eigen::Matrix3d out = ti.transpose() * en * tk;
  Eigen::JacobiSVD<Eigen::Matrix3d> s(out, Eigen::ComputeFullU | Eigen::ComputeFullV);
  out = s.matrixU() * Eigen::Vector3d(1, 1, 0).asDiagonal() * s.matrixV().transpose();
  return out;
}

double sampson_error(const Eigen::Matrix3d& e, const Eigen::Vector3d& ray_i, const Eigen::Vector3d& ray_k) {
  const Eigen::Vector3d xi = ray_i / ray_i.z();
  const Eigen::Vector3d xk = ray_k / ray_k.z();
  const Eigen::Vector3d li = e * xk;
  const Eigen::Vector3d lk = e.transpose() * xi;
  const double num = xi.dot(li);
  const double den = li.head<2>().squaredNorm() + lk.head<2>().squaredNorm();
  return den > 0.0 ? num * num / den : std::numeric_limits<double>::infinity();
}

Eigen::Vector2d triangulate_depths(const Eigen::Matrix3d& r, const Eigen::Vector3d& t, const Eigen::Vector3d& ray_i,
                                   const Eigen::Vector3d& ray_k) {
  Eigen::Matrix<double, 3, 2> a;
  a.col(0) = ray_i;
  a.col(1) = -(r * ray_k);
  const Eigen::Matrix2d ata = a.transpose() * a;
  if (std::abs(ata.determinant()) < 1e-18) return Eigen::Vector2d::Zero();
  return ata.ldlt().solve(a.transpose() * t);
}

std::pair<Eigen::Matrix3d, Eigen::Vector3d> decompose_essential(const Eigen::Matrix3d& e,
                                                                const std::vector<Eigen::Vector3d>& rays_i,
                                                                const std::vector<Eigen::Vector3d>& rays_k,
                                                                int* in_front) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if (u.determinant() < 0) u.col(2) *= -1.0;
  if (v.determinant() < 0) v.col(2) *= -1.0;
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d candidates_r[2] = {u * w * v.transpose(), u * w.transpose() * v.transpose()};
  const Eigen::Vector3d t0 = u.col(2);

  int best = -1;
  std::pair<Eigen::Matrix3d, Eigen::Vector3d> out{Eigen::Matrix3d::Identity(), t0};
  for (const auto& r : candidates_r) {
    for (double sign : {1.0, -1.0}) {
      const Eigen::Vector3d t = sign * t0;
      int count = 0;
      for (std::size_t j = 0; j < rays_i.size(); ++j) {
        const Eigen::Vector2d d = triangulate_depths(r, t, rays_i[j], rays_k[j]);
        if (d[0] > 0.0 && d[1] > 0.0) ++count;
      }
      if (count > best) {
        best = count;
        out = {r, t};
      }
    }
  }
  if (in_front != nullptr) *in_front = best;
  return out;
}

bool estimate_eg_pair(const std::vector<Eigen::Vector3d>& rays_i, const std::vector<Eigen::Vector3d>& rays_k,
                      double threshold, int iterations, std::uint64_t seed, Eigen::Matrix3d& rotation,
                      Eigen::Vector3d& direction, std::vector<int>& inliers, std::string& reason) {
  const int n = static_cast<int>(rays_i.size());
  std::vector<int> usable;
  for (int j = 0; j < n; ++j)
    if (rays_i[j].z() > 1e-6 && rays_k[j].z() > 1e-6) usable.push_back(j);
  if (usable.size() < 8) {
    reason = "fewer than 8 forward correspondences";
    return false;
  }
  const double thr2 = threshold * threshold;
  auto subset = [&](const std::vector<int>& ids, std::vector<Eigen::Vector3d>& a, std::vector<Eigen::Vector3d>& b) {
    a.clear();
    b.clear();
    for (int id : ids) {
      a.push_back(rays_i[id]);
      b.push_back(rays_k[id]);
    }
  };
  auto count_inliers = [&](const Eigen::Matrix3d& e) {
    std::vector<int> out;
    for (int id : usable)
      if (sampson_error(e, rays_i[id], rays_k[id]) < thr2) out.push_back(id);
    return out;
  };

  std::mt19937_64 rng(seed);
  std::vector<int> best;
  std::vector<Eigen::Vector3d> a, b;
  const int m = static_cast<int>(usable.size());
  for (int it = 0; it < iterations; ++it) {
    std::vector<int> pick = sample_indices(rng, m, 8);
    for (int& v : pick) v = usable[v];
    subset(pick, a, b);
    Eigen::Matrix3d e;
    try {
      e = essential_eight_point(a, b);
    } catch (const NumericalError&) {
      continue;
    }
    std::vector<int> in = count_inliers(e);
    if (in.size() > best.size()) best = std::move(in);
    if (static_cast<int>(best.size()) == m) break;
  }
  if (best.size() < 8) {
    reason = "RANSAC found fewer than 8 inliers";
    return false;
  }
  Eigen::Matrix3d e;
  for (int refit = 0; refit < 2; ++refit) {
    subset(best, a, b);
    e = essential_eight_point(a, b);
    std::vector<int> in = count_inliers(e);
    if (in.size() < 8) break;
    best = std::move(in);
  }
  if (pure_rotation_residual(rays_i, rays_k, best) < threshold) {
    reason = "zero baseline: a pure rotation explains the inliers";
    return false;
  }
  subset(best, a, b);
  int in_front = 0;
  std::tie(rotation, direction) = decompose_essential(e, a, b, &in_front);
  if (in_front < static_cast<int>(best.size()) / 2) {
    reason = "no factorization places the inliers in front of both cameras";
    return false;
  }
  inliers = std::move(best);
  return true;
}

std::vector<EgPair> estimate_eg_pairs(const BaProblem& tracks, const EgConfig& config,
                                      std::vector<EgDiagnostic>* skipped) {
  const int num_poses = static_cast<int>(tracks.poses.size());
  // feature -> (pose -> observation index)
  std::map<int, std::map<int, int>> by_feature;
  for (std::size_t o = 0; o < tracks.observations.size(); ++o) {
    const auto& obs = tracks.observations[o];
    if (obs.pose_id < 0 || obs.pose_id >= num_poses) throw DataError("observation pose id out of range");
    by_feature[obs.feature_id].emplace(obs.pose_id, static_cast<int>(o));
  }
  std::map<std::pair<int, int>, std::vector<int>> shared;  // (i,k) -> feature ids
  for (const auto& [feature, observers] : by_feature)
    for (auto a = observers.begin(); a != observers.end(); ++a)
      for (auto b = std::next(a); b != observers.end(); ++b) shared[{a->first, b->first}].push_back(feature);

  std::vector<EgPair> pairs;
  for (const auto& [key, features] : shared) {
    const auto [i, k] = key;
    if (static_cast<int>(features.size()) < std::max(config.min_shared, 8)) continue;
    std::vector<Eigen::Vector3d> ri, rk;
    for (int f : features) {
      ri.push_back(tracks.observations[by_feature[f][i]].measured_ray);
      rk.push_back(tracks.observations[by_feature[f][k]].measured_ray);
    }
    const double focal = 0.5 * (tracks.intrinsics_for(i).fx + tracks.intrinsics_for(k).fx);
    EgPair pair;
    pair.i = i;
    pair.k = k;
    pair.shared = static_cast<int>(features.size());
    std::vector<int> inl;
    std::string reason;
    if (!estimate_eg_pair(ri, rk, config.threshold_px / focal, config.ransac_iterations,
                          pair_seed(config.seed, i, k), pair.rotation, pair.direction, inl, reason)) {
      if (skipped != nullptr) skipped->push_back({i, k, reason});
      continue;
    }
    for (int idx : inl) pair.inliers.push_back(features[static_cast<std::size_t>(idx)]);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

void refine_translation_directions(std::vector<EgPair>& pairs, const BaProblem& tracks,
                                   const std::vector<Eigen::Matrix3d>& rotations, const EgConfig& config) {
  std::map<std::pair<int, int>, const Observation*> lookup;  // (feature, pose)
  for (const auto& obs : tracks.observations) lookup.emplace(std::make_pair(obs.feature_id, obs.pose_id), &obs);

  for (auto& pair : pairs) {
    const Eigen::Matrix3d rik = rotations[pair.i].transpose() * rotations[pair.k];
    std::vector<Eigen::Vector3d> xi, xk, cs;
    for (int f : pair.inliers) {
      xi.push_back(lookup.at({f, pair.i})->measured_ray);
      xk.push_back(lookup.at({f, pair.k})->measured_ray);
      cs.push_back((rik * xk.back()).cross(xi.back()));
    }
    const int n = static_cast<int>(cs.size());
    if (n < 2) {
      pair.rotation = rik;
      continue;
    }
    const double focal = 0.5 * (tracks.intrinsics_for(pair.i).fx + tracks.intrinsics_for(pair.k).fx);
    const double threshold = config.threshold_px / focal;
    auto inliers_of = [&](const Eigen::Vector3d& t) {
      std::vector<int> out;
      for (int j = 0; j < n; ++j)
        if (std::abs(t.dot(cs[j])) < threshold) out.push_back(j);
      return out;
    };
    std::mt19937_64 rng(pair_seed(config.seed ^ 0x5bd1e995ULL, pair.i, pair.k));
    std::vector<int> best;
    for (int it = 0; it < config.ransac_iterations; ++it) {
      const std::vector<int> pick = sample_indices(rng, n, 2);
      const Eigen::Vector3d t = cs[pick[0]].cross(cs[pick[1]]);
      if (t.norm() < 1e-12) continue;
      std::vector<int> in = inliers_of(t.normalized());
      if (in.size() > best.size()) best = std::move(in);
      if (static_cast<int>(best.size()) == n) break;
    }
    if (best.size() < 2) {
      pair.rotation = rik;
      continue;
    }
    Eigen::Vector3d t;
    for (int refit = 0; refit < 2; ++refit) {
      Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
      for (int j : best) m += cs[j] * cs[j].transpose();
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(m);
      t = eig.eigenvectors().col(0).normalized();
      std::vector<int> in = inliers_of(t);
      if (in.size() < 2) break;
      best = std::move(in);
    }
    int votes = 0;
    for (int j : best) {
      const Eigen::Vector2d d = triangulate_depths(rik, t, xi[j], xk[j]);
      const Eigen::Vector2d dm = triangulate_depths(rik, -t, xi[j], xk[j]);
      votes += (d[0] > 0 && d[1] > 0) ? 1 : 0;
      votes -= (dm[0] > 0 && dm[1] > 0) ? 1 : 0;
    }
    pair.rotation = rik;
    pair.direction = votes >= 0 ? t : Eigen::Vector3d(-t);
    std::vector<int> kept;
    for (int j : best) kept.push_back(pair.inliers[static_cast<std::size_t>(j)]);
    pair.inliers = std::move(kept);
  }
}

}  // namespace pmba

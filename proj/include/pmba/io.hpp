#pragma once

// BAL ingestion, CSV / PLY / JSON export and reimport.

#include "pmba/scene.hpp"
#include "pmba/solver.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pmba {

struct BalCamera {
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();  // Rodrigues vector
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double focal = 1.0;
  double k1 = 0.0;
  double k2 = 0.0;
};

struct BalObservation {
  int camera = 0;
  int point = 0;
  double x = 0.0;
  double y = 0.0;
};

struct BalDataset {
  std::vector<BalCamera> cameras;
  std::vector<Eigen::Vector3d> points;
  std::vector<BalObservation> observations;
};

/// Throws DataError naming the offending line.
BalDataset parse_bal(std::istream& in);
BalDataset read_bal(const std::filesystem::path& path);
/// Shortest round-trip formatting, so parse(serialize(d)) == d exactly.
void serialize_bal(const BalDataset& data, std::ostream& out);
void write_bal(const BalDataset& data, const std::filesystem::path& path);

struct BalOptions {
  bool distortion = true;
};

struct BalConversion {
  BaProblem problem;  // Euclidean features, one intrinsics entry per camera
  std::vector<int> behind_all;  // points behind every observing camera
};

/// BAL (P = R X + t, looking down -z, pixel = -f r(p) P/P_z) to this library's
/// +z-forward (R, p) convention.
BalConversion bal_to_problem(const BalDataset& data, const BalOptions& options = {});
/// Inverse of bal_to_problem; needs fx == fy and a zero principal point.
BalDataset problem_to_bal(const BaProblem& problem);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double value);

/// Writes through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

std::string poses_csv(const std::vector<CameraPose>& poses);
std::string points_csv(const std::vector<Eigen::Vector3d>& points, const std::vector<FeatureTag>& tags = {});
std::string points_ply(const std::vector<Eigen::Vector3d>& points);
std::string iterations_csv(const std::vector<IterationRecord>& records, bool with_time = true);

std::vector<CameraPose> parse_poses_csv(const std::string& text);
std::vector<Eigen::Vector3d> parse_points_csv(const std::string& text, std::vector<FeatureTag>* tags = nullptr);

/// poses.csv, points.csv and points.ply under `directory` with the given prefix.
void export_geometry(const BaProblem& problem, const std::filesystem::path& directory, const std::string& prefix,
                     const std::vector<FeatureTag>& tags = {});

std::string problem_to_json(const BaProblem& problem);
BaProblem problem_from_json(const std::string& text);
void save_problem(const BaProblem& problem, const std::filesystem::path& path);
BaProblem load_problem(const std::filesystem::path& path);

std::string scene_to_json(const SyntheticScene& scene);
SyntheticScene scene_from_json(const std::string& text);

}  // namespace pmba

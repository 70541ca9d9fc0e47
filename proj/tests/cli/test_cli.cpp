// Scripted runs of the pmba binary; its path comes from PMBA_CLI.

#include "pmba/io.hpp"
#include "pmba/scene.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace pmba;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pmba_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run run(const std::string& args, const std::string& env = "") {
  const char* cli = std::getenv("PMBA_CLI");
  REQUIRE_MESSAGE(cli != nullptr, "PMBA_CLI is not set");
  const fs::path out = fs::temp_directory_path() / "pmba_cli_stdout.txt";
  const fs::path err = fs::temp_directory_path() / "pmba_cli_stderr.txt";
  const std::string cmd = env + " \"" + std::string(cli) + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::map<std::string, double> stage_metrics(const fs::path& report, const std::string& stage) {
  std::map<std::string, double> out;
  for (const auto& row : csv_rows(report))
    if (row.size() == 3 && row[0] == stage && row[1] != "flag") out[row[1]] = std::stod(row[2]);
  return out;
}

}  // namespace

TEST_CASE("simulate writes the default scene") {
  const fs::path d = scratch("sim");
  const Run r = run("simulate --seed 0 -o " + d.string());
  REQUIRE(r.code == 0);
  const SyntheticScene scene = scene_from_json(read_file(d / "scene.json"));
  CHECK(scene.poses.size() == 4);
  CHECK(scene.points.size() == 10);
  CHECK(load_problem(d / "problem.json").num_features() == 10);
  CHECK(fs::exists(d / "truth_poses.csv"));
  CHECK(fs::exists(d / "truth_points.ply"));
  CHECK(r.out.find("1 far") != std::string::npos);
}

TEST_CASE("simulate minimal scene and determinism") {
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  REQUIRE(run("simulate --poses 2 --features 1 -o " + a.string()).code == 0);
  CHECK(load_problem(a / "problem.json").num_features() == 1);
  REQUIRE(run("simulate --seed 5 --noise 0.5 --bal -o " + a.string()).code == 0);
  REQUIRE(run("simulate --seed 5 --noise 0.5 --bal -o " + b.string()).code == 0);
  for (const char* f : {"scene.json", "problem.json", "problem.bal", "truth_points.csv"})
    CHECK(read_file(a / f) == read_file(b / f));
}

TEST_CASE("output directory from the environment") {
  const fs::path d = scratch("env");
  const Run r = run("simulate --seed 1", "PMBA_OUTPUT_DIR=\"" + d.string() + "\"");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(d / "problem.json"));
}

TEST_CASE("config file is merged under the flags") {
  const fs::path d = scratch("config");
  std::ofstream(d / "pmba.ini") << "[simulate]\nposes=5\nseed=4\n";
  REQUIRE(run("--config " + (d / "pmba.ini").string() + " simulate -o " + d.string()).code == 0);
  CHECK(scene_from_json(read_file(d / "scene.json")).poses.size() == 5);
  REQUIRE(run("--config " + (d / "pmba.ini").string() + " simulate --poses 3 -o " + d.string()).code == 0);
  CHECK(scene_from_json(read_file(d / "scene.json")).poses.size() == 3);
}

TEST_CASE("usage, data and numerical exit codes") {
  const fs::path d = scratch("codes");
  CHECK(run("").code == 2);
  CHECK(run("simulate --bogus").code == 2);
  CHECK(run("optimize -i x.json --method foo").code == 2);
  CHECK(run("optimize -i " + (d / "missing.json").string()).code == 3);
  const Run bad = run("simulate --poses 1 -o " + d.string());
  CHECK(bad.code == 3);
  CHECK(bad.err.find("--help") != std::string::npos);
  std::ofstream(d / "broken.json") << "{not json";
  CHECK(run("optimize -i " + (d / "broken.json").string()).code == 3);
}

TEST_CASE("init on noise-free tracks") {
  const fs::path d = scratch("init");
  REQUIRE(run("simulate --poses 8 --features 60 -o " + d.string()).code == 0);
  const Run r = run("init -i " + (d / "problem.json").string() + " -o " + d.string());
  REQUIRE(r.code == 0);
  const auto qplc = stage_metrics(d / "init_report.csv", "qplc");
  CHECK(qplc.at("objective") < 1e-12);
  CHECK(stage_metrics(d / "init_report.csv", "convex_pose_graph").at("h_final") < 1e-12);
  CHECK(load_problem(d / "initialized.json").poses.size() == 8);

  const fs::path s = scratch("init_skip");
  REQUIRE(run("init --skip-qplc -i " + (d / "problem.json").string() + " -o " + s.string()).code == 0);
  const auto convex = stage_metrics(s / "init_report.csv", "convex_pose_graph");
  CHECK(convex.at("h_initial") > 1.0);
  CHECK(convex.at("h_final") < 1e-12);
}

TEST_CASE("init on a disconnected view graph lists the components") {
  const fs::path d = scratch("init_bad");
  REQUIRE(run("simulate -o " + d.string()).code == 0);  // 10 features: no pair reaches 16 shared
  const Run r = run("init -i " + (d / "problem.json").string() + " -o " + d.string());
  CHECK(r.code == 3);
  CHECK(r.err.find("rotation_averaging") != std::string::npos);
  CHECK(r.err.find("{0}") != std::string::npos);
  CHECK(fs::exists(d / "init_report.csv"));
}

TEST_CASE("optimize reports conditioning per parameterization") {
  const fs::path d = scratch("opt");
  REQUIRE(run("simulate --init-noise 0.02 -o " + d.string()).code == 0);
  const fs::path pm = scratch("opt_pm"), xyz = scratch("opt_xyz"), gt = scratch("opt_gt");
  const Run r = run("optimize -i " + (d / "problem.json").string() + " --param pmba --method dl -o " + pm.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("converged") != std::string::npos);
  const auto rows = csv_rows(pm / "iterations.csv");
  REQUIRE(rows.size() > 1);
  for (const auto& row : rows) CHECK(std::stod(row[5]) < 100.0);

  const Run x = run("optimize -i " + (d / "problem.json").string() + " --param xyz --method gn -o " + xyz.string());
  const bool singular = x.code == 4;
  const bool ill = std::stod(csv_rows(xyz / "iterations.csv").front()[5]) > 1e10;
  CHECK((singular || ill));

  REQUIRE(run("simulate -o " + gt.string()).code == 0);
  REQUIRE(run("optimize -i " + (gt / "problem.json").string() + " -o " + gt.string()).code == 0);
  CHECK(csv_rows(gt / "iterations.csv").size() <= 2);
}

TEST_CASE("compare") {
  const fs::path d = scratch("cmp");
  REQUIRE(run("simulate --init-noise 0.02 -o " + d.string()).code == 0);
  REQUIRE(run("compare -i " + (d / "problem.json").string() + " -o " + d.string()).code == 0);
  const auto rows = csv_rows(d / "compare_summary.csv");
  CHECK(rows.size() == 6);
  std::set<std::string> ranks;
  for (const auto& row : rows) {
    ranks.insert(row[1]);
    std::string stem = row[0];
    stem[stem.find(':')] = '_';
    CHECK(fs::exists(d / ("compare_" + stem + ".csv")));
    if (row[0].rfind("pmba", 0) == 0) CHECK(std::stod(row[7]) < 100.0);
    if (row[0].rfind("xyz", 0) == 0) CHECK(std::stod(row[7]) > 1e10);
  }
  CHECK(ranks.size() == 6);

  const fs::path one = scratch("cmp_one");
  REQUIRE(run("compare -i " + (d / "problem.json").string() + " --configs pmba:dl -o " + one.string()).code == 0);
  CHECK(csv_rows(one / "compare_summary.csv").size() == 1);
  int csvs = 0;
  for (const auto& e : fs::directory_iterator(one)) csvs += e.path().filename().string().rfind("compare_pmba", 0) == 0;
  CHECK(csvs == 1);
}

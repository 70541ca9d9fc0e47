// pmba command-line entry point: simulate, init, optimize, compare.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

#include "pmba/global_init.hpp"
#include "pmba/io.hpp"
#include "pmba/scene.hpp"
#include "pmba/solver.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
using namespace pmba;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct Common {
  std::string output_dir;
};

struct SolverFlags {
  std::string method = "dl";
  int max_iterations = 200;
  double lambda_scale = 1e-4;
  double radius = 1.0;
  double relative_tol = 1e-10;
  double step_tol = 1e-8;
  double gradient_tol = 1e-10;
  int dense_threshold = 60;

  void add(CLI::App* app) {
    app->add_option("--method", method, "gn, lm or dl")->capture_default_str()->check(CLI::IsMember({"gn", "lm", "dl"}));
    app->add_option("--max-iterations", max_iterations)->capture_default_str()->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-scale", lambda_scale, "LM: lambda0 = scale * mean(diag H)")->capture_default_str();
    app->add_option("--radius", radius, "DL: initial trust radius")->capture_default_str();
    app->add_option("--relative-tol", relative_tol, "stop when relative chi2 decrease is below")->capture_default_str();
    app->add_option("--step-tol", step_tol, "... and the step norm is below")->capture_default_str();
    app->add_option("--gradient-tol", gradient_tol, "stop when |g|_inf is below")->capture_default_str();
    app->add_option("--dense-threshold", dense_threshold, "pose blocks below which the reduced system is dense")
        ->capture_default_str();
  }

  SolverConfig config() const {
    SolverConfig c;
    c.method = parse_method(method);
    c.max_iterations = max_iterations;
    c.initial_lambda_scale = lambda_scale;
    c.initial_radius = radius;
    c.relative_chi2_tolerance = relative_tol;
    c.step_tolerance = step_tol;
    c.gradient_tolerance = gradient_tol;
    c.dense_pose_threshold = dense_threshold;
    return c;
  }
};

Parameterization parse_param_flag(const std::string& s) {
  if (s == "pmba") return Parameterization::parallax;
  if (s == "xyz") return Parameterization::euclidean;
  if (s == "idp") return Parameterization::inverse_depth;
  throw CLI::ValidationError("--param", "expected pmba, xyz or idp");
}

std::string param_flag(Parameterization p) {
  switch (p) {
    case Parameterization::parallax: return "pmba";
    case Parameterization::euclidean: return "xyz";
    case Parameterization::inverse_depth: return "idp";
  }
  return "?";
}

fs::path output_dir(const Common& common) {
  fs::path dir = common.output_dir;
  if (dir.empty()) {
    const char* env = std::getenv("PMBA_OUTPUT_DIR");
    dir = env != nullptr && *env != '\0' ? fs::path(env) : fs::path(".");
  }
  fs::create_directories(dir);
  return dir;
}

BaProblem load_input(const std::string& path, bool distortion) {
  const fs::path p(path);
  if (p.extension() == ".json") return load_problem(p);
  BalOptions opts;
  opts.distortion = distortion;
  BalConversion c = bal_to_problem(read_bal(p), opts);
  if (!c.behind_all.empty()) std::cerr << "warning: " << c.behind_all.size() << " points behind all observing cameras\n";
  return std::move(c.problem);
}

double max_condition(const OptimizeSummary& s) {
  double m = 0.0;
  for (const auto& r : s.records)
    if (std::isfinite(r.cond_hff)) m = std::max(m, r.cond_hff);
  return m;
}

std::string reports_csv(const std::vector<StageReport>& reports) {
  std::ostringstream out;
  out << "stage,key,value\n";
  for (const auto& r : reports) {
    for (const auto& [k, v] : r.metrics) out << r.stage << ',' << k << ',' << format_double(v) << '\n';
    for (const auto& f : r.flags) out << r.stage << ",flag,\"" << f << "\"\n";
  }
  return out.str();
}

void print_reports(const std::vector<StageReport>& reports) {
  for (const auto& r : reports) {
    std::cout << "[" << r.stage << "]";
    for (const auto& [k, v] : r.metrics) std::cout << ' ' << k << '=' << format_double(v);
    std::cout << '\n';
    const std::size_t shown = std::min<std::size_t>(r.flags.size(), 5);
    for (std::size_t j = 0; j < shown; ++j) std::cout << "  flag: " << r.flags[j] << '\n';
    if (r.flags.size() > shown) std::cout << "  ... " << r.flags.size() - shown << " more flags\n";
  }
}

int termination_exit(Termination t) {
  return (t == Termination::gn_singular || t == Termination::gn_diverged) ? kExitNumerical : 0;
}

// ---------------------------------------------------------------- simulate

struct SimulateFlags {
  SceneSpec spec;
  std::string param = "pmba";
  double init_noise = 0.0;
  bool bal = false;
};

int run_simulate(const SimulateFlags& f, const Common& common) {
  const fs::path dir = output_dir(common);
  const SyntheticScene scene = generate_scene(f.spec);
  BaProblem problem = scene_problem(scene, Parameterization::euclidean);
  if (f.init_noise > 0.0) {
    perturb_poses(problem, f.init_noise, f.spec.seed + 1);
    perturb_points(problem, f.init_noise, f.spec.seed + 2);
  }
  problem = convert_parameterization(problem, parse_param_flag(f.param));

  write_file_atomic(dir / "scene.json", scene_to_json(scene));
  save_problem(problem, dir / "problem.json");
  export_geometry(scene_problem(scene, Parameterization::euclidean), dir, "truth_", scene.tags);
  if (f.bal) write_bal(problem_to_bal(convert_parameterization(problem, Parameterization::euclidean)), dir / "problem.bal");

  int counts[3] = {0, 0, 0};
  for (auto t : scene.tags) ++counts[static_cast<int>(t)];
  std::cout << "scene: " << scene.poses.size() << " poses, " << scene.points.size() << " features ("
            << counts[0] << " normal, " << counts[1] << " far, " << counts[2] << " collinear), "
            << scene.problem.observations.size() << " observations\n";
  const BaProblem truth = scene_problem(scene, Parameterization::parallax);
  const auto& feats = std::get<std::vector<ParallaxFeature>>(truth.features);
  for (std::size_t j = 0; j < feats.size(); ++j)
    if (scene.tags[j] != FeatureTag::normal)
      std::cout << "  feature " << j << " (" << to_string(scene.tags[j]) << "): parallax "
                << format_double(feats[j].theta) << " rad\n";
  std::cout << "wrote " << (dir / "problem.json").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- init

struct InitFlags {
  std::string input;
  std::string pipeline_config;
  bool skip_qplc = false;
  bool distortion = false;
  std::uint64_t seed = 0;
  int min_shared = 16;
  int ransac_iterations = 200;
  double threshold_px = 2.0;
  std::string convex_method = "lm";
  double huber = 0.0;
  bool bundle = false;
};

int run_init(const InitFlags& f, CLI::App* sub, const Common& common) {
  const fs::path dir = output_dir(common);
  const BaProblem tracks = load_input(f.input, f.distortion);
  PipelineConfig cfg;
  if (!f.pipeline_config.empty()) cfg = parse_pipeline_config(read_file(f.pipeline_config), cfg);
  auto given = [&](const char* name) { return sub->count(name) > 0 || f.pipeline_config.empty(); };
  if (given("--seed")) cfg.eg.seed = f.seed;
  if (given("--min-shared")) cfg.eg.min_shared = f.min_shared;
  if (given("--ransac-iterations")) cfg.eg.ransac_iterations = f.ransac_iterations;
  if (given("--threshold-px")) cfg.eg.threshold_px = f.threshold_px;
  if (given("--convex-method")) cfg.convex_solver.method = parse_method(f.convex_method);
  if (given("--huber")) cfg.huber_scale = f.huber;
  if (sub->count("--skip-qplc") > 0) cfg.skip_qplc = true;
  cfg.run_bundle_adjustment = f.bundle;

  try {
    const PipelineResult r = run_pipeline(tracks, cfg);
    write_file_atomic(dir / "init_report.csv", reports_csv(r.reports));
    save_problem(r.initialized, dir / "initialized.json");
    export_geometry(r.initialized, dir, "init_");
    if (f.bundle) save_problem(r.optimized, dir / "optimized.json");
    print_reports(r.reports);
    std::cout << "wrote " << (dir / "initialized.json").string() << '\n';
    return 0;
  } catch (const PipelineError& e) {
    write_file_atomic(dir / "init_report.csv", reports_csv(e.reports()));
    if (!e.partial().poses.empty()) save_problem(e.partial(), dir / "partial.json");
    print_reports(e.reports());
    std::cerr << "error: stage failed: " << e.what() << '\n';
    return e.numerical() ? kExitNumerical : kExitData;
  }
}

// ---------------------------------------------------------------- optimize

struct OptimizeFlags {
  std::string input;
  std::string param = "pmba";
  bool distortion = false;
  double huber = 0.0;
  SolverFlags solver;
};

int run_optimize(const OptimizeFlags& f, CLI::App* sub, const Common& common) {
  const fs::path dir = output_dir(common);
  BaProblem problem = load_input(f.input, f.distortion);
  if (sub->count("--huber") > 0) problem.huber_scale = f.huber;
  const Parameterization param = parse_param_flag(f.param);
  if (problem.parameterization() != param) problem = convert_parameterization(problem, param);

  const OptimizeResult r = optimize(problem, f.solver.config());
  save_problem(r.problem, dir / "optimized.json");
  write_file_atomic(dir / "iterations.csv", iterations_csv(r.summary.records, false));
  write_file_atomic(dir / "timing.csv", iterations_csv(r.summary.records, true));
  export_geometry(r.problem, dir, "optimized_");

  const auto& first = r.summary.records.front();
  const auto& last = r.summary.records.back();
  std::cout << f.param << '+' << f.solver.method << ": " << to_string(r.summary.termination) << " after "
            << r.summary.records.size() - 1 << " iterations\n"
            << "  chi2_ray " << format_double(first.chi2_ray) << " -> " << format_double(last.chi2_ray) << '\n'
            << "  chi2_uv  " << format_double(first.chi2_uv) << " -> " << format_double(last.chi2_uv) << '\n'
            << "  max cond(H_FF) " << format_double(max_condition(r.summary)) << '\n';
  if (r.clamped_features > 0) std::cout << "  parallax clamped " << r.clamped_features << " times\n";
  if (r.behind_camera > 0) std::cout << "  " << r.behind_camera << " observations behind their camera\n";
  const int code = termination_exit(r.summary.termination);
  if (code != 0) std::cerr << "error: " << to_string(r.summary.termination) << '\n';
  return code;
}

// ---------------------------------------------------------------- compare

struct CompareFlags {
  std::string input;
  std::string configs = "pmba:lm,pmba:dl,xyz:lm,xyz:dl,idp:lm,idp:dl";
  bool distortion = false;
  SolverFlags solver;
};

int run_compare(const CompareFlags& f, const Common& common) {
  const fs::path dir = output_dir(common);
  const BaProblem input = load_input(f.input, f.distortion);
  // Every configuration starts from the same world geometry.
  const BaProblem start = input.parameterization() == Parameterization::euclidean
                              ? input
                              : convert_parameterization(input, Parameterization::euclidean);

  struct Row {
    std::string name;
    std::string status = "ok";
    std::string termination = "-";
    int iterations = -1;
    double chi2_uv = std::numeric_limits<double>::quiet_NaN();
    double chi2_ray = std::numeric_limits<double>::quiet_NaN();
    double max_cond = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
  };
  std::vector<Row> rows;
  std::stringstream list(f.configs);
  std::string item;
  while (std::getline(list, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw CLI::ValidationError("--configs", "entries look like pmba:dl");
    const std::string param = item.substr(0, colon), method = item.substr(colon + 1);
    const Parameterization p = parse_param_flag(param);
    Row row;
    row.name = param + ":" + method;
    SolverFlags sf = f.solver;
    sf.method = method;
    try {
      const SolverConfig cfg = sf.config();
      const OptimizeResult r = optimize(convert_parameterization(start, p), cfg);
      write_file_atomic(dir / ("compare_" + param + "_" + method + ".csv"), iterations_csv(r.summary.records, false));
      row.termination = to_string(r.summary.termination);
      row.iterations = static_cast<int>(r.summary.records.size()) - 1;
      row.chi2_uv = r.summary.records.back().chi2_uv;
      row.chi2_ray = r.summary.records.back().chi2_ray;
      row.max_cond = max_condition(r.summary);
      row.converged = r.summary.converged();
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
      std::replace(row.status.begin(), row.status.end(), ',', ';');
    }
    rows.push_back(row);
  }

  // Rank: converged first, then fewer iterations, then lower final chi2_uv.
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Row& x = rows[a];
    const Row& y = rows[b];
    if (x.converged != y.converged) return x.converged;
    if (x.iterations != y.iterations) return x.iterations >= 0 && (y.iterations < 0 || x.iterations < y.iterations);
    return x.chi2_uv < y.chi2_uv;
  });
  std::vector<int> rank(rows.size());
  for (std::size_t j = 0; j < order.size(); ++j) rank[order[j]] = static_cast<int>(j) + 1;

  std::ostringstream csv;
  csv << "config,rank,status,termination,iterations,final_chi2_uv,final_chi2_ray,max_cond_hff\n";
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const Row& r = rows[j];
    csv << r.name << ',' << rank[j] << ',' << r.status << ',' << r.termination << ',' << r.iterations << ','
        << format_double(r.chi2_uv) << ',' << format_double(r.chi2_ray) << ',' << format_double(r.max_cond) << '\n';
    std::cout << rank[j] << ". " << r.name << "  " << r.termination << "  iterations=" << r.iterations
              << "  chi2_uv=" << format_double(r.chi2_uv) << "  max_cond=" << format_double(r.max_cond)
              << (r.status == "ok" ? "" : "  " + r.status) << '\n';
  }
  write_file_atomic(dir / "compare_summary.csv", csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallax-angle bundle adjustment: simulation, global initialization and optimization"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file merged under the command-line flags");
  Common common;
  app.add_option("-o,--output-dir", common.output_dir, "output directory (default: $PMBA_OUTPUT_DIR or .)");

  SimulateFlags sim;
  auto* s = app.add_subcommand("simulate", "generate a synthetic scene and its problem file");
  s->add_option("--poses", sim.spec.num_poses)->capture_default_str();
  s->add_option("--features", sim.spec.num_features)->capture_default_str();
  s->add_option("--far", sim.spec.num_far, "far features (~1000x baseline away; 0 by default below 3 features)")->capture_default_str();
  s->add_option("--collinear", sim.spec.num_collinear, "features on the pose-0/pose-1 line (0 by default below 3 features)")->capture_default_str();
  s->add_option("--noise", sim.spec.pixel_noise, "pixel noise sigma")->capture_default_str();
  s->add_option("--baseline", sim.spec.baseline)->capture_default_str();
  s->add_option("--seed", sim.spec.seed)->capture_default_str();
  s->add_option("--param", sim.param, "pmba, xyz or idp")->capture_default_str();
  s->add_option("--init-noise", sim.init_noise, "perturb the starting poses/points by this sigma")->capture_default_str();
  s->add_flag("--bal", sim.bal, "also write problem.bal");

  InitFlags ini;
  auto* in = app.add_subcommand("init", "global initialization up to (not including) bundle adjustment");
  in->add_option("-i,--input", ini.input, "problem .json or BAL file (only observations are used)")->required();
  in->add_option("--pipeline-config", ini.pipeline_config, "key=value pipeline settings; flags override");
  in->add_flag("--skip-qplc", ini.skip_qplc, "start the convex stage from random positions");
  in->add_flag("--distortion", ini.distortion, "apply BAL radial distortion");
  in->add_option("--seed", ini.seed)->capture_default_str();
  in->add_option("--min-shared", ini.min_shared, "shared features needed for an EG pair")->capture_default_str();
  in->add_option("--ransac-iterations", ini.ransac_iterations)->capture_default_str();
  in->add_option("--threshold-px", ini.threshold_px, "RANSAC inlier threshold")->capture_default_str();
  in->add_option("--convex-method", ini.convex_method, "lm or dl")->capture_default_str()->check(
      CLI::IsMember({"gn", "lm", "dl"}));
  in->add_option("--huber", ini.huber, "pseudo-Huber scale on the convex stage, 0 = off")->capture_default_str();
  in->add_flag("--bundle", ini.bundle, "also run parallax bundle adjustment");

  OptimizeFlags opt;
  auto* op = app.add_subcommand("optimize", "bundle adjustment of a problem file");
  op->add_option("-i,--input", opt.input, "problem .json or BAL file")->required();
  op->add_option("--param", opt.param, "pmba, xyz or idp")->capture_default_str()->check(
      CLI::IsMember({"pmba", "xyz", "idp"}));
  op->add_flag("--distortion", opt.distortion, "apply BAL radial distortion");
  op->add_option("--huber", opt.huber, "pseudo-Huber scale, 0 = off")->capture_default_str();
  opt.solver.add(op);

  CompareFlags cmp;
  auto* co = app.add_subcommand("compare", "run several parameterization:method configurations from one start");
  co->add_option("-i,--input", cmp.input, "problem .json or BAL file")->required();
  co->add_option("--configs", cmp.configs, "comma-separated param:method list")->capture_default_str();
  co->add_flag("--distortion", cmp.distortion, "apply BAL radial distortion");
  cmp.solver.add(co);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (s->parsed()) {
      parse_param_flag(sim.param);
      // The pathological features are only added by default when they leave
      // at least one ordinary feature.
      if (s->count("--far") == 0 && sim.spec.num_features < 3) sim.spec.num_far = 0;
      if (s->count("--collinear") == 0 && sim.spec.num_features < 3) sim.spec.num_collinear = 0;
      try {
        return run_simulate(sim, common);
      } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << " (see simulate --help)\n";
        return kExitData;
      }
    }
    if (in->parsed()) return run_init(ini, in, common);
    if (op->parsed()) return run_optimize(opt, op, common);
    if (co->parsed()) return run_compare(cmp, common);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

#include "pmba/global_init.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>
#include <sstream>

namespace pmba {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw DataError("config key '" + key + "': bad number '" + v + "'");
  return out;
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw DataError("config key '" + key + "': bad integer '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw DataError("config key '" + key + "': bad boolean '" + v + "'");
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& text, PipelineConfig cfg) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "min_shared") cfg.eg.min_shared = static_cast<int>(to_integer(key, value));
      else if (key == "ransac_iterations") cfg.eg.ransac_iterations = static_cast<int>(to_integer(key, value));
      else if (key == "ransac_threshold_px") cfg.eg.threshold_px = to_double(key, value);
      else if (key == "seed") cfg.eg.seed = static_cast<std::uint64_t>(to_integer(key, value));
      else if (key == "skip_qplc") cfg.skip_qplc = to_bool(key, value);
      else if (key == "bundle_adjustment") cfg.run_bundle_adjustment = to_bool(key, value);
      else if (key == "huber_scale") cfg.huber_scale = to_double(key, value);
      else if (key == "convex_method") cfg.convex_solver.method = parse_method(value);
      else if (key == "convex_max_iterations") cfg.convex_solver.max_iterations = static_cast<int>(to_integer(key, value));
      else if (key == "bundle_method") cfg.bundle_solver.method = parse_method(value);
      else if (key == "bundle_max_iterations") cfg.bundle_solver.max_iterations = static_cast<int>(to_integer(key, value));
      else throw DataError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw DataError("config key '" + key + "': " + e.what());
    }
  }
  return cfg;
}

PipelineResult run_pipeline(const BaProblem& tracks, const PipelineConfig& config) {
  PipelineResult out;
  auto& reports = out.reports;
  const int num_poses = static_cast<int>(tracks.poses.size());
  std::string stage = "input";
  BaProblem partial;

  try {
    if (num_poses < 2) throw DataError("need at least two poses");
    for (const auto& obs : tracks.observations)
      if (obs.pose_id < 0 || obs.pose_id >= num_poses || obs.feature_id < 0)
        throw DataError("observation ids out of range");

    stage = "eg_pairs";
    std::vector<EgDiagnostic> skipped;
    out.pairs = estimate_eg_pairs(tracks, config.eg, &skipped);
    {
      StageReport r{stage, {}, {}};
      std::vector<double> ratio;
      for (const auto& p : out.pairs) ratio.push_back(static_cast<double>(p.inliers.size()) / p.shared);
      r.metrics = {{"pairs", static_cast<double>(out.pairs.size())},
                   {"skipped", static_cast<double>(skipped.size())},
                   {"mean_inlier_ratio", mean(ratio)}};
      for (const auto& d : skipped)
        r.flags.push_back("pair " + std::to_string(d.i) + "-" + std::to_string(d.k) + ": " + d.reason);
      reports.push_back(std::move(r));
    }

    stage = "rotation_averaging";
    const std::vector<Eigen::Matrix3d> rotations = chordal_rotation_averaging(num_poses, out.pairs);
    {
      std::vector<double> residual;
      for (const auto& p : out.pairs)
        residual.push_back(rotation_distance(p.rotation, (rotations[p.i].transpose() * rotations[p.k]).eval()));
      reports.push_back({stage,
                         {{"poses", static_cast<double>(num_poses)},
                          {"mean_edge_residual_rad", mean(residual)},
                          {"max_edge_residual_rad", residual.empty() ? 0.0 : *std::max_element(residual.begin(), residual.end())}},
                         {}});
    }

    stage = "direction_refinement";
    refine_translation_directions(out.pairs, tracks, rotations, config.eg);
    {
      std::vector<double> ratio;
      for (const auto& p : out.pairs) ratio.push_back(static_cast<double>(p.inliers.size()) / p.shared);
      reports.push_back({stage, {{"mean_inlier_ratio", mean(ratio)}}, {}});
    }

    stage = "feature_init";
    out.features = initialize_features(tracks, rotations, out.pairs);
    {
      StageReport r{stage, {}, {}};
      int unanchored = 0, low = 0;
      for (std::size_t j = 0; j < out.features.features.size(); ++j) {
        if (!out.features.eg_anchored[j]) {
          ++unanchored;
          r.flags.push_back("feature " + std::to_string(out.features.source_feature[j]) + ": anchors not an EG pair");
        }
        if (out.features.features[j].theta < 1e-3) {
          ++low;
          r.flags.push_back("feature " + std::to_string(out.features.source_feature[j]) + ": low parallax");
        }
      }
      for (int f : out.features.dropped_features)
        r.flags.push_back("feature " + std::to_string(f) + ": dropped, fewer than two observing poses");
      r.metrics = {{"features", static_cast<double>(out.features.features.size())},
                   {"dropped", static_cast<double>(out.features.dropped_features.size())},
                   {"not_eg_anchored", static_cast<double>(unanchored)},
                   {"low_parallax", static_cast<double>(low)}};
      reports.push_back(std::move(r));
    }

    stage = "qplc";
    ConvexPositionProblem convex = build_convex_problem(tracks, rotations, out.features, out.pairs, 0);
    convex.huber_scale = config.huber_scale;
    std::vector<Eigen::Vector3d> start;
    if (config.skip_qplc) {
      start = random_positions(convex, config.eg.seed);
      reports.push_back({stage, {{"skipped", 1.0}, {"h", convex_cost(convex, start)}}, {"random start"}});
    } else {
      const QplcResult q = qplc_bootstrap(convex);
      if (!q.feasible) throw NumericalError("cheirality constraints are infeasible");
      start = q.positions;
      StageReport r{stage,
                    {{"skipped", 0.0},
                     {"objective", q.objective},
                     {"h", convex_cost(convex, start)},
                     {"active_constraints", static_cast<double>(q.active_constraints)},
                     {"iterations", static_cast<double>(q.iterations)},
                     {"min_cheirality", q.min_constraint}},
                    {}};
      if (q.regularized) r.flags.push_back("quadratic form regularized");
      reports.push_back(std::move(r));
    }

    stage = "convex_pose_graph";
    SolverConfig convex_cfg = config.convex_solver;
    const ConvexResult cr = convex_pose_graph(convex, start, convex_cfg);
    {
      StageReport r{stage,
                    {{"h_initial", cr.summary.initial_cost},
                     {"h_final", cr.cost},
                     {"iterations", static_cast<double>(cr.summary.records.size() - 1)},
                     {"skipped_observations", static_cast<double>(cr.skipped_observations)}},
                    {"termination=" + to_string(cr.summary.termination)}};
      if (cr.skipped_observations > 0) r.flags.push_back("zero-length rays skipped");
      reports.push_back(std::move(r));
    }

    // Hand-off to the parallax problem.
    BaProblem& init = out.initialized;
    init.intrinsics = tracks.intrinsics;
    init.huber_scale = tracks.huber_scale;
    init.poses.resize(static_cast<std::size_t>(num_poses));
    for (int p = 0; p < num_poses; ++p) {
      init.poses[p].rotation = rotations[p];
      init.poses[p].position = cr.positions[p];
    }
    std::map<int, int> remap;
    for (std::size_t j = 0; j < out.features.source_feature.size(); ++j)
      remap[out.features.source_feature[j]] = static_cast<int>(j);
    for (const auto& obs : tracks.observations) {
      const auto it = remap.find(obs.feature_id);
      if (it == remap.end()) continue;
      Observation o = obs;
      o.feature_id = it->second;
      init.observations.push_back(o);
    }
    std::stable_sort(init.observations.begin(), init.observations.end(), [](const Observation& a, const Observation& b) {
      return std::tie(a.feature_id, a.pose_id) < std::tie(b.feature_id, b.pose_id);
    });
    init.features = out.features.features;
    init.gauge = {convex.fixed_pose, convex.scale_pose, convex.scale_axis};
    partial = init;

    stage = "bundle_adjustment";
    if (config.run_bundle_adjustment) {
      OptimizeResult ba = optimize(init, config.bundle_solver);
      out.optimized = std::move(ba.problem);
      out.bundle_summary = ba.summary;
      StageReport r{stage,
                    {{"chi2_initial", ba.summary.initial_cost},
                     {"chi2_final", ba.summary.final_cost},
                     {"iterations", static_cast<double>(ba.summary.records.size() - 1)},
                     {"clamped_features", static_cast<double>(ba.clamped_features)}},
                    {"termination=" + to_string(ba.summary.termination)}};
      reports.push_back(std::move(r));
    } else {
      out.optimized = init;
    }
  } catch (const DataError& e) {
    throw PipelineError(stage, e.what(), false, reports, partial);
  } catch (const NumericalError& e) {
    throw PipelineError(stage, e.what(), true, reports, partial);
  }
  return out;
}

}  // namespace pmba

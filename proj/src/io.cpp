#include "pmba/io.hpp"

#include "pmba/parallax.hpp"
#include "pmba/reprojection.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

namespace pmba {

namespace {

using nlohmann::json;

const Eigen::Matrix3d kFlipYZ = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();

struct Token {
  std::string_view text;
  int line = 0;
};

class Tokenizer {
 public:
  explicit Tokenizer(const std::string& text) {
    int line = 1;
    std::size_t k = 0;
    while (k < text.size()) {
      const char c = text[k];
      if (c == '\n') {
        ++line;
        ++k;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        ++k;
      } else {
        const std::size_t start = k;
        while (k < text.size() && text[k] != ' ' && text[k] != '\t' && text[k] != '\r' && text[k] != '\n') ++k;
        tokens_.push_back({std::string_view(text).substr(start, k - start), line});
      }
    }
  }

  bool done() const { return next_ >= tokens_.size(); }
  const Token& peek() const { return tokens_[next_]; }
  int last_line() const { return tokens_.empty() ? 1 : tokens_.back().line; }

  const Token& take(const char* what) {
    if (done()) throw DataError("BAL: file truncated at line " + std::to_string(last_line()) + " while reading " + what);
    return tokens_[next_++];
  }

  template <typename T>
  T number(const char* what) {
    return parse<T>(take(what), what);
  }

  template <typename T>
  static T parse(const Token& t, const char* what) {
    T value{};
    const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), value);
    if (ec != std::errc() || ptr != t.text.data() + t.text.size())
      throw DataError("BAL: line " + std::to_string(t.line) + ": malformed " + what + " '" + std::string(t.text) + "'");
    return value;
  }

  // All tokens on the current token's line.
  std::vector<Token> line_tokens() {
    std::vector<Token> out;
    if (done()) return out;
    const int line = peek().line;
    while (!done() && peek().line == line) out.push_back(tokens_[next_++]);
    return out;
  }

 private:
  std::vector<Token> tokens_;
  std::size_t next_ = 0;
};

Eigen::Vector3d vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

json pose_json(const CameraPose& p) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
  return {{"rotation", rot}, {"position", vec3_json(p.position)}};
}

CameraPose pose_from(const json& j) {
  CameraPose p;
  const auto& rot = j.at("rotation");
  if (!rot.is_array() || rot.size() != 9) throw DataError("pose rotation needs 9 entries");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot.at(static_cast<std::size_t>(3 * r + c)).get<double>();
  p.position = vec3_from(j.at("position"));
  return p;
}

json problem_json(const BaProblem& problem) {
  json j;
  j["parameterization"] = to_string(problem.parameterization());
  json poses = json::array();
  for (const auto& p : problem.poses) poses.push_back(pose_json(p));
  j["poses"] = poses;
  json intr = json::array();
  for (const auto& k : problem.intrinsics)
    intr.push_back({{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"k1", k.k1}, {"k2", k.k2}});
  j["intrinsics"] = intr;
  json obs = json::array();
  for (const auto& o : problem.observations) {
    json e = {{"pose", o.pose_id}, {"feature", o.feature_id}, {"pixel", {o.pixel.x(), o.pixel.y()}}};
    if (o.weight != 1.0) e["weight"] = o.weight;
    obs.push_back(e);
  }
  j["observations"] = obs;
  json features = json::array();
  std::visit(
      [&](const auto& list) {
        using T = typename std::decay_t<decltype(list)>::value_type;
        for (const auto& f : list) {
          if constexpr (std::is_same_v<T, ParallaxFeature>) {
            features.push_back(
                {{"theta", f.theta}, {"ray", vec3_json(f.ray)}, {"main", f.main_anchor}, {"assoc", f.assoc_anchor}});
          } else if constexpr (std::is_same_v<T, EuclideanFeature>) {
            features.push_back({{"point", vec3_json(f.point)}});
          } else {
            features.push_back({{"anchor", f.anchor}, {"ray", vec3_json(f.ray)}, {"rho", f.rho}});
          }
        }
      },
      problem.features);
  j["features"] = features;
  j["gauge"] = {{"fixed_pose", problem.gauge.fixed_pose},
                {"scale_pose", problem.gauge.scale_pose},
                {"scale_axis", problem.gauge.scale_axis}};
  if (problem.huber_scale > 0.0) j["huber_scale"] = problem.huber_scale;
  return j;
}

BaProblem problem_from(const json& j) {
  BaProblem p;
  for (const auto& e : j.at("poses")) p.poses.push_back(pose_from(e));
  p.intrinsics.clear();
  for (const auto& e : j.at("intrinsics")) {
    CameraIntrinsics k;
    k.fx = e.at("fx").get<double>();
    k.fy = e.at("fy").get<double>();
    k.cx = e.value("cx", 0.0);
    k.cy = e.value("cy", 0.0);
    k.k1 = e.value("k1", 0.0);
    k.k2 = e.value("k2", 0.0);
    p.intrinsics.push_back(k);
  }
  if (p.intrinsics.empty()) throw DataError("problem has no intrinsics");
  for (const auto& e : j.at("observations")) {
    Observation o;
    o.pose_id = e.at("pose").get<int>();
    o.feature_id = e.at("feature").get<int>();
    const auto& px = e.at("pixel");
    if (!px.is_array() || px.size() != 2) throw DataError("observation pixel needs 2 entries");
    o.pixel = Eigen::Vector2d(px[0].get<double>(), px[1].get<double>());
    o.weight = e.value("weight", 1.0);
    p.observations.push_back(o);
  }
  const Parameterization param = parse_parameterization(j.at("parameterization").get<std::string>());
  const auto& features = j.at("features");
  switch (param) {
    case Parameterization::parallax: {
      std::vector<ParallaxFeature> list;
      for (const auto& e : features)
        list.push_back({e.at("theta").get<double>(), vec3_from(e.at("ray")), e.at("main").get<int>(),
                        e.at("assoc").get<int>()});
      p.features = std::move(list);
      break;
    }
    case Parameterization::euclidean: {
      std::vector<EuclideanFeature> list;
      for (const auto& e : features) list.push_back({vec3_from(e.at("point"))});
      p.features = std::move(list);
      break;
    }
    case Parameterization::inverse_depth: {
      std::vector<InverseDepthFeature> list;
      for (const auto& e : features)
        list.push_back({e.at("anchor").get<int>(), vec3_from(e.at("ray")), e.at("rho").get<double>()});
      p.features = std::move(list);
      break;
    }
  }
  if (j.contains("gauge")) {
    const auto& g = j.at("gauge");
    p.gauge.fixed_pose = g.value("fixed_pose", 0);
    p.gauge.scale_pose = g.value("scale_pose", 1);
    p.gauge.scale_axis = g.value("scale_axis", -1);
  }
  p.huber_scale = j.value("huber_scale", 0.0);
  // Range-check before touching intrinsics per pose.
  validate(p);
  refresh_measured_rays(p);
  return p;
}

template <typename F>
auto with_json_errors(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid JSON input: ") + e.what());
  }
}

}  // namespace

BalDataset parse_bal(std::istream& in) {
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  Tokenizer tok(text);

  const auto header = tok.line_tokens();
  if (header.size() != 3) throw DataError("BAL: line 1: header must be 'num_cameras num_points num_observations'");
  const long n_cams = Tokenizer::parse<long>(header[0], "camera count");
  const long n_pts = Tokenizer::parse<long>(header[1], "point count");
  const long n_obs = Tokenizer::parse<long>(header[2], "observation count");
  if (n_cams < 0 || n_pts < 0 || n_obs < 0) throw DataError("BAL: line 1: negative count in header");

  BalDataset data;
  data.observations.reserve(static_cast<std::size_t>(n_obs));
  for (long k = 0; k < n_obs; ++k) {
    if (tok.done()) throw DataError("BAL: file truncated at line " + std::to_string(tok.last_line()) + ": expected " +
                                    std::to_string(n_obs) + " observations, found " + std::to_string(k));
    const auto fields = tok.line_tokens();
    const int line = fields.front().line;
    if (fields.size() != 4)
      throw DataError("BAL: line " + std::to_string(line) + ": observation " + std::to_string(k) +
                      " needs 'camera point x y' (header promises " + std::to_string(n_obs) + " observations)");
    BalObservation o;
    o.camera = Tokenizer::parse<int>(fields[0], "camera index");
    o.point = Tokenizer::parse<int>(fields[1], "point index");
    o.x = Tokenizer::parse<double>(fields[2], "pixel x");
    o.y = Tokenizer::parse<double>(fields[3], "pixel y");
    if (o.camera < 0 || o.camera >= n_cams || o.point < 0 || o.point >= n_pts)
      throw DataError("BAL: line " + std::to_string(line) + ": index out of range");
    data.observations.push_back(o);
  }
  for (long c = 0; c < n_cams; ++c) {
    BalCamera cam;
    for (int i = 0; i < 3; ++i) cam.rotation(i) = tok.number<double>("camera rotation");
    for (int i = 0; i < 3; ++i) cam.translation(i) = tok.number<double>("camera translation");
    cam.focal = tok.number<double>("focal length");
    cam.k1 = tok.number<double>("k1");
    cam.k2 = tok.number<double>("k2");
    data.cameras.push_back(cam);
  }
  for (long j = 0; j < n_pts; ++j) {
    Eigen::Vector3d x;
    for (int i = 0; i < 3; ++i) x(i) = tok.number<double>("point coordinate");
    data.points.push_back(x);
  }
  if (!tok.done())
    throw DataError("BAL: line " + std::to_string(tok.peek().line) + ": unexpected data after the declared counts");
  return data;
}

BalDataset read_bal(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open BAL file " + path.string());
  return parse_bal(in);
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

void serialize_bal(const BalDataset& data, std::ostream& out) {
  out << data.cameras.size() << ' ' << data.points.size() << ' ' << data.observations.size() << '\n';
  for (const auto& o : data.observations)
    out << o.camera << ' ' << o.point << ' ' << format_double(o.x) << ' ' << format_double(o.y) << '\n';
  for (const auto& c : data.cameras) {
    for (int i = 0; i < 3; ++i) out << format_double(c.rotation(i)) << '\n';
    for (int i = 0; i < 3; ++i) out << format_double(c.translation(i)) << '\n';
    out << format_double(c.focal) << '\n' << format_double(c.k1) << '\n' << format_double(c.k2) << '\n';
  }
  for (const auto& x : data.points)
    for (int i = 0; i < 3; ++i) out << format_double(x(i)) << '\n';
}

void write_bal(const BalDataset& data, const std::filesystem::path& path) {
  std::ostringstream out;
  serialize_bal(data, out);
  write_file_atomic(path, out.str());
}

BalConversion bal_to_problem(const BalDataset& data, const BalOptions& options) {
  BalConversion result;
  BaProblem& p = result.problem;
  p.intrinsics.clear();
  for (const auto& cam : data.cameras) {
    const Eigen::Matrix3d r_bal = exp_so3(cam.rotation);
    CameraPose pose;
    pose.rotation = r_bal.transpose() * kFlipYZ;
    pose.position = -r_bal.transpose() * cam.translation;
    p.poses.push_back(pose);
    CameraIntrinsics k;
    k.fx = k.fy = cam.focal;
    if (options.distortion) {
      k.k1 = cam.k1;
      k.k2 = cam.k2;
    }
    p.intrinsics.push_back(k);
  }
  if (p.intrinsics.empty()) p.intrinsics.push_back(CameraIntrinsics{});
  std::vector<EuclideanFeature> features;
  for (const auto& x : data.points) features.push_back({x});
  std::vector<int> in_front(data.points.size(), 0);
  std::vector<int> seen(data.points.size(), 0);
  for (const auto& o : data.observations) {
    Observation obs;
    obs.pose_id = o.camera;
    obs.feature_id = o.point;
    obs.pixel = Eigen::Vector2d(o.x, -o.y);
    obs.measured_ray = pixel_to_ray(p.intrinsics[static_cast<std::size_t>(o.camera)], obs.pixel);
    p.observations.push_back(obs);
    const CameraPose& t = p.poses[static_cast<std::size_t>(o.camera)];
    ++seen[static_cast<std::size_t>(o.point)];
    if ((t.rotation.transpose() * (data.points[static_cast<std::size_t>(o.point)] - t.position)).z() > 0.0)
      ++in_front[static_cast<std::size_t>(o.point)];
  }
  for (std::size_t j = 0; j < data.points.size(); ++j)
    if (seen[j] > 0 && in_front[j] == 0) result.behind_all.push_back(static_cast<int>(j));
  p.features = std::move(features);
  return result;
}

BalDataset problem_to_bal(const BaProblem& problem) {
  BalDataset data;
  for (std::size_t i = 0; i < problem.poses.size(); ++i) {
    const CameraIntrinsics& k = problem.intrinsics_for(static_cast<int>(i));
    if (k.fx != k.fy || k.cx != 0.0 || k.cy != 0.0)
      throw DataError("BAL export needs fx == fy and a zero principal point");
    const CameraPose& pose = problem.poses[i];
    const Eigen::Matrix3d r_bal = kFlipYZ * pose.rotation.transpose();
    BalCamera cam;
    cam.rotation = log_so3(r_bal);
    cam.translation = -r_bal * pose.position;
    cam.focal = k.fx;
    cam.k1 = k.k1;
    cam.k2 = k.k2;
    data.cameras.push_back(cam);
  }
  data.points = feature_points(problem);
  for (const auto& o : problem.observations) data.observations.push_back({o.pose_id, o.feature_id, o.pixel.x(), -o.pixel.y()});
  return data;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::string poses_csv(const std::vector<CameraPose>& poses) {
  std::string out = "id,r00,r01,r02,r10,r11,r12,r20,r21,r22,px,py,pz\n";
  for (std::size_t i = 0; i < poses.size(); ++i) {
    out += std::to_string(i);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out += ',' + format_double(poses[i].rotation(r, c));
    for (int c = 0; c < 3; ++c) out += ',' + format_double(poses[i].position(c));
    out += '\n';
  }
  return out;
}

std::string points_csv(const std::vector<Eigen::Vector3d>& points, const std::vector<FeatureTag>& tags) {
  std::string out = "id,x,y,z,tag\n";
  for (std::size_t j = 0; j < points.size(); ++j) {
    out += std::to_string(j);
    for (int c = 0; c < 3; ++c) out += ',' + format_double(points[j](c));
    out += ',';
    if (j < tags.size()) out += to_string(tags[j]);
    out += '\n';
  }
  return out;
}

std::string points_ply(const std::vector<Eigen::Vector3d>& points) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(points.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  for (const auto& x : points) out += format_double(x.x()) + ' ' + format_double(x.y()) + ' ' + format_double(x.z()) + '\n';
  return out;
}

std::string iterations_csv(const std::vector<IterationRecord>& records, bool with_time) {
  std::string out = "iter,chi2_ray,chi2_uv,step_norm,damping_or_radius,cond_HFF,min_eig_HFF,linear_solves";
  out += with_time ? ",wall_ms\n" : "\n";
  for (const auto& r : records) {
    out += std::to_string(r.iteration) + ',' + format_double(r.chi2_ray) + ',' + format_double(r.chi2_uv) + ',' +
           format_double(r.step_norm) + ',' + format_double(r.damping_or_radius) + ',' + format_double(r.cond_hff) +
           ',' + format_double(r.min_eig_hff) + ',' + std::to_string(r.linear_solves);
    if (with_time) out += ',' + format_double(r.wall_ms);
    out += '\n';
  }
  return out;
}

namespace {

std::vector<std::vector<std::string>> csv_rows(const std::string& text, std::size_t columns) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (number == 1 || line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != columns)
      throw DataError("CSV line " + std::to_string(number) + ": expected " + std::to_string(columns) + " fields");
    rows.push_back(std::move(fields));
  }
  return rows;
}

double csv_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("CSV: malformed number '" + s + "'");
  return v;
}

}  // namespace

std::vector<CameraPose> parse_poses_csv(const std::string& text) {
  std::vector<CameraPose> poses;
  for (const auto& row : csv_rows(text, 13)) {
    CameraPose p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = csv_double(row[static_cast<std::size_t>(1 + 3 * r + c)]);
    for (int c = 0; c < 3; ++c) p.position(c) = csv_double(row[static_cast<std::size_t>(10 + c)]);
    poses.push_back(p);
  }
  return poses;
}

std::vector<Eigen::Vector3d> parse_points_csv(const std::string& text, std::vector<FeatureTag>* tags) {
  std::vector<Eigen::Vector3d> points;
  for (const auto& row : csv_rows(text, 5)) {
    points.emplace_back(csv_double(row[1]), csv_double(row[2]), csv_double(row[3]));
    if (tags != nullptr && !row[4].empty()) tags->push_back(parse_feature_tag(row[4]));
  }
  return points;
}

void export_geometry(const BaProblem& problem, const std::filesystem::path& directory, const std::string& prefix,
                     const std::vector<FeatureTag>& tags) {
  std::vector<Eigen::Vector3d> points;
  if (problem.parameterization() == Parameterization::parallax) {
    // Degenerate features are written as NaN rather than aborting the export.
    const auto& features = std::get<std::vector<ParallaxFeature>>(problem.features);
    for (const auto& f : features) {
      try {
        points.push_back(feature_to_point(f, problem.poses[static_cast<std::size_t>(f.main_anchor)],
                                          problem.poses[static_cast<std::size_t>(f.assoc_anchor)]));
      } catch (const NumericalError&) {
        points.push_back(Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN()));
      }
    }
  } else {
    points = feature_points(problem);
  }
  write_file_atomic(directory / (prefix + "poses.csv"), poses_csv(problem.poses));
  write_file_atomic(directory / (prefix + "points.csv"), points_csv(points, tags));
  write_file_atomic(directory / (prefix + "points.ply"), points_ply(points));
}

std::string problem_to_json(const BaProblem& problem) { return problem_json(problem).dump(1) + "\n"; }

BaProblem problem_from_json(const std::string& text) {
  return with_json_errors([&] { return problem_from(json::parse(text)); });
}

void save_problem(const BaProblem& problem, const std::filesystem::path& path) {
  write_file_atomic(path, problem_to_json(problem));
}

BaProblem load_problem(const std::filesystem::path& path) { return problem_from_json(read_file(path)); }

std::string scene_to_json(const SyntheticScene& scene) {
  json j;
  json poses = json::array();
  for (const auto& p : scene.poses) poses.push_back(pose_json(p));
  j["ground_truth_poses"] = poses;
  json points = json::array();
  for (const auto& x : scene.points) points.push_back(vec3_json(x));
  j["ground_truth_points"] = points;
  json tags = json::array();
  for (const auto t : scene.tags) tags.push_back(to_string(t));
  j["tags"] = tags;
  j["problem"] = problem_json(scene.problem);
  return j.dump(1) + "\n";
}

SyntheticScene scene_from_json(const std::string& text) {
  return with_json_errors([&] {
    const json j = json::parse(text);
    SyntheticScene scene;
    for (const auto& e : j.at("ground_truth_poses")) scene.poses.push_back(pose_from(e));
    for (const auto& e : j.at("ground_truth_points")) scene.points.push_back(vec3_from(e));
    for (const auto& e : j.at("tags")) scene.tags.push_back(parse_feature_tag(e.get<std::string>()));
    scene.problem = problem_from(j.at("problem"));
    scene.intrinsics = scene.problem.intrinsics.front();
    return scene;
  });
}

}  // namespace pmba

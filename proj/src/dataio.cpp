#include "tempcloud/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tempcloud/random.hpp"

namespace tempcloud::dataio {

namespace {

double to_float32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Surface sample in body coordinates, centred on the origin.
Vec3 sample_surface(const Body& body, Rng& rng) {
  const double sx = body.size[0], sy = body.size[1], sz = body.size[2];
  if (body.shape == BodyShape::cylinder_surface) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double radius = 0.5 * sx;
    return {radius * std::cos(angle), radius * std::sin(angle), rng.uniform(-0.5 * sz, 0.5 * sz)};
  }
  // Pick a face with probability proportional to its area.
  const double areas[3] = {sy * sz, sx * sz, sx * sy};
  const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
  double pick = rng.uniform(0.0, total);
  const double u = rng.uniform(-0.5, 0.5), v = rng.uniform(-0.5, 0.5);
  const double side = pick < total / 2.0 ? -0.5 : 0.5;
  if (pick >= total / 2.0) pick -= total / 2.0;
  if (pick < areas[0]) return {side * sx, u * sy, v * sz};
  if (pick < areas[0] + areas[1]) return {u * sx, side * sy, v * sz};
  return {u * sx, v * sy, side * sz};
}

Vec3 read_vec3(const nlohmann::json& j, const char* key, const Vec3& fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw FormatError(std::string("scene spec: ") + key + " needs 3 numbers");
  return {v[0], v[1], v[2]};
}

}  // namespace

void check_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw FormatError(what + ": non-finite coordinate");
}

PointCloud load_frame_bin(const std::filesystem::path& path, std::size_t stride) {
  require(stride >= 3, "load_frame_bin: stride must be at least 3");
  const auto bytes = read_all(path);
  const std::size_t record = 4 * stride;
  if (bytes.size() % record != 0) {
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of " + std::to_string(record));
  }
  const std::size_t n = bytes.size() / record;
  PointCloud cloud(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + i * record + 4 * c);
      const std::uint32_t raw = static_cast<std::uint32_t>(p[0]) |
                                static_cast<std::uint32_t>(p[1]) << 8 |
                                static_cast<std::uint32_t>(p[2]) << 16 |
                                static_cast<std::uint32_t>(p[3]) << 24;
      cloud(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = std::bit_cast<float>(raw);
    }
  }
  check_finite(cloud, path.string());
  return cloud;
}

void write_frame_bin(const std::filesystem::path& path, const PointCloud& cloud,
                     std::size_t stride) {
  require(stride >= 3, "write_frame_bin: stride must be at least 3");
  require(cloud.cols() == 3, "write_frame_bin: cloud must be N x 3");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(cloud.rows()) * stride * 4, 0);
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    for (Eigen::Index c = 0; c < 3; ++c) {
      const auto raw = std::bit_cast<std::uint32_t>(static_cast<float>(cloud(i, c)));
      unsigned char* p = bytes.data() + (static_cast<std::size_t>(i) * stride + static_cast<std::size_t>(c)) * 4;
      for (int b = 0; b < 4; ++b) p[b] = static_cast<unsigned char>(raw >> (8 * b));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

PointCloud annular_filter(const PointCloud& cloud, std::size_t lo_rank, std::size_t hi_rank) {
  require(lo_rank < hi_rank, "annular_filter: lo_rank must be below hi_rank");
  require(cloud.cols() == 3, "annular_filter: cloud must be N x 3");
  const auto n = static_cast<std::size_t>(cloud.rows());
  if (n <= lo_rank) {
    throw EmptyResult("annular_filter: " + std::to_string(n) + " points, none at rank " +
                      std::to_string(lo_rank) + " or beyond");
  }
  std::vector<double> r2(n);
  for (std::size_t i = 0; i < n; ++i) r2[i] = cloud.row(static_cast<Eigen::Index>(i)).squaredNorm();
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return r2[a] < r2[b]; });
  const std::size_t end = std::min(hi_rank, n);
  PointCloud out(static_cast<Eigen::Index>(end - lo_rank), 3);
  for (std::size_t r = lo_rank; r < end; ++r) {
    out.row(static_cast<Eigen::Index>(r - lo_rank)) = cloud.row(static_cast<Eigen::Index>(order[r]));
  }
  return out;
}

FrameSequence generate_scene(const SyntheticSceneSpec& spec) {
  require(spec.noise_sigma >= 0.0, "generate_scene: noise_sigma must be non-negative");
  require(spec.frame_rate > 0.0, "generate_scene: frame_rate must be positive");
  require(spec.velocity_jitter >= 0.0, "generate_scene: velocity_jitter must be non-negative");
  require(spec.frame_count >= 2, "generate_scene: need at least two frames");
  Rng rng(spec.seed);

  std::vector<Vec3> body_velocity;
  Vec3 sensor = spec.sensor_velocity;
  for (const auto& b : spec.bodies) body_velocity.push_back(b.velocity);
  if (spec.velocity_jitter > 0.0) {
    const double j = spec.velocity_jitter;
    for (auto& v : body_velocity) {
      v[0] += rng.uniform(-j, j);
      v[1] += rng.uniform(-j, j);
    }
    sensor[0] += rng.uniform(-j, j);
    sensor[1] += rng.uniform(-j, j);
  }

  std::size_t total = spec.background.point_count;
  for (const auto& b : spec.bodies) total += b.point_count;
  require(total > 0, "generate_scene: scene has no points");

  // Initial clean positions plus per-point kinematics (velocity relative to the sensor).
  PointCloud initial(static_cast<Eigen::Index>(total), 3);
  Matrix velocity(static_cast<Eigen::Index>(total), 3);
  Matrix acceleration(static_cast<Eigen::Index>(total), 3);
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < spec.bodies.size(); ++b) {
    const Body& body = spec.bodies[b];
    for (std::size_t i = 0; i < body.point_count; ++i, ++row) {
      const Vec3 local = sample_surface(body, rng);
      for (int c = 0; c < 3; ++c) {
        initial(row, c) = body.position[c] + local[c];
        velocity(row, c) = body_velocity[b][c] - sensor[c];
        acceleration(row, c) = body.acceleration[c];
      }
    }
  }
  for (std::size_t i = 0; i < spec.background.point_count; ++i, ++row) {
    initial(row, 0) = rng.uniform(-spec.background.extent, spec.background.extent);
    initial(row, 1) = rng.uniform(-spec.background.extent, spec.background.extent);
    initial(row, 2) = 0.0;
    for (int c = 0; c < 3; ++c) {
      velocity(row, c) = -sensor[c];
      acceleration(row, c) = 0.0;
    }
  }

  FrameSequence seq;
  seq.frame_rate = spec.frame_rate;
  const double dt = 1.0 / spec.frame_rate;
  PointCloud clean = initial;
  for (std::size_t f = 0; f < spec.frame_count; ++f) {
    PointCloud noisy = clean;
    if (spec.noise_sigma > 0.0) {
      for (Eigen::Index i = 0; i < noisy.size(); ++i) noisy.data()[i] += spec.noise_sigma * rng.normal();
    }
    seq.frames.push_back(noisy.unaryExpr(&to_float32));
    seq.clean_frames.push_back(clean);
    if (f + 1 == spec.frame_count) break;
    // Exact displacement of the quadratic trajectory over one step.
    Matrix flow = velocity / spec.frame_rate;
    if (!acceleration.isZero(0.0)) {
      flow += acceleration * (dt * dt * (static_cast<double>(f) + 0.5));
    }
    seq.flows.push_back(flow);
    clean = clean + flow;
  }
  return seq;
}

SyntheticSceneSpec parse_scene_spec(const std::string& json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    SyntheticSceneSpec spec;
    if (j.contains("bodies")) {
      for (const auto& b : j.at("bodies")) {
        Body body;
        const auto shape = b.value("shape", std::string("box"));
        if (shape == "box") {
          body.shape = BodyShape::box_surface;
        } else if (shape == "cylinder") {
          body.shape = BodyShape::cylinder_surface;
        } else {
          throw FormatError("scene spec: unknown body shape " + shape);
        }
        body.point_count = b.at("point_count").get<std::size_t>();
        body.size = read_vec3(b, "size", body.size);
        body.position = read_vec3(b, "position", body.position);
        body.velocity = read_vec3(b, "velocity", body.velocity);
        body.acceleration = read_vec3(b, "acceleration", body.acceleration);
        spec.bodies.push_back(body);
      }
    }
    if (j.contains("background")) {
      spec.background.point_count = j["background"].value("point_count", std::size_t{0});
      spec.background.extent = j["background"].value("extent", spec.background.extent);
    }
    spec.sensor_velocity = read_vec3(j, "sensor_velocity", spec.sensor_velocity);
    spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
    spec.velocity_jitter = j.value("velocity_jitter", spec.velocity_jitter);
    spec.frame_count = j.value("frame_count", spec.frame_count);
    spec.frame_rate = j.value("frame_rate", spec.frame_rate);
    spec.seed = j.value("seed", spec.seed);
    if (spec.noise_sigma < 0.0 || spec.velocity_jitter < 0.0) {
      throw FormatError("scene spec: noise_sigma and velocity_jitter must be non-negative");
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene spec: ") + e.what());
  }
}

SyntheticSceneSpec load_scene_spec(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  return parse_scene_spec(std::string(bytes.begin(), bytes.end()));
}

std::string scene_spec_to_json(const SyntheticSceneSpec& spec) {
  nlohmann::json j;
  j["bodies"] = nlohmann::json::array();
  for (const auto& b : spec.bodies) {
    j["bodies"].push_back({{"shape", b.shape == BodyShape::box_surface ? "box" : "cylinder"},
                           {"point_count", b.point_count},
                           {"size", b.size},
                           {"position", b.position},
                           {"velocity", b.velocity},
                           {"acceleration", b.acceleration}});
  }
  j["background"] = {{"point_count", spec.background.point_count},
                     {"extent", spec.background.extent}};
  j["sensor_velocity"] = spec.sensor_velocity;
  j["noise_sigma"] = spec.noise_sigma;
  j["velocity_jitter"] = spec.velocity_jitter;
  j["frame_count"] = spec.frame_count;
  j["frame_rate"] = spec.frame_rate;
  j["seed"] = spec.seed;
  return j.dump(2);
}

void export_flow(const PointCloud& points, const Matrix& vectors,
                 const std::filesystem::path& path) {
  require(points.cols() == 3 && vectors.cols() == 3 && points.rows() == vectors.rows(),
          "export_flow: points and vectors must both be N x 3");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char line[160];
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %.6f %.6f %.6f\n", points(i, 0),
                  points(i, 1), points(i, 2), vectors(i, 0), vectors(i, 1), vectors(i, 2));
    out << line;
  }
  if (!out) throw IoError("cannot write " + path.string());
}

FlowField read_flow(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::array<double, 6>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::array<double, 6> r{};
    for (auto& v : r) {
      if (!(ss >> v)) throw FormatError(path.string() + ": malformed flow line");
    }
    rows.push_back(r);
  }
  FlowField field;
  field.points.resize(static_cast<Eigen::Index>(rows.size()), 3);
  field.vectors.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      field.points(static_cast<Eigen::Index>(i), c) = rows[i][c];
      field.vectors(static_cast<Eigen::Index>(i), c) = rows[i][c + 3];
    }
  }
  check_finite(field.points, path.string());
  check_finite(field.vectors, path.string());
  return field;
}

}  // namespace tempcloud::dataio

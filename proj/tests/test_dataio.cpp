#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

#include "oracles.hpp"
#include "tempcloud/dataio.hpp"

using namespace tempcloud;
using namespace tempcloud::dataio;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tempcloud_dataio_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_floats(const fs::path& path, const std::vector<float>& values, std::size_t extra_bytes = 0) {
  std::ofstream out(path, std::ios::binary);
  for (float f : values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.put(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  for (std::size_t i = 0; i < extra_bytes; ++i) out.put(0);
}

SyntheticSceneSpec one_box(Vec3 velocity) {
  SyntheticSceneSpec s;
  Body b;
  b.point_count = 50;
  b.velocity = velocity;
  s.bodies.push_back(b);
  s.background = {30, 3.0};
  s.frame_count = 6;
  s.seed = 4;
  return s;
}

}  // namespace

TEST(FrameBin, SingleRecord) {
  const auto path = scratch("one.bin");
  write_floats(path, {1.0f, 2.0f, 3.0f, 0.5f, 0.0f});
  const auto cloud = load_frame_bin(path);
  ASSERT_EQ(cloud.rows(), 1);
  EXPECT_EQ(cloud(0, 0), 1.0);
  EXPECT_EQ(cloud(0, 1), 2.0);
  EXPECT_EQ(cloud(0, 2), 3.0);
}

TEST(FrameBin, TrailingByteRejected) {
  const auto path = scratch("ragged.bin");
  write_floats(path, {1.0f, 2.0f, 3.0f, 0.5f, 0.0f}, 1);
  EXPECT_THROW(load_frame_bin(path), FormatError);
}

TEST(FrameBin, RoundTripIsFloatExact) {
  Rng rng(2);
  const Matrix points = oracle::random_points(rng, 100, 3, -50.0, 50.0);
  const auto path = scratch("round.bin");
  write_frame_bin(path, points);
  EXPECT_EQ(fs::file_size(path), 100u * 5 * 4);
  const auto back = load_frame_bin(path);
  ASSERT_EQ(back.rows(), 100);
  for (Eigen::Index i = 0; i < points.size(); ++i) {
    EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(points.data()[i])));
  }
  write_frame_bin(path, back, 3);
  EXPECT_EQ(load_frame_bin(path, 3), back);
}

TEST(FrameBin, NonFiniteRejected) {
  const auto path = scratch("nan.bin");
  write_floats(path, {1.0f, std::numeric_limits<float>::quiet_NaN(), 3.0f, 0.0f, 0.0f});
  EXPECT_THROW(load_frame_bin(path), FormatError);
  write_floats(path, {1.0f, 2.0f, std::numeric_limits<float>::infinity(), 0.0f, 0.0f});
  EXPECT_THROW(load_frame_bin(path), FormatError);
}

TEST(FrameBin, MissingFile) {
  EXPECT_THROW(load_frame_bin(scratch("absent.bin")), IoError);
}

TEST(FrameBin, EmptyFileGivesNoPoints) {
  const auto path = scratch("empty.bin");
  write_floats(path, {});
  EXPECT_EQ(load_frame_bin(path).rows(), 0);
}

TEST(Annulus, LargeCloudKeepsRankBand) {
  Rng rng(5);
  const Matrix cloud = oracle::random_points(rng, 40000, 3, -60.0, 60.0);
  const auto kept = annular_filter(cloud);
  ASSERT_EQ(kept.rows(), 22000);
  const Eigen::VectorXd r2 = cloud.rowwise().squaredNorm();
  std::vector<double> sorted(r2.data(), r2.data() + r2.size());
  std::sort(sorted.begin(), sorted.end());
  for (Eigen::Index i = 0; i < kept.rows(); ++i) {
    EXPECT_EQ(kept.row(i).squaredNorm(), sorted[12000 + static_cast<std::size_t>(i)]);
  }
}

TEST(Annulus, SmallCloud) {
  Rng rng(6);
  const Matrix cloud = oracle::random_points(rng, 20000, 3, -10.0, 10.0);
  EXPECT_EQ(annular_filter(cloud).rows(), 8000);
  const Matrix tiny = oracle::random_points(rng, 10, 3, -1.0, 1.0);
  const auto all = annular_filter(tiny, 0, 100);
  ASSERT_EQ(all.rows(), 10);
  for (Eigen::Index i = 1; i < all.rows(); ++i) {
    EXPECT_LE(all.row(i - 1).squaredNorm(), all.row(i).squaredNorm());
  }
  EXPECT_THROW(annular_filter(tiny), EmptyResult);
  EXPECT_THROW(annular_filter(tiny, 5, 3), InvalidArgument);
}

TEST(Scene, StaticFramesRepeat) {
  auto spec = one_box({0.0, 0.0, 0.0});
  const auto seq = generate_scene(spec);
  ASSERT_EQ(seq.frames.size(), 6u);
  ASSERT_EQ(seq.flows.size(), 5u);
  for (const auto& f : seq.frames) EXPECT_EQ(f, seq.frames[0]);
  for (const auto& v : seq.flows) EXPECT_EQ(v.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Scene, ConstantVelocityStep) {
  auto spec = one_box({2.0, 0.0, 0.0});
  const auto seq = generate_scene(spec);
  const Eigen::Index box = 50;
  for (std::size_t k = 0; k + 1 < seq.frames.size(); ++k) {
    const Matrix d = seq.frames[k + 1] - seq.frames[k];
    for (Eigen::Index i = 0; i < box; ++i) {
      EXPECT_NEAR(d(i, 0), 0.1, 1e-6);
      EXPECT_NEAR(d(i, 1), 0.0, 1e-6);
    }
    for (Eigen::Index i = box; i < d.rows(); ++i) EXPECT_NEAR(d.row(i).norm(), 0.0, 1e-6);
  }
}

TEST(Scene, SensorMotionShiftsEverything) {
  auto spec = one_box({0.0, 0.0, 0.0});
  spec.sensor_velocity = {4.0, 0.0, 0.0};
  const auto seq = generate_scene(spec);
  const Matrix d = seq.clean_frames[1] - seq.clean_frames[0];
  for (Eigen::Index i = 0; i < d.rows(); ++i) EXPECT_NEAR(d(i, 0), -0.2, 1e-12);
}

TEST(Scene, DeterministicAndSeedSensitive) {
  auto spec = one_box({1.0, 0.5, 0.0});
  spec.noise_sigma = 0.02;
  spec.velocity_jitter = 0.5;
  const auto a = generate_scene(spec);
  const auto b = generate_scene(spec);
  for (std::size_t k = 0; k < a.frames.size(); ++k) EXPECT_EQ(a.frames[k], b.frames[k]);
  spec.seed = 5;
  EXPECT_NE(generate_scene(spec).frames[0], a.frames[0]);
}

TEST(Scene, FlowConsistency) {
  auto spec = one_box({1.0, -2.0, 0.0});
  spec.bodies[0].acceleration = {0.5, 0.0, 0.0};
  spec.bodies.push_back(spec.bodies[0]);
  spec.bodies[1].shape = BodyShape::cylinder_surface;
  spec.bodies[1].position = {3.0, 0.0, 1.0};
  spec.sensor_velocity = {2.0, 0.0, 0.0};
  spec.noise_sigma = 0.05;
  const auto seq = generate_scene(spec);
  for (std::size_t k = 0; k + 1 < seq.frames.size(); ++k) {
    EXPECT_LT((seq.clean_frames[k] + seq.flows[k] - seq.clean_frames[k + 1]).cwiseAbs().maxCoeff(),
              1e-9);
  }
  // Noisy frames stay near their clean counterparts.
  EXPECT_LT((seq.frames[2] - seq.clean_frames[2]).cwiseAbs().maxCoeff(), 0.5);
  for (const auto& f : seq.frames) {
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      EXPECT_EQ(f.data()[i], static_cast<double>(static_cast<float>(f.data()[i])));
    }
  }
}

TEST(Scene, AccelerationIsQuadratic) {
  auto spec = one_box({0.0, 0.0, 0.0});
  spec.bodies[0].acceleration = {2.0, 0.0, 0.0};
  spec.background.point_count = 0;
  const auto seq = generate_scene(spec);
  const double dt = 1.0 / 20.0;
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    const double t = static_cast<double>(k) * dt;
    const double expected = 0.5 * 2.0 * t * t;
    EXPECT_NEAR((seq.clean_frames[k] - seq.clean_frames[0])(0, 0), expected, 1e-12);
  }
}

TEST(Scene, BadSpecs) {
  SyntheticSceneSpec empty;
  EXPECT_THROW(generate_scene(empty), InvalidArgument);
  auto spec = one_box({0.0, 0.0, 0.0});
  spec.frame_rate = 0.0;
  EXPECT_THROW(generate_scene(spec), InvalidArgument);
  spec = one_box({0.0, 0.0, 0.0});
  spec.frame_count = 1;
  EXPECT_THROW(generate_scene(spec), InvalidArgument);
}

TEST(SceneJson, RoundTrip) {
  auto spec = one_box({1.0, 2.0, 0.0});
  spec.bodies.push_back(spec.bodies[0]);
  spec.bodies[1].shape = BodyShape::cylinder_surface;
  spec.noise_sigma = 0.01;
  spec.velocity_jitter = 0.3;
  const auto back = parse_scene_spec(scene_spec_to_json(spec));
  EXPECT_EQ(scene_spec_to_json(back), scene_spec_to_json(spec));
  ASSERT_EQ(back.bodies.size(), 2u);
  EXPECT_EQ(back.bodies[1].shape, BodyShape::cylinder_surface);
  EXPECT_EQ(back.bodies[0].velocity[1], 2.0);
}

TEST(SceneJson, Malformed) {
  EXPECT_THROW(parse_scene_spec("{"), FormatError);
  EXPECT_THROW(parse_scene_spec(R"({"bodies":[{"shape":"sphere","point_count":3}]})"),
               FormatError);
  EXPECT_THROW(parse_scene_spec(R"({"bodies":"none"})"), FormatError);
}

TEST(SceneJson, ShippedAcceptanceScene) {
  const auto spec = load_scene_spec(fs::path(TEMPCLOUD_SOURCE_DIR) / "configs/acceptance_scene.json");
  EXPECT_EQ(spec.bodies.size(), 2u);
  EXPECT_EQ(generate_scene(spec).frames.front().rows(), 512);
}

TEST(FlowExport, LineFormat) {
  PointCloud p(2, 3);
  p << 1.0, 2.0, 3.0, -0.5, 0.25, 1e-7;
  Matrix v(2, 3);
  v << 0.1, 0.0, -0.1, 1.0, 2.0, 3.0;
  const auto path = scratch("flow.txt");
  export_flow(p, v, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "1.000000 2.000000 3.000000 0.100000 0.000000 -0.100000");
  std::getline(in, line);
  EXPECT_EQ(line, "-0.500000 0.250000 0.000000 1.000000 2.000000 3.000000");
  EXPECT_FALSE(std::getline(in, line));
  const auto back = read_flow(path);
  EXPECT_EQ(back.points.rows(), 2);
  EXPECT_NEAR((back.vectors - v).cwiseAbs().maxCoeff(), 0.0, 5e-7);
  EXPECT_THROW(export_flow(p, Matrix::Zero(3, 3), path), InvalidArgument);
}

TEST(FlowExport, ReadRejectsShortLine) {
  const auto path = scratch("bad_flow.txt");
  std::ofstream(path) << "1 2 3 4 5\n";
  EXPECT_THROW(read_flow(path), FormatError);
}

TEST(Finite, Check) {
  Matrix m = Matrix::Zero(2, 2);
  EXPECT_NO_THROW(check_finite(m, "m"));
  m(1, 1) = std::nan("");
  EXPECT_THROW(check_finite(m, "m"), FormatError);
}

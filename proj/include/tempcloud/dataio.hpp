#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tempcloud/types.hpp"

namespace tempcloud::dataio {

inline constexpr std::size_t kDefaultStride = 5;
inline constexpr std::size_t kAnnulusInner = 12000;
inline constexpr std::size_t kAnnulusOuter = 34000;

/// Little-endian float32 records of `stride` floats; the first three are x, y, z.
PointCloud load_frame_bin(const std::filesystem::path& path, std::size_t stride = kDefaultStride);
/// Writes x, y, z and zero-fills the remaining stride - 3 floats of each record.
void write_frame_bin(const std::filesystem::path& path, const PointCloud& cloud,
                     std::size_t stride = kDefaultStride);

/// Keeps the points whose distance-from-origin rank lies in [lo_rank, hi_rank),
/// ordered by that rank (ties by original index).
PointCloud annular_filter(const PointCloud& cloud, std::size_t lo_rank = kAnnulusInner,
                          std::size_t hi_rank = kAnnulusOuter);

using Vec3 = std::array<double, 3>;

enum class BodyShape { box_surface, cylinder_surface };

struct Body {
  BodyShape shape = BodyShape::box_surface;
  std::size_t point_count = 0;
  Vec3 size{1.0, 1.0, 1.0};  // box extents; cylinder uses size[0] as diameter, size[2] as height
  Vec3 position{0.0, 0.0, 0.0};
  Vec3 velocity{0.0, 0.0, 0.0};
  Vec3 acceleration{0.0, 0.0, 0.0};
};

struct Background {
  std::size_t point_count = 0;
  double extent = 10.0;  // ground points cover [-extent, extent]^2 at z = 0
};

struct SyntheticSceneSpec {
  std::vector<Body> bodies;
  Background background;
  Vec3 sensor_velocity{0.0, 0.0, 0.0};
  double noise_sigma = 0.0;
  /// Horizontal velocities of bodies and sensor are offset by a seeded draw
  /// from [-velocity_jitter, velocity_jitter] m/s per axis.
  double velocity_jitter = 0.0;
  std::size_t frame_count = 10;
  double frame_rate = 20.0;
  std::uint64_t seed = 0;
};

struct FrameSequence {
  std::vector<PointCloud> frames;        // noisy, float32-representable
  std::vector<PointCloud> clean_frames;  // before noise
  std::vector<Matrix> flows;             // flows[k] = clean_frames[k+1] - clean_frames[k]
  double frame_rate = 20.0;
};

/// Point p(t) = p0 + v t + a t^2 / 2 with t = frame / frame_rate, seen from a
/// sensor translating at sensor_velocity. Same seed, same sequence.
FrameSequence generate_scene(const SyntheticSceneSpec& spec);

/// Scene spec from a JSON object with keys mirroring SyntheticSceneSpec.
SyntheticSceneSpec parse_scene_spec(const std::string& json_text);
SyntheticSceneSpec load_scene_spec(const std::filesystem::path& path);
std::string scene_spec_to_json(const SyntheticSceneSpec& spec);

/// One `x y z dx dy dz` line per point, six decimals.
void export_flow(const PointCloud& points, const Matrix& vectors,
                 const std::filesystem::path& path);
struct FlowField {
  PointCloud points;
  Matrix vectors;
};
FlowField read_flow(const std::filesystem::path& path);

/// Throws FormatError when any coordinate is NaN or infinite.
void check_finite(const Matrix& m, const std::string& what);

}  // namespace tempcloud::dataio

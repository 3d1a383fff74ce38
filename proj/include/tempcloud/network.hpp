#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tempcloud/layers.hpp"

namespace tempcloud::network {

enum class Variant { pnpp_ds, pnpp_nods, ec_ds, ec_nods, two_frame_pnpp_ds };

std::string to_string(Variant v);
/// Accepts PNPP_DS, PNPP_NODS, EC_DS, EC_NODS, TWO_FRAME_PNPP_DS (any case).
Variant parse_variant(const std::string& name);

struct NetworkConfig {
  Variant variant = Variant::pnpp_ds;
  std::size_t input_frames = 4;
  /// fe1, flow1, fe2, [flow2], fe3, then upconv1, upconv2, featprop for the
  /// downsampling variants.
  std::vector<layers::LayerSpec> stages;
  std::vector<std::size_t> head_widths;
  std::size_t feature_max_neighbors = 32;
  std::size_t flow_max_neighbors = 64;
  std::size_t fps_start_index = 0;

  bool downsampling() const;
  bool has_stage(const std::string& name) const;
  const layers::LayerSpec& stage(const std::string& name) const;

  bool operator==(const NetworkConfig&) const = default;
};

/// Layer table for a variant.
NetworkConfig make_config(Variant v);

std::string serialize_config(const NetworkConfig& config);
NetworkConfig parse_config(const std::string& text);

struct ParamSlot {
  std::string name;
  Matrix* value;
  bool decay;  // weights decay; biases and batch-norm affine terms do not
};

struct NamedTensor {
  std::string name;
  Matrix* value;
};

class Network {
 public:
  NetworkConfig config;
  std::map<std::string, layers::MlpParams> mlps;

  /// Trainable tensors in a fixed order.
  std::vector<ParamSlot> parameters();
  /// Trainable tensors plus batch-norm running statistics.
  std::vector<NamedTensor> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
  std::size_t parameter_count() const;

  /// Rounds every tensor to float32 precision, the checkpoint storage format.
  void round_to_storage();

  layers::MlpParams& mlp(const std::string& name);
};

/// Builds the layer table for config with seeded fan-in uniform initialization.
Network build_network(const NetworkConfig& config, std::uint64_t seed);
Network build_network(Variant v, std::uint64_t seed);

/// Tape-level forward pass; frames are ordered oldest to newest.
struct TapePrediction {
  Var motion;
  Var predicted;
  std::map<std::string, layers::FeatureCloud> stages;
};
TapePrediction forward(layers::PassContext& ctx, Network& net, std::span<const Var> frames);

struct Prediction {
  Matrix motion;         // per x_t point, meters per frame step
  PointCloud predicted;  // x_t + motion
  std::map<std::string, Matrix> stage_features;
};

/// Predicts the frame after frames.back(). Train mode updates the batch-norm
/// running statistics.
Prediction predict_next(Network& net, std::span<const PointCloud> frames,
                        layers::BnMode mode = layers::BnMode::eval);

/// Autoregressive prediction: each output joins the window and the oldest
/// frame drops out.
std::vector<Prediction> rollout(Network& net, std::span<const PointCloud> frames,
                                std::size_t horizon);

/// Checkpoint codec. Layout: "TLFP", version byte, u32 config length, config
/// text, u32 tensor count, then per tensor u32 name length, name, u32 rank,
/// u32 dims, float32 payload; a CRC32 of all preceding bytes closes the file.
/// All integers little-endian.
std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace tempcloud::network

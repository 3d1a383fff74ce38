#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tempcloud/dataio.hpp"
#include "tempcloud/metrics.hpp"
#include "tempcloud/network.hpp"
#include "tempcloud/training.hpp"

namespace tempcloud::commands {

/// Parameters shared by all subcommands. Keys of the JSON config file match
/// the field names.
struct RunConfig {
  std::string variant = "PNPP_DS";
  std::uint64_t seed = 0;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir = ".";
  std::filesystem::path checkpoint;
  std::filesystem::path second_checkpoint;  // optional extra eval method
  std::filesystem::path scene_spec;
  std::size_t scene_count = 1;
  std::size_t horizon = 5;
  double alpha = 1.0;
  double beta = 0.02;
  double first_max_lr = 1e-3;
  double later_max_lr = 1e-4;
  std::size_t max_epochs = 10;
  std::size_t max_windows_per_epoch = 0;
  std::size_t accumulation = 4;
  double weight_decay = 1e-4;
  double validation_fraction = 0.1;
  bool full_unroll = false;
  std::size_t emd_points = metrics::kExactEmdLimit;  // FPS subsample size for exact EMD
  double auction_epsilon = 1e-3;
  std::size_t window_stride = 1;
  std::size_t scene = 0;  // predict / flow: which scene of the dataset
  std::size_t start = 0;  // predict / flow: first input frame
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// One scene as stored on disk.
struct SceneData {
  std::vector<PointCloud> frames;
  std::vector<Matrix> flows;  // may be empty (no ground truth)
};

/// Manifest lines: `scene frame_path flow_path`, paths relative to the
/// dataset directory, flow_path `-` for the last frame of a scene.
std::vector<SceneData> load_dataset(const std::filesystem::path& dir);

/// Windows with input_frames inputs and future_frames targets over every scene.
std::vector<training::Window> dataset_windows(const std::vector<SceneData>& scenes,
                                              std::size_t input_frames,
                                              std::size_t future_frames, std::size_t stride = 1);

/// Writes scene_count scenes generated from config.scene_spec; scene i uses
/// seed splitmix64(config.seed + i).
void cmd_synth(const RunConfig& config);
/// Same with an in-memory spec.
void write_synthetic_dataset(const dataio::SyntheticSceneSpec& spec, std::size_t scene_count,
                             std::uint64_t seed, const std::filesystem::path& dir);

/// Trains on data_dir and writes model.tlfp and train_log.csv to out_dir.
training::TrainLog cmd_train(const RunConfig& config);

struct EvalRow {
  std::string method;
  std::string frame;  // 1..horizon or avg
  double cd_mean = 0.0;
  double cd_sum = 0.0;
  double emd_mean = 0.0;
  double emd_sum = 0.0;
};

struct EvalTable {
  std::vector<EvalRow> rows;          // exact EMD on FPS subsamples
  std::vector<EvalRow> auction_rows;  // auction EMD at full size, CD repeated

  const EvalRow& find(const std::string& method, const std::string& frame) const;
};

void write_eval_csv(const std::vector<EvalRow>& rows, const std::filesystem::path& path);

/// Rolls the model out over every window of data_dir and compares against the
/// identity baseline. Writes eval.csv, eval_auction.csv and per_point_error.txt.
EvalTable cmd_eval(const RunConfig& config);

/// Evaluation core without file output.
EvalTable evaluate_windows(std::vector<std::pair<std::string, network::Network*>> models,
                           const std::vector<training::Window>& windows,
                           const RunConfig& config);

/// Writes pred_001.bin ... for config.horizon steps from the selected window.
std::vector<PointCloud> cmd_predict(const RunConfig& config);

struct FlowSummary {
  double epe = 0.0;             // model motion vs ground truth, meters
  double zero_motion_epe = 0.0;
  bool has_ground_truth = false;
};

/// Writes flow.txt for the selected window and, with ground truth, epe.csv.
FlowSummary cmd_flow(const RunConfig& config);

/// Mean end-point error of the one-step motion over windows with ground truth.
FlowSummary flow_error(network::Network& net, const std::vector<training::Window>& windows);

}  // namespace tempcloud::commands

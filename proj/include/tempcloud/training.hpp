#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "tempcloud/metrics.hpp"
#include "tempcloud/network.hpp"

namespace tempcloud::training {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Moment accumulators, one pair per parameter tensor.
struct OptimizerState {
  AdamWHyper hyper;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;

  /// Zeroed accumulators shaped like params.
  static OptimizerState for_params(const std::vector<Matrix*>& params, AdamWHyper hyper = {});
};

/// One decoupled-decay Adam update. decays[i] says whether params[i] takes
/// weight decay. Accumulators are created on the first call if empty.
void adamw_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                const std::vector<bool>& decays, OptimizerState& state, double lr);

/// Cosine annealing over one cycle of period steps, 0 <= t <= period.
double cosine_lr(double t, double period, double max_lr, double min_lr);

/// Input frames (oldest first) and the frames that follow them.
struct Window {
  std::vector<PointCloud> inputs;
  std::vector<PointCloud> targets;
  std::vector<Matrix> target_flow;  // ground-truth motion at inputs.back(), when known
};

/// Sliding windows over a sequence: input_frames inputs followed by
/// future_frames targets, advancing by stride.
std::vector<Window> make_windows(const std::vector<PointCloud>& frames,
                                 const std::vector<Matrix>& flows, std::size_t input_frames,
                                 std::size_t future_frames, std::size_t stride = 1);

struct TrainConfig {
  metrics::LossWeights weights;
  double emd_epsilon = metrics::kTrainingEmdEpsilon;
  AdamWHyper adamw;
  std::size_t horizons = 3;
  double first_max_lr = 1e-3;
  double later_max_lr = 1e-4;
  double min_lr_ratio = 0.01;
  std::size_t max_epochs = 10;         // per horizon
  double convergence_threshold = 0.01;  // relative validation improvement per epoch
  std::size_t accumulation = 4;        // windows per optimizer step
  std::size_t cycle_epochs = 0;        // cosine period in epochs; 0 = max_epochs (one cycle per horizon)
  std::size_t max_windows_per_epoch = 0;  // 0 = all training windows
  double validation_fraction = 0.1;
  bool full_unroll = false;
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::size_t horizon = 0;
  std::int64_t step = 0;  // -1 marks a validation row
  double lr = 0.0;
  double loss = 0.0;
  double cd = 0.0;
  double emd = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> rows;
  std::vector<std::size_t> epochs_per_horizon;

  void write_csv(std::ostream& out) const;
  void save_csv(const std::filesystem::path& path) const;
};

/// Split of window indices by a seed-stable hash.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
Split split_windows(std::size_t count, double validation_fraction, std::uint64_t seed);

/// Mean loss of the depth-horizon rollout against targets[horizon - 1].
metrics::LossResult rollout_loss(network::Network& net, const Window& window,
                                 std::size_t horizon, const TrainConfig& config);

/// Called after every optimizer step with the record just logged.
using StepHook = std::function<void(const network::Network&, const StepRecord&)>;

/// Curriculum over horizons 1..config.horizons. At horizon 1 batch norm runs in
/// train mode; later horizons reuse the running statistics and feed the model's
/// own predictions back as inputs.
TrainLog train_curriculum(network::Network& net, const std::vector<Window>& windows,
                          const TrainConfig& config, const StepHook& hook = {});

/// Loss value and the output it is measured on, with dL/d output.
struct Objective {
  Var output;
  Matrix seed;
  double value = 0.0;
};
using ObjectiveFn = std::function<Objective(layers::PassContext&)>;

struct GradBlock {
  std::string name;
  Matrix* value;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples_per_block = 0;  // 0 = every entry
  double absolute_floor = 1e-6;  // blocks with smaller gradient norms are compared in absolute terms
  layers::BnMode mode = layers::BnMode::train;
  std::uint64_t seed = 0;
};

struct BlockError {
  std::string name;
  double relative_error = 0.0;
  std::size_t checked = 0;
  double analytic_norm = 0.0;  // over the checked entries
  double numeric_norm = 0.0;
};

struct GradCheckReport {
  std::vector<BlockError> blocks;
  double max_error = 0.0;
  bool passed = true;
};

/// Central differences against tape gradients. Index sets chosen on the first
/// evaluation are replayed for every perturbed one. Batch-norm running
/// statistics may be touched by train-mode evaluations.
GradCheckReport gradient_check(const std::vector<GradBlock>& blocks, const ObjectiveFn& objective,
                               const GradCheckOptions& options = {});

/// Network check with the combined loss; the loss matching is held fixed.
GradCheckReport gradient_check_network(network::Network& net,
                                       const std::vector<PointCloud>& frames,
                                       const PointCloud& target,
                                       const metrics::LossWeights& weights,
                                       const GradCheckOptions& options = {});

}  // namespace tempcloud::training

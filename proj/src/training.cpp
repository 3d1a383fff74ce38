#include "tempcloud/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>

#include "tempcloud/parallel.hpp"
#include "tempcloud/random.hpp"

namespace tempcloud::training {

using layers::BnMode;
using layers::PassContext;

OptimizerState OptimizerState::for_params(const std::vector<Matrix*>& params, AdamWHyper hyper) {
  OptimizerState state;
  state.hyper = hyper;
  for (const Matrix* p : params) {
    state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
    state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return state;
}

void adamw_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                const std::vector<bool>& decays, OptimizerState& state, double lr) {
  require(params.size() == grads.size() && params.size() == decays.size(),
          "adamw_step: params, grads and decay flags differ in count");
  if (state.first_moment.empty() && !params.empty()) {
    state = OptimizerState::for_params(params, state.hyper);
  }
  require(state.first_moment.size() == params.size() &&
              state.second_moment.size() == params.size(),
          "adamw_step: optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = *params[i];
    require(grads[i].rows() == p.rows() && grads[i].cols() == p.cols() &&
                state.first_moment[i].rows() == p.rows() &&
                state.first_moment[i].cols() == p.cols(),
            "adamw_step: shape mismatch at parameter " + std::to_string(i));
  }
  require(lr >= 0.0, "adamw_step: negative learning rate");

  const auto& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix& g = grads[i];
    if (decays[i] && h.weight_decay != 0.0) p *= 1.0 - lr * h.weight_decay;
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double m_hat = m.data()[k] / correction1;
      const double v_hat = v.data()[k] / correction2;
      p.data()[k] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

double cosine_lr(double t, double period, double max_lr, double min_lr) {
  require(period > 0.0, "cosine_lr: period must be positive");
  require(t >= 0.0 && t <= period, "cosine_lr: step outside the cycle");
  return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t / period));
}

std::vector<Window> make_windows(const std::vector<PointCloud>& frames,
                                 const std::vector<Matrix>& flows, std::size_t input_frames,
                                 std::size_t future_frames, std::size_t stride) {
  require(input_frames >= 1 && future_frames >= 1 && stride >= 1,
          "make_windows: counts must be positive");
  std::vector<Window> out;
  const std::size_t span = input_frames + future_frames;
  for (std::size_t start = 0; start + span <= frames.size(); start += stride) {
    Window w;
    w.inputs.assign(frames.begin() + static_cast<std::ptrdiff_t>(start),
                    frames.begin() + static_cast<std::ptrdiff_t>(start + input_frames));
    w.targets.assign(frames.begin() + static_cast<std::ptrdiff_t>(start + input_frames),
                     frames.begin() + static_cast<std::ptrdiff_t>(start + span));
    for (std::size_t j = 0; j < future_frames; ++j) {
      const std::size_t k = start + input_frames - 1 + j;
      if (k < flows.size()) w.target_flow.push_back(flows[k]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "horizon,step,lr,loss,cd,emd\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%lld,%.17g,%.17g,%.17g,%.17g\n", r.horizon,
                  static_cast<long long>(r.step), r.lr, r.loss, r.cd, r.emd);
    out << line;
  }
}

void TrainLog::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv(out);
  if (!out) throw IoError("cannot write " + path.string());
}

Split split_windows(std::size_t count, double validation_fraction, std::uint64_t seed) {
  require(validation_fraction >= 0.0 && validation_fraction < 1.0,
          "split_windows: validation fraction must be in [0, 1)");
  Split split;
  std::vector<double> draw(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i)));
    draw[i] = static_cast<double>(h >> 11) * 0x1.0p-53;
    (draw[i] < validation_fraction ? split.validation : split.train).push_back(i);
  }
  // Small datasets can hash every window to one side.
  if (validation_fraction > 0.0 && split.validation.empty() && count >= 2) {
    const auto lowest = static_cast<std::size_t>(
        std::min_element(draw.begin(), draw.end()) - draw.begin());
    split.validation.push_back(lowest);
    split.train.erase(std::find(split.train.begin(), split.train.end(), lowest));
  }
  return split;
}

metrics::LossResult rollout_loss(network::Network& net, const Window& window,
                                 std::size_t horizon, const TrainConfig& config) {
  require(horizon >= 1 && window.targets.size() >= horizon,
          "rollout_loss: window has fewer targets than the horizon");
  const auto preds = network::rollout(net, window.inputs, horizon);
  return metrics::combined_loss_with_grad(preds.back().predicted, window.targets[horizon - 1],
                                          config.weights, config.emd_epsilon);
}

namespace {

struct Totals {
  double loss = 0.0;
  double cd = 0.0;
  double emd = 0.0;
};

Totals validate(network::Network& net, const std::vector<Window>& windows,
                const std::vector<std::size_t>& subset, std::size_t horizon,
                const TrainConfig& config) {
  std::vector<metrics::LossResult> results(subset.size());
  parallel_for(subset.size(), [&](std::size_t i) {
    results[i] = rollout_loss(net, windows[subset[i]], horizon, config);
  });
  Totals t;
  for (const auto& r : results) {
    t.loss += r.loss;
    t.cd += r.cd;
    t.emd += r.emd;
  }
  const double n = static_cast<double>(std::max<std::size_t>(subset.size(), 1));
  return {t.loss / n, t.cd / n, t.emd / n};
}

/// Forward and backward for one window; gradients are added into grads.
metrics::LossResult window_gradient(network::Network& net, const std::vector<network::ParamSlot>& params,
                                    const Window& window, std::size_t horizon, BnMode mode,
                                    const TrainConfig& config, std::vector<Matrix>& grads) {
  Tape tape(true);
  PassContext ctx(tape, mode);
  std::vector<Var> frames;
  if (config.full_unroll) {
    for (const auto& f : window.inputs) frames.push_back(tape.constant(f));
    for (std::size_t s = 1; s < horizon; ++s) {
      auto step = network::forward(ctx, net, frames);
      frames.erase(frames.begin());
      frames.push_back(step.predicted);
    }
  } else {
    // Earlier steps are constants: no tape, no gradient.
    std::vector<PointCloud> values = window.inputs;
    for (std::size_t s = 1; s < horizon; ++s) {
      auto step = network::predict_next(net, values, mode);
      values.erase(values.begin());
      values.push_back(std::move(step.predicted));
    }
    for (auto& f : values) frames.push_back(tape.constant(std::move(f)));
  }
  auto out = network::forward(ctx, net, frames);
  auto loss = metrics::combined_loss_with_grad(out.predicted->value, window.targets[horizon - 1],
                                               config.weights, config.emd_epsilon);
  layers::backward(ctx, out.predicted, loss.grad);
  for (std::size_t i = 0; i < params.size(); ++i) grads[i] += ctx.gradient(*params[i].value);
  return loss;
}

}  // namespace

TrainLog train_curriculum(network::Network& net, const std::vector<Window>& windows,
                          const TrainConfig& config, const StepHook& hook) {
  require(config.horizons >= 1, "train_curriculum: horizons must be at least 1");
  require(config.accumulation >= 1 && config.max_epochs >= 1,
          "train_curriculum: accumulation and epoch counts must be positive");
  const std::size_t cycle_epochs = config.cycle_epochs == 0 ? config.max_epochs : config.cycle_epochs;
  require(!windows.empty(), "train_curriculum: no training windows");
  for (const auto& w : windows) {
    require(w.inputs.size() == net.config.input_frames,
            "train_curriculum: window input count does not match the network");
    require(w.targets.size() >= config.horizons,
            "train_curriculum: window too short for " + std::to_string(config.horizons) +
                " future frames");
  }

  const Split split = split_windows(windows.size(), config.validation_fraction, config.seed);
  require(!split.train.empty(), "train_curriculum: no windows left for training");
  const auto& val_set = split.validation.empty() ? split.train : split.validation;

  auto params = net.parameters();
  std::vector<Matrix*> values;
  std::vector<bool> decays;
  for (const auto& p : params) {
    values.push_back(p.value);
    decays.push_back(p.decay);
  }
  OptimizerState state = OptimizerState::for_params(values, config.adamw);

  TrainLog log;
  std::int64_t step = 0;
  for (std::size_t h = 1; h <= config.horizons; ++h) {
    const BnMode mode = h == 1 ? BnMode::train : BnMode::frozen_stats;
    const double max_lr = h == 1 ? config.first_max_lr : config.later_max_lr;
    const double min_lr = max_lr * config.min_lr_ratio;

    Totals baseline = validate(net, windows, val_set, h, config);
    log.rows.push_back({h, -1, max_lr, baseline.loss, baseline.cd, baseline.emd});

    std::size_t step_in_horizon = 0;
    std::size_t epochs = 0;
    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
      std::vector<std::size_t> order = split.train;
      Rng rng(splitmix64(config.seed ^ (static_cast<std::uint64_t>(h) << 32) ^ epoch));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      if (config.max_windows_per_epoch > 0 && order.size() > config.max_windows_per_epoch) {
        order.resize(config.max_windows_per_epoch);
      }
      const std::size_t steps_per_epoch =
          (order.size() + config.accumulation - 1) / config.accumulation;
      const std::size_t cycle_steps = steps_per_epoch * cycle_epochs;

      double lr = max_lr;
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        lr = cosine_lr(static_cast<double>(step_in_horizon % cycle_steps),
                       static_cast<double>(cycle_steps), max_lr, min_lr);
        std::vector<Matrix> grads;
        for (const auto& p : params) grads.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
        Totals batch;
        const std::size_t begin = s * config.accumulation;
        const std::size_t end = std::min(order.size(), begin + config.accumulation);
        for (std::size_t i = begin; i < end; ++i) {
          const auto r = window_gradient(net, params, windows[order[i]], h, mode, config, grads);
          batch.loss += r.loss;
          batch.cd += r.cd;
          batch.emd += r.emd;
        }
        const double n = static_cast<double>(end - begin);
        for (auto& g : grads) g /= n;
        adamw_step(values, grads, decays, state, lr);
        net.round_to_storage();
        ++step;
        ++step_in_horizon;
        log.rows.push_back({h, step, lr, batch.loss / n, batch.cd / n, batch.emd / n});
        if (hook) hook(net, log.rows.back());
      }

      const Totals current = validate(net, windows, val_set, h, config);
      log.rows.push_back({h, -1, lr, current.loss, current.cd, current.emd});
      ++epochs;
      const double improvement = (baseline.loss - current.loss) / std::max(baseline.loss, 1e-300);
      baseline = current;
      if (improvement < config.convergence_threshold) break;
    }
    log.epochs_per_horizon.push_back(epochs);
  }
  return log;
}

GradCheckReport gradient_check(const std::vector<GradBlock>& blocks, const ObjectiveFn& objective,
                               const GradCheckOptions& options) {
  layers::IndexPinning pinning;
  std::vector<Matrix> analytic;
  {
    Tape tape(true);
    PassContext ctx(tape, options.mode, &pinning);
    const Objective obj = objective(ctx);
    layers::backward(ctx, obj.output, obj.seed);
    for (const auto& b : blocks) analytic.push_back(ctx.gradient(*b.value));
  }

  auto evaluate = [&]() {
    pinning.replay();
    Tape tape(false);
    PassContext ctx(tape, options.mode, &pinning);
    return objective(ctx).value;
  };

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Matrix& value = *blocks[b].value;
    const auto size = static_cast<std::size_t>(value.size());
    std::vector<std::size_t> entries(size);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.samples_per_block > 0 && options.samples_per_block < size) {
      for (std::size_t i = 0; i < options.samples_per_block; ++i) {
        std::swap(entries[i], entries[i + rng.below(size - i)]);
      }
      entries.resize(options.samples_per_block);
    }
    double diff2 = 0.0, analytic2 = 0.0, numeric2 = 0.0;
    for (const std::size_t e : entries) {
      double& x = value.data()[e];
      const double saved = x;
      x = saved + options.step;
      const double plus = evaluate();
      x = saved - options.step;
      const double minus = evaluate();
      x = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[b].data()[e];
      diff2 += (a - numeric) * (a - numeric);
      analytic2 += a * a;
      numeric2 += numeric * numeric;
    }
    const double scale =
        std::max({std::sqrt(analytic2), std::sqrt(numeric2), options.absolute_floor});
    BlockError err{blocks[b].name, std::sqrt(diff2) / scale, entries.size(), std::sqrt(analytic2),
                   std::sqrt(numeric2)};
    report.max_error = std::max(report.max_error, err.relative_error);
    if (!(err.relative_error < options.tolerance)) report.passed = false;
    report.blocks.push_back(err);
  }
  return report;
}

GradCheckReport gradient_check_network(network::Network& net,
                                       const std::vector<PointCloud>& frames,
                                       const PointCloud& target,
                                       const metrics::LossWeights& weights,
                                       const GradCheckOptions& options) {
  std::vector<GradBlock> blocks;
  for (const auto& p : net.parameters()) blocks.push_back({p.name, p.value});
  std::optional<metrics::LossMatching> matching;
  const ObjectiveFn objective = [&](PassContext& ctx) {
    std::vector<Var> inputs;
    for (const auto& f : frames) inputs.push_back(ctx.tape.constant(f));
    auto out = network::forward(ctx, net, inputs);
    if (!matching) {
      matching = metrics::compute_matching(out.predicted->value, target, weights,
                                           metrics::kTrainingEmdEpsilon);
    }
    auto loss = metrics::loss_with_matching(out.predicted->value, target, weights, *matching);
    return Objective{out.predicted, loss.grad, loss.loss};
  };
  return gradient_check(blocks, objective, options);
}

}  // namespace tempcloud::training

// Command-line front end: synth, train, eval, predict, flow.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tempcloud/commands.hpp"

namespace {

using tempcloud::commands::RunConfig;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> second_checkpoint;
  std::optional<std::string> variant;
  std::optional<std::string> scene_spec;
  std::optional<std::size_t> scene_count;
  std::optional<std::size_t> horizon;
  std::optional<std::size_t> max_epochs;
  std::optional<std::size_t> scene;
  std::optional<std::size_t> start;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--out", o.out, "Output directory");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : tempcloud::commands::load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
  if (o.data) c.data_dir = *o.data;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.second_checkpoint) c.second_checkpoint = *o.second_checkpoint;
  if (o.variant) c.variant = *o.variant;
  if (o.scene_spec) c.scene_spec = *o.scene_spec;
  if (o.scene_count) c.scene_count = *o.scene_count;
  if (o.horizon) c.horizon = *o.horizon;
  if (o.max_epochs) c.max_epochs = *o.max_epochs;
  if (o.scene) c.scene = *o.scene;
  if (o.start) c.start = *o.start;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cmds = tempcloud::commands;
  CLI::App app{"Point cloud forecasting: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  Overrides o;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth, o);
  synth->add_option("--scene-spec", o.scene_spec, "Scene spec JSON");
  synth->add_option("--scenes", o.scene_count, "Number of scenes");

  auto* train = app.add_subcommand("train", "Train with the horizon curriculum");
  add_common(train, o);
  train->add_option("--data", o.data, "Dataset directory");
  train->add_option("--variant", o.variant, "PNPP_DS, PNPP_NODS, EC_DS, EC_NODS, TWO_FRAME_PNPP_DS");
  train->add_option("--max-epochs", o.max_epochs, "Epoch cap per horizon");

  auto* eval = app.add_subcommand("eval", "Roll out and compare against the identity baseline");
  add_common(eval, o);
  eval->add_option("--data", o.data, "Dataset directory");
  eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  eval->add_option("--second-checkpoint", o.second_checkpoint, "Extra model to tabulate");
  eval->add_option("--horizon", o.horizon, "Future frames");

  auto* predict = app.add_subcommand("predict", "Write predicted future frames");
  add_common(predict, o);
  predict->add_option("--data", o.data, "Dataset directory");
  predict->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  predict->add_option("--horizon", o.horizon, "Future frames");
  predict->add_option("--scene", o.scene, "Scene index");
  predict->add_option("--start", o.start, "First input frame");

  auto* flow = app.add_subcommand("flow", "Export predicted motion vectors");
  add_common(flow, o);
  flow->add_option("--data", o.data, "Dataset directory");
  flow->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  flow->add_option("--scene", o.scene, "Scene index");
  flow->add_option("--start", o.start, "First input frame");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig config = resolve(o);
    if (synth->parsed()) {
      cmds::cmd_synth(config);
    } else if (train->parsed()) {
      const auto log = cmds::cmd_train(config);
      std::cout << "epochs per horizon:";
      for (auto e : log.epochs_per_horizon) std::cout << ' ' << e;
      std::cout << '\n';
    } else if (eval->parsed()) {
      const auto table = cmds::cmd_eval(config);
      for (const auto& r : table.rows) {
        std::cout << r.method << ' ' << r.frame << " cd " << r.cd_mean << " emd " << r.emd_mean
                  << '\n';
      }
    } else if (predict->parsed()) {
      cmds::cmd_predict(config);
    } else if (flow->parsed()) {
      const auto s = cmds::cmd_flow(config);
      if (s.has_ground_truth) {
        std::cout << "epe " << s.epe << " zero-motion epe " << s.zero_motion_epe << '\n';
      }
    }
    return 0;
  } catch (const tempcloud::InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return 2;
  } catch (const tempcloud::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const tempcloud::ResourceLimit& e) {
    std::cerr << "resource limit: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

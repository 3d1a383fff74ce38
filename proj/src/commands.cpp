#include "tempcloud/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tempcloud/geometry.hpp"
#include "tempcloud/parallel.hpp"
#include "tempcloud/random.hpp"

namespace tempcloud::commands {

namespace fs = std::filesystem;

namespace {

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

PointCloud subset(const PointCloud& cloud, const std::vector<Index>& rows) {
  PointCloud out(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = cloud.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

training::TrainConfig train_config(const RunConfig& c) {
  training::TrainConfig t;
  t.weights = {c.alpha, c.beta};
  t.first_max_lr = c.first_max_lr;
  t.later_max_lr = c.later_max_lr;
  t.max_epochs = c.max_epochs;
  t.max_windows_per_epoch = c.max_windows_per_epoch;
  t.accumulation = c.accumulation;
  t.adamw.weight_decay = c.weight_decay;
  t.validation_fraction = c.validation_fraction;
  t.full_unroll = c.full_unroll;
  t.seed = c.seed;
  return t;
}

struct FrameMetrics {
  double cd_mean = 0.0, cd_sum = 0.0, emd_mean = 0.0, emd_sum = 0.0;
  double auction_mean = 0.0, auction_sum = 0.0;
};

FrameMetrics frame_metrics(const PointCloud& pred, const PointCloud& truth, const RunConfig& config,
                           std::uint64_t subsample_seed) {
  FrameMetrics m;
  m.cd_mean = metrics::chamfer_distance(pred, truth, true).value;
  m.cd_sum = metrics::chamfer_distance(pred, truth, false).value;

  const auto np = static_cast<std::size_t>(pred.rows());
  const auto nq = static_cast<std::size_t>(truth.rows());
  const std::size_t count = std::min({config.emd_points, np, nq});
  PointCloud p = pred, q = truth;
  if (count < np || count < nq) {
    // One seeded start for both clouds keeps a translated pair's samples aligned.
    const Index start = Rng(subsample_seed).below(std::min(np, nq));
    p = subset(pred, geometry::farthest_point_sample(pred, count, start).indices);
    q = subset(truth, geometry::farthest_point_sample(truth, count, start).indices);
  }
  const auto exact = metrics::emd_exact(p, q);
  m.emd_sum = exact.cost;
  m.emd_mean = exact.cost / static_cast<double>(count);

  const auto auction = metrics::evaluate(pred, truth, metrics::EmdMethod::auction,
                                         config.auction_epsilon);
  m.auction_mean = auction.emd;
  m.auction_sum = auction.emd_sum;
  return m;
}

std::vector<PointCloud> last_frames(const std::vector<PointCloud>& inputs, std::size_t count) {
  require(inputs.size() >= count, "window has fewer inputs than the model needs");
  return {inputs.end() - static_cast<std::ptrdiff_t>(count), inputs.end()};
}

training::Window select_window(const RunConfig& config, std::size_t input_frames,
                               std::size_t future_frames) {
  const auto scenes = load_dataset(config.data_dir);
  require(config.scene < scenes.size(), "scene index " + std::to_string(config.scene) +
                                            " out of range (" + std::to_string(scenes.size()) +
                                            " scenes)");
  const auto& s = scenes[config.scene];
  require(config.start + input_frames <= s.frames.size(),
          "window starting at frame " + std::to_string(config.start) + " runs past the scene");
  training::Window w;
  w.inputs.assign(s.frames.begin() + static_cast<std::ptrdiff_t>(config.start),
                  s.frames.begin() + static_cast<std::ptrdiff_t>(config.start + input_frames));
  for (std::size_t j = 0; j < future_frames; ++j) {
    const std::size_t k = config.start + input_frames + j;
    if (k < s.frames.size()) w.targets.push_back(s.frames[k]);
    if (k - 1 < s.flows.size()) w.target_flow.push_back(s.flows[k - 1]);
  }
  return w;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  static const std::set<std::string> known = {
      "variant",      "seed",        "data_dir",           "out_dir",       "checkpoint",
      "second_checkpoint", "scene_spec", "scene_count",    "horizon",       "alpha",
      "beta",         "first_max_lr", "later_max_lr",      "max_epochs",    "max_windows_per_epoch",
      "accumulation", "weight_decay", "validation_fraction", "full_unroll", "emd_points",
      "auction_epsilon", "window_stride", "scene",         "start"};
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (!j.is_object()) throw FormatError("run config: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw FormatError("run config: unknown key " + key);
    }
    RunConfig c;
    c.variant = j.value("variant", c.variant);
    c.seed = j.value("seed", c.seed);
    c.data_dir = j.value("data_dir", c.data_dir.string());
    c.out_dir = j.value("out_dir", c.out_dir.string());
    c.checkpoint = j.value("checkpoint", c.checkpoint.string());
    c.second_checkpoint = j.value("second_checkpoint", c.second_checkpoint.string());
    c.scene_spec = j.value("scene_spec", c.scene_spec.string());
    c.scene_count = j.value("scene_count", c.scene_count);
    c.horizon = j.value("horizon", c.horizon);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.first_max_lr = j.value("first_max_lr", c.first_max_lr);
    c.later_max_lr = j.value("later_max_lr", c.later_max_lr);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.max_windows_per_epoch = j.value("max_windows_per_epoch", c.max_windows_per_epoch);
    c.accumulation = j.value("accumulation", c.accumulation);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.full_unroll = j.value("full_unroll", c.full_unroll);
    c.emd_points = j.value("emd_points", c.emd_points);
    c.auction_epsilon = j.value("auction_epsilon", c.auction_epsilon);
    c.window_stride = j.value("window_stride", c.window_stride);
    c.scene = j.value("scene", c.scene);
    c.start = j.value("start", c.start);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text(path)); }

std::vector<SceneData> load_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read " + manifest.string());
  std::vector<SceneData> scenes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::size_t scene = 0;
    std::string frame_path, flow_path;
    if (!(ss >> scene >> frame_path >> flow_path)) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": malformed line");
    }
    if (scene != scenes.size() && scene + 1 != scenes.size()) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) +
                        ": scenes must appear in order");
    }
    if (scene == scenes.size()) scenes.emplace_back();
    auto& s = scenes.back();
    s.frames.push_back(dataio::load_frame_bin(dir / frame_path));
    if (flow_path != "-") s.flows.push_back(dataio::read_flow(dir / flow_path).vectors);
  }
  if (scenes.empty()) throw FormatError(manifest.string() + ": no frames listed");
  return scenes;
}

std::vector<training::Window> dataset_windows(const std::vector<SceneData>& scenes,
                                              std::size_t input_frames,
                                              std::size_t future_frames, std::size_t stride) {
  std::vector<training::Window> out;
  for (const auto& s : scenes) {
    auto w = training::make_windows(s.frames, s.flows, input_frames, future_frames, stride);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

void write_synthetic_dataset(const dataio::SyntheticSceneSpec& spec, std::size_t scene_count,
                             std::uint64_t seed, const fs::path& dir) {
  make_dirs(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.txt").string());
  char name[64];
  for (std::size_t i = 0; i < scene_count; ++i) {
    dataio::SyntheticSceneSpec s = spec;
    s.seed = splitmix64(seed + i);
    const auto seq = dataio::generate_scene(s);
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    const fs::path scene_dir = name;
    make_dirs(dir / scene_dir);
    for (std::size_t k = 0; k < seq.frames.size(); ++k) {
      std::snprintf(name, sizeof name, "frame_%03zu.bin", k);
      const fs::path frame = scene_dir / name;
      dataio::write_frame_bin(dir / frame, seq.frames[k]);
      std::string flow = "-";
      if (k < seq.flows.size()) {
        std::snprintf(name, sizeof name, "flow_%03zu.txt", k);
        flow = (scene_dir / name).generic_string();
        dataio::export_flow(seq.frames[k], seq.flows[k], dir / flow);
      }
      manifest << i << ' ' << frame.generic_string() << ' ' << flow << '\n';
    }
  }
  std::ofstream spec_out(dir / "scene_spec.json");
  spec_out << dataio::scene_spec_to_json(spec) << '\n';
  if (!manifest || !spec_out) throw IoError("cannot write dataset files under " + dir.string());
}

void cmd_synth(const RunConfig& config) {
  require(!config.scene_spec.empty(), "synth: scene_spec is required");
  require(config.scene_count >= 1, "synth: scene_count must be at least 1");
  write_synthetic_dataset(dataio::load_scene_spec(config.scene_spec), config.scene_count,
                          config.seed, config.out_dir);
}

training::TrainLog cmd_train(const RunConfig& config) {
  require(!config.data_dir.empty(), "train: data_dir is required");
  network::Network net = network::build_network(network::parse_variant(config.variant), config.seed);
  const auto scenes = load_dataset(config.data_dir);
  const auto tc = train_config(config);
  const auto windows =
      dataset_windows(scenes, net.config.input_frames, tc.horizons, config.window_stride);
  require(!windows.empty(), "train: scenes are too short for a training window");
  auto log = training::train_curriculum(net, windows, tc);
  make_dirs(config.out_dir);
  network::save_checkpoint(net, config.out_dir / "model.tlfp");
  log.save_csv(config.out_dir / "train_log.csv");
  return log;
}

const EvalRow& EvalTable::find(const std::string& method, const std::string& frame) const {
  for (const auto& r : rows) {
    if (r.method == method && r.frame == frame) return r;
  }
  throw InvalidArgument("no eval row for " + method + " frame " + frame);
}

void write_eval_csv(const std::vector<EvalRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,frame,cd_mean,cd_sum,emd_mean,emd_sum\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.frame << ',' << format_double(r.cd_mean) << ','
        << format_double(r.cd_sum) << ',' << format_double(r.emd_mean) << ','
        << format_double(r.emd_sum) << '\n';
  }
  if (!out) throw IoError("cannot write " + path.string());
}

EvalTable evaluate_windows(std::vector<std::pair<std::string, network::Network*>> models,
                           const std::vector<training::Window>& windows, const RunConfig& config) {
  require(!windows.empty(), "eval: no windows");
  require(config.horizon >= 1, "eval: horizon must be at least 1");
  const std::size_t horizon = config.horizon;
  const std::size_t methods = models.size() + 1;  // identity first

  // results[w][method][frame]
  std::vector<std::vector<std::vector<FrameMetrics>>> results(windows.size());
  parallel_for(windows.size(), [&](std::size_t w) {
    const auto& win = windows[w];
    require(win.targets.size() >= horizon, "eval: window shorter than the horizon");
    const std::uint64_t seed = splitmix64(config.seed ^ static_cast<std::uint64_t>(w));
    auto& out = results[w];
    out.assign(methods, std::vector<FrameMetrics>(horizon));
    for (std::size_t k = 0; k < horizon; ++k) {
      out[0][k] = frame_metrics(win.inputs.back(), win.targets[k], config, seed + k);
    }
    for (std::size_t m = 0; m < models.size(); ++m) {
      network::Network& net = *models[m].second;
      const auto preds =
          network::rollout(net, last_frames(win.inputs, net.config.input_frames), horizon);
      for (std::size_t k = 0; k < horizon; ++k) {
        out[m + 1][k] = frame_metrics(preds[k].predicted, win.targets[k], config, seed + k);
      }
    }
  });

  EvalTable table;
  const double n = static_cast<double>(windows.size());
  for (std::size_t m = 0; m < methods; ++m) {
    const std::string name = m == 0 ? "identity" : models[m - 1].first;
    FrameMetrics total;
    FrameMetrics avg_all;
    for (std::size_t k = 0; k < horizon; ++k) {
      FrameMetrics mean;
      for (const auto& r : results) {
        const auto& f = r[m][k];
        mean.cd_mean += f.cd_mean / n;
        mean.cd_sum += f.cd_sum / n;
        mean.emd_mean += f.emd_mean / n;
        mean.emd_sum += f.emd_sum / n;
        mean.auction_mean += f.auction_mean / n;
        mean.auction_sum += f.auction_sum / n;
      }
      const std::string frame = std::to_string(k + 1);
      table.rows.push_back({name, frame, mean.cd_mean, mean.cd_sum, mean.emd_mean, mean.emd_sum});
      table.auction_rows.push_back(
          {name, frame, mean.cd_mean, mean.cd_sum, mean.auction_mean, mean.auction_sum});
      const double h = static_cast<double>(horizon);
      avg_all.cd_mean += mean.cd_mean / h;
      avg_all.cd_sum += mean.cd_sum / h;
      avg_all.emd_mean += mean.emd_mean / h;
      avg_all.emd_sum += mean.emd_sum / h;
      avg_all.auction_mean += mean.auction_mean / h;
      avg_all.auction_sum += mean.auction_sum / h;
    }
    table.rows.push_back(
        {name, "avg", avg_all.cd_mean, avg_all.cd_sum, avg_all.emd_mean, avg_all.emd_sum});
    table.auction_rows.push_back({name, "avg", avg_all.cd_mean, avg_all.cd_sum,
                                  avg_all.auction_mean, avg_all.auction_sum});
  }
  return table;
}

EvalTable cmd_eval(const RunConfig& config) {
  require(!config.data_dir.empty(), "eval: data_dir is required");
  require(!config.checkpoint.empty(), "eval: checkpoint is required");
  std::vector<network::Network> nets;
  nets.push_back(network::load_checkpoint(config.checkpoint));
  if (!config.second_checkpoint.empty()) {
    nets.push_back(network::load_checkpoint(config.second_checkpoint));
  }
  std::vector<std::pair<std::string, network::Network*>> models;
  std::size_t input_frames = 0;
  for (auto& net : nets) {
    std::string name = network::to_string(net.config.variant);
    if (!models.empty() && models.front().first == name) name += "_2";
    models.emplace_back(name, &net);
    input_frames = std::max(input_frames, net.config.input_frames);
  }
  const auto scenes = load_dataset(config.data_dir);
  const auto windows = dataset_windows(scenes, input_frames, config.horizon, config.window_stride);
  require(!windows.empty(), "eval: scenes are too short for a " + std::to_string(config.horizon) +
                                "-frame rollout");
  EvalTable table = evaluate_windows(models, windows, config);

  make_dirs(config.out_dir);
  write_eval_csv(table.rows, config.out_dir / "eval.csv");
  write_eval_csv(table.auction_rows, config.out_dir / "eval_auction.csv");

  // Per-point squared error of the first model's first prediction on window 0.
  network::Network& first = nets.front();
  const auto pred =
      network::predict_next(first, last_frames(windows[0].inputs, first.config.input_frames));
  const auto cd = metrics::chamfer_distance(pred.predicted, windows[0].targets[0], true);
  std::ofstream out(config.out_dir / "per_point_error.txt");
  char line[160];
  for (Eigen::Index i = 0; i < pred.predicted.rows(); ++i) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %.9g\n", pred.predicted(i, 0),
                  pred.predicted(i, 1), pred.predicted(i, 2),
                  cd.per_point_error[static_cast<std::size_t>(i)]);
    out << line;
  }
  if (!out) throw IoError("cannot write per_point_error.txt");
  return table;
}

std::vector<PointCloud> cmd_predict(const RunConfig& config) {
  require(!config.checkpoint.empty(), "predict: checkpoint is required");
  require(config.horizon >= 1, "predict: horizon must be at least 1");
  network::Network net = network::load_checkpoint(config.checkpoint);
  const auto window = select_window(config, net.config.input_frames, 0);
  const auto preds = network::rollout(net, window.inputs, config.horizon);
  make_dirs(config.out_dir);
  std::vector<PointCloud> out;
  char name[32];
  for (std::size_t k = 0; k < preds.size(); ++k) {
    std::snprintf(name, sizeof name, "pred_%03zu.bin", k + 1);
    dataio::write_frame_bin(config.out_dir / name, preds[k].predicted);
    out.push_back(preds[k].predicted);
  }
  return out;
}

FlowSummary flow_error(network::Network& net, const std::vector<training::Window>& windows) {
  std::vector<std::pair<double, double>> per_window(windows.size(), {0.0, 0.0});
  std::vector<char> used(windows.size(), 0);
  parallel_for(windows.size(), [&](std::size_t w) {
    const auto& win = windows[w];
    if (win.target_flow.empty()) return;
    const Matrix& truth = win.target_flow.front();
    const auto pred = network::predict_next(net, last_frames(win.inputs, net.config.input_frames));
    require(truth.rows() == pred.motion.rows(), "flow: ground truth does not match x_t");
    per_window[w] = {(pred.motion - truth).rowwise().norm().mean(), truth.rowwise().norm().mean()};
    used[w] = 1;
  });
  FlowSummary s;
  double count = 0.0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    if (!used[w]) continue;
    s.epe += per_window[w].first;
    s.zero_motion_epe += per_window[w].second;
    count += 1.0;
  }
  if (count > 0.0) {
    s.epe /= count;
    s.zero_motion_epe /= count;
    s.has_ground_truth = true;
  }
  return s;
}

FlowSummary cmd_flow(const RunConfig& config) {
  require(!config.checkpoint.empty(), "flow: checkpoint is required");
  network::Network net = network::load_checkpoint(config.checkpoint);
  const auto window = select_window(config, net.config.input_frames, 1);
  const auto pred = network::predict_next(net, window.inputs);
  make_dirs(config.out_dir);
  dataio::export_flow(window.inputs.back(), pred.motion, config.out_dir / "flow.txt");
  const FlowSummary s = flow_error(net, {window});
  if (s.has_ground_truth) {
    std::ofstream out(config.out_dir / "epe.csv");
    out << "method,epe\nmodel," << format_double(s.epe) << "\nzero_motion,"
        << format_double(s.zero_motion_epe) << '\n';
    if (!out) throw IoError("cannot write epe.csv");
  }
  return s;
}

}  // namespace tempcloud::commands

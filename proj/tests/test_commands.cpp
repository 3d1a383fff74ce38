#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "tempcloud/commands.hpp"

using namespace tempcloud;
using namespace tempcloud::commands;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir =
      fs::temp_directory_path() / ("tempcloud_cmd_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

dataio::SyntheticSceneSpec toy_scene(dataio::Vec3 sensor) {
  dataio::SyntheticSceneSpec s;
  dataio::Body b;
  b.point_count = 40;
  b.size = {1.0, 1.0, 1.0};
  b.position = {0.5, 0.0, 0.5};
  s.bodies.push_back(b);
  s.background = {40, 2.0};
  s.sensor_velocity = sensor;
  s.frame_count = 9;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TEMPCLOUD_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

RunConfig toy_train_config(const fs::path& data, const fs::path& out) {
  RunConfig c;
  c.variant = "PNPP_NODS";
  c.data_dir = data;
  c.out_dir = out;
  c.max_epochs = 1;
  c.max_windows_per_epoch = 4;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(RunConfigJson, ParsesAndRejects) {
  const auto c = parse_run_config(R"({"variant":"EC_DS","horizon":3,"beta":0.5,"full_unroll":true})");
  EXPECT_EQ(c.variant, "EC_DS");
  EXPECT_EQ(c.horizon, 3u);
  EXPECT_EQ(c.beta, 0.5);
  EXPECT_TRUE(c.full_unroll);
  EXPECT_EQ(c.alpha, 1.0);
  EXPECT_THROW(parse_run_config(R"({"horizon":3,"bogus":1})"), FormatError);
  EXPECT_THROW(parse_run_config("[1,2]"), FormatError);
  EXPECT_THROW(parse_run_config(R"({"horizon":"three"})"), FormatError);
}

TEST(Synth, DeterministicAndReloadable) {
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  auto spec = toy_scene({1.0, 0.0, 0.0});
  spec.noise_sigma = 0.01;
  write_synthetic_dataset(spec, 2, 7, a);
  write_synthetic_dataset(spec, 2, 7, b);
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  const auto da = load_dataset(a), db = load_dataset(b);
  ASSERT_EQ(da.size(), 2u);
  EXPECT_EQ(da[0].frames.size(), 9u);
  EXPECT_EQ(da[0].flows.size(), 8u);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(da[1].frames[k], db[1].frames[k]);
  EXPECT_NE(da[0].frames[0], da[1].frames[0]);
  EXPECT_TRUE(fs::exists(a / "scene_spec.json"));
  EXPECT_EQ(dataset_windows(da, 4, 3).size(), 2u * 3u);
}

TEST(Synth, ManifestErrors) {
  const auto dir = scratch("bad_manifest");
  EXPECT_THROW(load_dataset(dir), IoError);
  std::ofstream(dir / "manifest.txt") << "0 missing.bin -\n";
  EXPECT_THROW(load_dataset(dir), IoError);
  std::ofstream(dir / "manifest.txt") << "zero\n";
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Train, ToyDatasetWritesModelAndLog) {
  const auto data = scratch("train_data"), out = scratch("train_out");
  write_synthetic_dataset(toy_scene({1.0, 0.0, 0.0}), 2, 1, data);
  const auto log = cmd_train(toy_train_config(data, out));
  EXPECT_EQ(log.epochs_per_horizon.size(), 3u);
  ASSERT_TRUE(fs::exists(out / "model.tlfp"));
  const auto lines = lines_of(out / "train_log.csv");
  ASSERT_FALSE(lines.empty());
  EXPECT_EQ(lines[0], "horizon,step,lr,loss,cd,emd");
  EXPECT_EQ(lines.size(), log.rows.size() + 1);
  const auto net = network::load_checkpoint(out / "model.tlfp");
  EXPECT_EQ(net.config.variant, network::Variant::pnpp_nods);
}

class EvalFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("eval"));
    write_synthetic_dataset(toy_scene({0.0, 0.0, 0.0}), 1, 2, *root_ / "static");
    write_synthetic_dataset(toy_scene({4.0, 0.0, 0.0}), 1, 2, *root_ / "moving");
    cmd_train(toy_train_config(*root_ / "moving", *root_ / "model"));
  }
  static void TearDownTestSuite() { delete root_; }

  RunConfig eval_config(const std::string& data) const {
    RunConfig c;
    c.data_dir = *root_ / data;
    c.checkpoint = *root_ / "model" / "model.tlfp";
    c.out_dir = *root_ / ("eval_" + data);
    c.horizon = 5;
    c.emd_points = 64;
    return c;
  }

  static fs::path* root_;
};
fs::path* EvalFixture::root_ = nullptr;

TEST_F(EvalFixture, IdentityIsZeroOnStaticScene) {
  const auto table = cmd_eval(eval_config("static"));
  for (int k = 1; k <= 5; ++k) {
    const auto& r = table.find("identity", std::to_string(k));
    EXPECT_EQ(r.cd_mean, 0.0);
    EXPECT_EQ(r.emd_mean, 0.0);
  }
  EXPECT_NO_THROW(table.find("PNPP_NODS", "avg"));
}

TEST_F(EvalFixture, IdentityTracksTranslation) {
  const auto config = eval_config("moving");
  const auto table = cmd_eval(config);
  for (int k = 1; k <= 5; ++k) {
    const auto& r = table.find("identity", std::to_string(k));
    EXPECT_NEAR(r.emd_mean, 0.2 * k, 0.004 * k);
    const auto& a = table.auction_rows;
    EXPECT_EQ(a.size(), table.rows.size());
  }
  const auto lines = lines_of(config.out_dir / "eval.csv");
  EXPECT_EQ(lines[0], "method,frame,cd_mean,cd_sum,emd_mean,emd_sum");
  EXPECT_EQ(lines.size(), 1u + 2u * 6u);
  EXPECT_EQ(lines[1].substr(0, 11), "identity,1,");
  EXPECT_EQ(lines_of(config.out_dir / "per_point_error.txt").size(), 80u);
}

TEST_F(EvalFixture, IdentityRowsIndependentOfModel) {
  auto c = eval_config("moving");
  const auto with_model = cmd_eval(c);
  auto other = network::build_network(network::Variant::pnpp_ds, 99);
  const auto scenes = load_dataset(c.data_dir);
  const auto table = evaluate_windows({{"other", &other}}, dataset_windows(scenes, 4, 5), c);
  for (int k = 1; k <= 5; ++k) {
    const auto f = std::to_string(k);
    EXPECT_EQ(table.find("identity", f).cd_mean, with_model.find("identity", f).cd_mean);
    EXPECT_EQ(table.find("identity", f).emd_mean, with_model.find("identity", f).emd_mean);
  }
}

TEST_F(EvalFixture, SecondCheckpointGetsItsOwnRows) {
  auto c = eval_config("static");
  c.second_checkpoint = c.checkpoint;
  c.horizon = 2;
  const auto table = cmd_eval(c);
  EXPECT_NO_THROW(table.find("PNPP_NODS_2", "avg"));
}

TEST_F(EvalFixture, PredictWritesFrames) {
  auto c = eval_config("moving");
  c.horizon = 3;
  const auto preds = cmd_predict(c);
  ASSERT_EQ(preds.size(), 3u);
  for (int k = 1; k <= 3; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "pred_%03d.bin", k);
    EXPECT_EQ(dataio::load_frame_bin(c.out_dir / name).rows(), 80);
  }
  c.start = 100;
  EXPECT_THROW(cmd_predict(c), InvalidArgument);
}

TEST_F(EvalFixture, FlowOutputs) {
  auto c = eval_config("static");
  const auto s = cmd_flow(c);
  EXPECT_TRUE(s.has_ground_truth);
  EXPECT_EQ(s.zero_motion_epe, 0.0);
  EXPECT_EQ(lines_of(c.out_dir / "flow.txt").size(), 80u);
  const auto epe = lines_of(c.out_dir / "epe.csv");
  ASSERT_EQ(epe.size(), 3u);
  EXPECT_EQ(epe[0], "method,epe");
  EXPECT_EQ(epe[2], "zero_motion,0");

  auto m = eval_config("moving");
  const auto moving = cmd_flow(m);
  EXPECT_NEAR(moving.zero_motion_epe, 0.2, 1e-6);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --no-such-flag"), 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("train --config " + (dir / "broken.json").string()), 3);
  EXPECT_EQ(run_cli("train --data " + (dir / "nowhere").string() + " --out " + dir.string()), 1);
  EXPECT_EQ(run_cli("train --variant NOPE --data " + dir.string()), 2);

  const auto spec = dir / "scene.json";
  std::ofstream(spec) << dataio::scene_spec_to_json(toy_scene({1.0, 0.0, 0.0}));
  EXPECT_EQ(run_cli("synth --scene-spec " + spec.string() + " --scenes 2 --seed 4 --out " +
                    (dir / "data").string()),
            0);
  EXPECT_EQ(load_dataset(dir / "data").size(), 2u);
}

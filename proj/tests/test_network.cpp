#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "oracles.hpp"
#include "tempcloud/metrics.hpp"
#include "tempcloud/network.hpp"

using namespace tempcloud;
using namespace tempcloud::network;
using layers::Extractor;

namespace {

const Variant kAll[] = {Variant::pnpp_ds, Variant::pnpp_nods, Variant::ec_ds, Variant::ec_nods,
                        Variant::two_frame_pnpp_ds};

std::vector<PointCloud> frames_for(const Network& net, std::size_t n, std::uint64_t seed,
                                   double spread = 4.0) {
  Rng rng(seed);
  const PointCloud base = oracle::random_points(rng, n, 3, 0.0, spread);
  std::vector<PointCloud> out;
  for (std::size_t k = 0; k < net.config.input_frames; ++k) {
    PointCloud f = base;
    f.col(0).array() += 0.1 * static_cast<double>(k);
    out.push_back(f);
  }
  return out;
}

void expect_stage(const NetworkConfig& c, const std::string& name, Extractor ex,
                  std::optional<double> radius, std::optional<std::size_t> k, double rate,
                  std::vector<std::size_t> widths) {
  SCOPED_TRACE(name);
  const auto& s = c.stage(name);
  EXPECT_EQ(s.extractor, ex);
  EXPECT_EQ(s.radius, radius);
  EXPECT_EQ(s.k, k);
  EXPECT_EQ(s.sample_rate, rate);
  EXPECT_EQ(s.mlp_widths, widths);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("tempcloud_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Config, PointnetDownsamplingTable) {
  const auto c = make_config(Variant::pnpp_ds);
  const auto P = Extractor::pointnetpp;
  expect_stage(c, "fe1", P, 0.5, std::nullopt, 0.25, {128, 128});
  expect_stage(c, "flow1", P, 1.5, std::nullopt, 1.0, {128});
  expect_stage(c, "fe2", P, 1.0, std::nullopt, 0.25, {256, 256});
  expect_stage(c, "flow2", P, 3.0, std::nullopt, 1.0, {256});
  expect_stage(c, "fe3", P, 2.0, std::nullopt, 0.2, {512});
  expect_stage(c, "upconv1", P, std::nullopt, 16, 5.0, {512});
  expect_stage(c, "upconv2", P, std::nullopt, 16, 4.0, {512});
  EXPECT_EQ(c.stage("upconv1").mlp2_widths, (std::vector<std::size_t>{512}));
  EXPECT_EQ(c.stage("upconv2").mlp2_widths, (std::vector<std::size_t>{512}));
  EXPECT_EQ(c.stage("featprop").sample_rate, 4.0);
  EXPECT_EQ(c.stage("featprop").mlp_widths, (std::vector<std::size_t>{256}));
  EXPECT_EQ(c.head_widths, (std::vector<std::size_t>{256, 128, 3}));
  EXPECT_EQ(c.input_frames, 4u);
  EXPECT_EQ(c.fps_start_index, 0u);
  EXPECT_EQ(c.feature_max_neighbors, 32u);
  EXPECT_EQ(c.flow_max_neighbors, 64u);
}

TEST(Config, PointnetNoDownsamplingTable) {
  const auto c = make_config(Variant::pnpp_nods);
  const auto P = Extractor::pointnetpp;
  expect_stage(c, "fe1", P, 0.7, std::nullopt, 1.0, {32, 32});
  expect_stage(c, "flow1", P, 1.0, std::nullopt, 1.0, {32});
  expect_stage(c, "fe2", P, 0.7, std::nullopt, 1.0, {64, 64});
  expect_stage(c, "flow2", P, 1.0, std::nullopt, 1.0, {64});
  expect_stage(c, "fe3", P, 0.7, std::nullopt, 1.0, {128});
  EXPECT_FALSE(c.has_stage("upconv1"));
  EXPECT_EQ(c.head_widths, (std::vector<std::size_t>{512, 256, 128, 3}));
}

TEST(Config, EdgeconvTables) {
  const auto E = Extractor::edgeconv;
  const auto ds = make_config(Variant::ec_ds);
  expect_stage(ds, "fe1", E, std::nullopt, 16, 0.25, {128, 128});
  expect_stage(ds, "flow1", E, std::nullopt, 16, 1.0, {128});
  expect_stage(ds, "fe2", E, std::nullopt, 16, 0.25, {256, 256});
  expect_stage(ds, "flow2", E, std::nullopt, 16, 1.0, {256});
  expect_stage(ds, "fe3", E, std::nullopt, 16, 0.2, {512});
  EXPECT_EQ(ds.stage("upconv1").sample_space, "flow2");
  EXPECT_EQ(ds.stage("upconv2").sample_space, "flow1");
  const auto nods = make_config(Variant::ec_nods);
  expect_stage(nods, "fe1", E, std::nullopt, 16, 1.0, {32, 32});
  expect_stage(nods, "fe3", E, std::nullopt, 16, 1.0, {128});
  EXPECT_EQ(nods.head_widths, (std::vector<std::size_t>{512, 256, 128, 3}));
}

TEST(Config, TwoFrameVariant) {
  const auto c = make_config(Variant::two_frame_pnpp_ds);
  EXPECT_EQ(c.input_frames, 2u);
  EXPECT_FALSE(c.has_stage("flow2"));
  EXPECT_TRUE(c.downsampling());
}

TEST(Config, DownsamplingChainRestoresSize) {
  for (Variant v : {Variant::pnpp_ds, Variant::ec_ds}) {
    const auto c = make_config(v);
    const double down = c.stage("fe1").sample_rate * c.stage("fe2").sample_rate * c.stage("fe3").sample_rate;
    const double up = c.stage("upconv1").sample_rate * c.stage("upconv2").sample_rate * c.stage("featprop").sample_rate;
    EXPECT_DOUBLE_EQ(down * up, 1.0);
  }
}

TEST(Config, StructuralEquivalenceOfDsAndNods) {
  auto ds = make_config(Variant::pnpp_ds);
  const auto nods = make_config(Variant::pnpp_nods);
  std::vector<layers::LayerSpec> kept;
  for (auto s : ds.stages) {
    if (s.name.rfind("upconv", 0) == 0 || s.name == "featprop") continue;
    s.sample_rate = 1.0;
    kept.push_back(s);
  }
  ASSERT_EQ(kept.size(), nods.stages.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    EXPECT_EQ(kept[i].name, nods.stages[i].name);
    EXPECT_EQ(kept[i].extractor, nods.stages[i].extractor);
    EXPECT_EQ(kept[i].radius.has_value(), nods.stages[i].radius.has_value());
    EXPECT_EQ(kept[i].sample_rate, nods.stages[i].sample_rate);
    EXPECT_EQ(kept[i].mlp_widths.size(), nods.stages[i].mlp_widths.size());
  }
}

TEST(Config, SerializationRoundTrip) {
  for (Variant v : kAll) {
    const auto c = make_config(v);
    EXPECT_EQ(parse_config(serialize_config(c)), c);
  }
  EXPECT_THROW(parse_config("{not json"), FormatError);
}

TEST(Config, VariantNames) {
  for (Variant v : kAll) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_EQ(parse_variant("pnpp_nods"), Variant::pnpp_nods);
  EXPECT_THROW(parse_variant("PNPP_XL"), InvalidArgument);
}

TEST(Build, SameSeedSameParameters) {
  auto a = build_network(Variant::pnpp_nods, 42);
  auto b = build_network(Variant::pnpp_nods, 42);
  auto c = build_network(Variant::pnpp_nods, 43);
  const auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  bool any_difference = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].name, tb[i].name);
    EXPECT_EQ(*ta[i].value, *tb[i].value);
    any_difference |= *ta[i].value != *tc[i].value;
  }
  EXPECT_TRUE(any_difference);
}

TEST(Build, InitialBatchNormState) {
  auto net = build_network(Variant::pnpp_ds, 1);
  for (auto& [name, mlp] : net.mlps) {
    for (const auto& l : mlp.layers) {
      if (!l.has_bn_act) continue;
      EXPECT_TRUE(l.gamma.isOnes(0.0)) << name;
      EXPECT_TRUE(l.beta.isZero(0.0)) << name;
      EXPECT_TRUE(l.running_mean.isZero(0.0)) << name;
      EXPECT_TRUE(l.running_var.isOnes(0.0)) << name;
    }
  }
}

TEST(Build, NoDownsamplingHeadInput) {
  auto net = build_network(Variant::pnpp_nods, 1);
  const auto& head = net.mlp("head");
  EXPECT_EQ(head.in_width(), 32u + 64u + 128u);
  ASSERT_EQ(head.layers.size(), 4u);
  EXPECT_EQ(head.out_width(), 3u);
  EXPECT_FALSE(head.layers.back().has_bn_act);
}

TEST(Build, EdgeconvNoDownsamplingParameterCount) {
  // fe1 6-32-32, flow1 64-32, fe2 64-64-64, flow2 128-64, fe3 128-128,
  // head 224-512-256-128-3; weights, biases, gammas and betas.
  EXPECT_EQ(build_network(Variant::ec_nods, 0).parameter_count(), 318883u);
}

TEST(Predict, ShapesForEveryVariant) {
  for (Variant v : kAll) {
    SCOPED_TRACE(to_string(v));
    auto net = build_network(v, 3);
    const auto frames = frames_for(net, 160, 5);
    const auto p = predict_next(net, frames);
    EXPECT_EQ(p.motion.rows(), 160);
    EXPECT_EQ(p.motion.cols(), 3);
    EXPECT_EQ(p.predicted.rows(), 160);
    EXPECT_TRUE(p.predicted.allFinite());
  }
}

TEST(Predict, PredictedIsCurrentPlusMotion) {
  auto net = build_network(Variant::pnpp_nods, 4);
  const auto frames = frames_for(net, 64, 6);
  const auto p = predict_next(net, frames);
  EXPECT_EQ(p.predicted, PointCloud(frames.back() + p.motion));
  const PointCloud back = p.predicted - p.motion;
  EXPECT_LT((back - frames.back()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Predict, StaticFramesStayFinite) {
  for (Variant v : kAll) {
    auto net = build_network(v, 5);
    Rng rng(8);
    const PointCloud still = oracle::random_points(rng, 80, 3, 0.0, 3.0);
    const std::vector<PointCloud> frames(net.config.input_frames, still);
    const auto p = predict_next(net, frames);
    EXPECT_TRUE(p.predicted.allFinite());
    EXPECT_TRUE(std::isfinite(metrics::chamfer_distance(p.predicted, still, true).value));
  }
}

TEST(Predict, DownsamplingRestoresPointCount) {
  for (Variant v : {Variant::pnpp_ds, Variant::ec_ds}) {
    for (std::size_t n : {80u, 240u, 100u, 97u}) {
      SCOPED_TRACE(std::to_string(n));
      auto net = build_network(v, 6);
      const auto p = predict_next(net, frames_for(net, n, 9));
      EXPECT_EQ(static_cast<std::size_t>(p.motion.rows()), n);
      if (n % 80 == 0) {
        EXPECT_EQ(static_cast<std::size_t>(p.stage_features.at("feat3").rows()), n / 80);
      }
    }
  }
}

TEST(Predict, NamedGroupingStagesExist) {
  auto net = build_network(Variant::ec_ds, 7);
  const auto p = predict_next(net, frames_for(net, 80, 10));
  for (const auto& s : net.config.stages) {
    if (s.sample_space != "euclidean" && s.sample_space != "own_features") {
      EXPECT_TRUE(p.stage_features.count(s.sample_space)) << s.sample_space;
    }
  }
}

TEST(Predict, WrongFrameCount) {
  auto net = build_network(Variant::pnpp_nods, 1);
  auto frames = frames_for(net, 32, 1);
  frames.pop_back();
  EXPECT_THROW(predict_next(net, frames), InvalidArgument);
  auto two = build_network(Variant::two_frame_pnpp_ds, 1);
  EXPECT_THROW(predict_next(two, frames_for(net, 32, 1)), InvalidArgument);
}

TEST(Predict, RejectsNonFiniteInput) {
  auto net = build_network(Variant::pnpp_nods, 1);
  auto frames = frames_for(net, 32, 1);
  frames[1](3, 2) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(predict_next(net, frames), InvalidArgument);
}

TEST(Predict, EvalModeLeavesRunningStatsAlone) {
  auto net = build_network(Variant::pnpp_nods, 2);
  const auto before = net.mlp("fe1").layers[0].running_mean;
  predict_next(net, frames_for(net, 32, 2));
  EXPECT_EQ(net.mlp("fe1").layers[0].running_mean, before);
  predict_next(net, frames_for(net, 32, 2), layers::BnMode::train);
  EXPECT_NE(net.mlp("fe1").layers[0].running_mean, before);
}

TEST(Rollout, HorizonOneIsPredictNext) {
  auto net = build_network(Variant::pnpp_nods, 3);
  const auto frames = frames_for(net, 48, 3);
  const auto r = rollout(net, frames, 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].predicted, predict_next(net, frames).predicted);
}

TEST(Rollout, FiveFramesDeterministic) {
  auto net = build_network(Variant::pnpp_ds, 3);
  const auto frames = frames_for(net, 80, 4);
  const auto a = rollout(net, frames, 5);
  const auto b = rollout(net, frames, 5);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(a[k].predicted.rows(), 80);
    EXPECT_EQ(a[k].predicted, b[k].predicted);
  }
  // The second step sees the first prediction as its newest frame.
  std::vector<PointCloud> shifted(frames.begin() + 1, frames.end());
  shifted.push_back(a[0].predicted);
  EXPECT_EQ(a[1].predicted, predict_next(net, shifted).predicted);
  EXPECT_THROW(rollout(net, frames, 0), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto net = build_network(Variant::pnpp_nods, 11);
  // Non-trivial batch-norm statistics.
  predict_next(net, frames_for(net, 40, 1), layers::BnMode::train);
  net.round_to_storage();
  const auto path = temp_file("round_trip.tlfp");
  save_checkpoint(net, path);
  auto loaded = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.config, net.config);
  const auto a = net.tensors(), b = loaded.tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
  }
  const auto frames = frames_for(net, 40, 2);
  EXPECT_EQ(predict_next(net, frames).predicted, predict_next(loaded, frames).predicted);
}

TEST(Checkpoint, HeaderLayout) {
  auto net = build_network(Variant::ec_nods, 1);
  const auto bytes = encode_checkpoint(net);
  ASSERT_GT(bytes.size(), 9u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TLFP");
  EXPECT_EQ(bytes[4], 0x01);
  const std::uint32_t len = bytes[5] | bytes[6] << 8 | bytes[7] << 16 | static_cast<std::uint32_t>(bytes[8]) << 24;
  const std::string config(bytes.begin() + 9, bytes.begin() + 9 + len);
  EXPECT_EQ(parse_config(config), net.config);
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto net = build_network(Variant::pnpp_nods, 2);
  const auto bytes = encode_checkpoint(net);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  auto version = bytes;
  version[4] = 0x02;
  EXPECT_THROW(decode_checkpoint(version), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() - 7));
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  EXPECT_THROW(decode_checkpoint(std::vector<std::uint8_t>{'T', 'L'}), FormatError);
  EXPECT_THROW(load_checkpoint(temp_file("missing.tlfp")), IoError);
}

TEST(Checkpoint, TwoFrameModelRejectsFourFrames) {
  auto net = build_network(Variant::two_frame_pnpp_ds, 3);
  const auto path = temp_file("two_frame.tlfp");
  save_checkpoint(net, path);
  auto loaded = load_checkpoint(path);
  std::filesystem::remove(path);
  auto four = build_network(Variant::pnpp_ds, 0);
  EXPECT_THROW(predict_next(loaded, frames_for(four, 40, 1)), InvalidArgument);
  EXPECT_NO_THROW(predict_next(loaded, frames_for(loaded, 40, 1)));
}

#include "tempcloud/network.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>

#include <json.hpp>

namespace tempcloud::network {

using layers::Extractor;
using layers::FeatureCloud;
using layers::LayerSpec;
using layers::MlpParams;
using layers::PassContext;

namespace {

// Initial motion should start near zero; the output layer is scaled down.
constexpr double kOutputInitScale = 0.01;

LayerSpec pointnet(std::string name, double radius, double rate, std::vector<std::size_t> mlp,
                   std::size_t cap) {
  LayerSpec s;
  s.name = std::move(name);
  s.extractor = Extractor::pointnetpp;
  s.radius = radius;
  s.sample_rate = rate;
  s.mlp_widths = std::move(mlp);
  s.max_neighbors = cap;
  return s;
}

LayerSpec edge(std::string name, std::size_t k, double rate, std::vector<std::size_t> mlp) {
  LayerSpec s;
  s.name = std::move(name);
  s.extractor = Extractor::edgeconv;
  s.k = k;
  s.sample_rate = rate;
  s.mlp_widths = std::move(mlp);
  s.sample_space = "own_features";
  return s;
}

LayerSpec upconv(std::string name, double rate, std::string space) {
  LayerSpec s;
  s.name = std::move(name);
  s.extractor = Extractor::pointnetpp;
  s.k = 16;
  s.sample_rate = rate;
  s.mlp_widths = {512};
  s.mlp2_widths = {512};
  s.sample_space = std::move(space);
  return s;
}

LayerSpec featprop() {
  LayerSpec s;
  s.name = "featprop";
  s.extractor = Extractor::pointnetpp;
  s.k = 3;
  s.sample_rate = 4.0;
  s.mlp_widths = {256};
  return s;
}

std::size_t extractor_input(const LayerSpec& s, std::size_t width) {
  if (s.extractor == Extractor::pointnetpp) return width + 3;
  return 2 * (width > 0 ? width : 3);
}

std::size_t flow_input(const LayerSpec& s, std::size_t width) {
  return s.extractor == Extractor::pointnetpp ? 2 * width + 3 : 2 * width;
}

/// Caps k by the number of available points so tiny clouds stay valid.
LayerSpec clamp_k(const LayerSpec& s, std::size_t available) {
  LayerSpec out = s;
  if (out.k) out.k = std::min(*out.k, available);
  return out;
}

FeatureCloud extract(PassContext& ctx, Network& net, const std::string& stage,
                     const FeatureCloud& in, std::string tag) {
  const auto& spec = net.config.stage(stage);
  FeatureCloud out = spec.extractor == Extractor::pointnetpp
                         ? layers::pointnetpp_layer(ctx, in, spec, net.mlp(stage))
                         : layers::edgeconv_layer(ctx, in, clamp_k(spec, in.size()), net.mlp(stage));
  out.stage_tag = std::move(tag);
  return out;
}

FeatureCloud embed(PassContext& ctx, Network& net, const std::string& stage,
                   const FeatureCloud& earlier, const FeatureCloud& later, std::string tag) {
  const auto spec = clamp_k(net.config.stage(stage), earlier.size());
  FeatureCloud out = layers::flow_embedding(ctx, earlier, later, spec, net.mlp(stage));
  out.stage_tag = std::move(tag);
  return out;
}

/// Rows of the named stage's features at the given cloud's points.
Matrix features_at(const FeatureCloud& named, const FeatureCloud& at) {
  std::unordered_map<Index, Index> row_of;
  for (Index r = 0; r < named.origin.size(); ++r) row_of.emplace(named.origin[r], r);
  Matrix out(static_cast<Eigen::Index>(at.size()), named.features->value.cols());
  for (Index r = 0; r < at.origin.size(); ++r) {
    auto it = row_of.find(at.origin[r]);
    require(it != row_of.end(), "sample space " + named.stage_tag + " does not cover the cloud");
    out.row(static_cast<Eigen::Index>(r)) = named.features->value.row(static_cast<Eigen::Index>(it->second));
  }
  return out;
}

FeatureCloud upsample(PassContext& ctx, Network& net, const std::string& stage,
                      const FeatureCloud& low, const FeatureCloud& high,
                      const std::map<std::string, FeatureCloud>& stages, std::string tag) {
  const auto& spec = net.config.stage(stage);
  FeatureCloud out;
  if (spec.sample_space == "euclidean") {
    out = layers::set_upconv(ctx, low, high, spec, net.mlp(stage + ".inner"),
                             net.mlp(stage + ".outer"));
  } else {
    auto it = stages.find(spec.sample_space);
    require(it != stages.end(), "unknown sample space " + spec.sample_space);
    const Matrix high_space = features_at(it->second, high);
    const Matrix low_space = features_at(it->second, low);
    const layers::GroupingSpace space{&high_space, &low_space};
    out = layers::set_upconv(ctx, low, high, spec, net.mlp(stage + ".inner"),
                             net.mlp(stage + ".outer"), &space);
  }
  out.stage_tag = std::move(tag);
  return out;
}

void check_frames(const NetworkConfig& config, std::size_t count) {
  if (count != config.input_frames) {
    throw InvalidArgument(to_string(config.variant) + " expects " +
                          std::to_string(config.input_frames) + " frames, got " +
                          std::to_string(count));
  }
}

nlohmann::json spec_to_json(const LayerSpec& s) {
  nlohmann::json j;
  j["name"] = s.name;
  j["extractor"] = s.extractor == Extractor::pointnetpp ? "pointnetpp" : "edgeconv";
  if (s.radius) j["radius"] = *s.radius;
  if (s.k) j["k"] = *s.k;
  j["sample_rate"] = s.sample_rate;
  j["mlp"] = s.mlp_widths;
  if (!s.mlp2_widths.empty()) j["mlp2"] = s.mlp2_widths;
  j["sample_space"] = s.sample_space;
  j["max_neighbors"] = s.max_neighbors;
  return j;
}

LayerSpec spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.name = j.at("name").get<std::string>();
  const auto extractor = j.at("extractor").get<std::string>();
  require(extractor == "pointnetpp" || extractor == "edgeconv", "unknown extractor " + extractor);
  s.extractor = extractor == "pointnetpp" ? Extractor::pointnetpp : Extractor::edgeconv;
  if (j.contains("radius")) s.radius = j["radius"].get<double>();
  if (j.contains("k")) s.k = j["k"].get<std::size_t>();
  s.sample_rate = j.at("sample_rate").get<double>();
  s.mlp_widths = j.at("mlp").get<std::vector<std::size_t>>();
  if (j.contains("mlp2")) s.mlp2_widths = j["mlp2"].get<std::vector<std::size_t>>();
  s.sample_space = j.at("sample_space").get<std::string>();
  s.max_neighbors = j.at("max_neighbors").get<std::size_t>();
  s.validate();
  return s;
}

void append_tensors(std::vector<NamedTensor>& out, const std::string& prefix, MlpParams& mlp,
                    bool with_buffers) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    auto& layer = mlp.layers[l];
    const std::string base = prefix + "." + std::to_string(l) + ".";
    out.push_back({base + "weight", &layer.weight});
    out.push_back({base + "bias", &layer.bias});
    if (!layer.has_bn_act) continue;
    out.push_back({base + "gamma", &layer.gamma});
    out.push_back({base + "beta", &layer.beta});
    if (with_buffers) {
      out.push_back({base + "running_mean", &layer.running_mean});
      out.push_back({base + "running_var", &layer.running_var});
    }
  }
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::pnpp_ds: return "PNPP_DS";
    case Variant::pnpp_nods: return "PNPP_NODS";
    case Variant::ec_ds: return "EC_DS";
    case Variant::ec_nods: return "EC_NODS";
    case Variant::two_frame_pnpp_ds: return "TWO_FRAME_PNPP_DS";
  }
  throw InvalidArgument("unknown variant");
}

Variant parse_variant(const std::string& name) {
  std::string upper = name;
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (Variant v : {Variant::pnpp_ds, Variant::pnpp_nods, Variant::ec_ds, Variant::ec_nods,
                    Variant::two_frame_pnpp_ds}) {
    if (to_string(v) == upper) return v;
  }
  throw InvalidArgument("unknown variant: " + name);
}

bool NetworkConfig::downsampling() const { return has_stage("featprop"); }

bool NetworkConfig::has_stage(const std::string& name) const {
  return std::any_of(stages.begin(), stages.end(),
                     [&](const LayerSpec& s) { return s.name == name; });
}

const LayerSpec& NetworkConfig::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return s;
  }
  throw InvalidArgument("network config has no stage " + name);
}

NetworkConfig make_config(Variant v) {
  NetworkConfig c;
  c.variant = v;
  const std::size_t fe_cap = c.feature_max_neighbors;
  const std::size_t flow_cap = c.flow_max_neighbors;
  switch (v) {
    case Variant::pnpp_ds:
      c.stages = {pointnet("fe1", 0.5, 0.25, {128, 128}, fe_cap),
                  pointnet("flow1", 1.5, 1.0, {128}, flow_cap),
                  pointnet("fe2", 1.0, 0.25, {256, 256}, fe_cap),
                  pointnet("flow2", 3.0, 1.0, {256}, flow_cap),
                  pointnet("fe3", 2.0, 0.2, {512}, fe_cap),
                  upconv("upconv1", 5.0, "euclidean"),
                  upconv("upconv2", 4.0, "euclidean"),
                  featprop()};
      c.head_widths = {256, 128, 3};
      break;
    case Variant::pnpp_nods:
      c.stages = {pointnet("fe1", 0.7, 1.0, {32, 32}, fe_cap),
                  pointnet("flow1", 1.0, 1.0, {32}, flow_cap),
                  pointnet("fe2", 0.7, 1.0, {64, 64}, fe_cap),
                  pointnet("flow2", 1.0, 1.0, {64}, flow_cap),
                  pointnet("fe3", 0.7, 1.0, {128}, fe_cap)};
      c.head_widths = {512, 256, 128, 3};
      break;
    case Variant::ec_ds:
      c.stages = {edge("fe1", 16, 0.25, {128, 128}), edge("flow1", 16, 1.0, {128}),
                  edge("fe2", 16, 0.25, {256, 256}), edge("flow2", 16, 1.0, {256}),
                  edge("fe3", 16, 0.2, {512}),       upconv("upconv1", 5.0, "flow2"),
                  upconv("upconv2", 4.0, "flow1"),   featprop()};
      c.head_widths = {256, 128, 3};
      break;
    case Variant::ec_nods:
      c.stages = {edge("fe1", 16, 1.0, {32, 32}), edge("flow1", 16, 1.0, {32}),
                  edge("fe2", 16, 1.0, {64, 64}), edge("flow2", 16, 1.0, {64}),
                  edge("fe3", 16, 1.0, {128})};
      c.head_widths = {512, 256, 128, 3};
      break;
    case Variant::two_frame_pnpp_ds:
      c.input_frames = 2;
      c.stages = {pointnet("fe1", 0.5, 0.25, {128, 128}, fe_cap),
                  pointnet("flow1", 1.5, 1.0, {128}, flow_cap),
                  pointnet("fe2", 1.0, 0.25, {256, 256}, fe_cap),
                  pointnet("fe3", 2.0, 0.2, {512}, fe_cap),
                  upconv("upconv1", 5.0, "euclidean"),
                  upconv("upconv2", 4.0, "euclidean"),
                  featprop()};
      c.head_widths = {256, 128, 3};
      break;
  }
  return c;
}

std::string serialize_config(const NetworkConfig& config) {
  nlohmann::json j;
  j["variant"] = to_string(config.variant);
  j["input_frames"] = config.input_frames;
  j["head"] = config.head_widths;
  j["feature_max_neighbors"] = config.feature_max_neighbors;
  j["flow_max_neighbors"] = config.flow_max_neighbors;
  j["fps_start_index"] = config.fps_start_index;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : config.stages) j["stages"].push_back(spec_to_json(s));
  return j.dump();
}

NetworkConfig parse_config(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    NetworkConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.input_frames = j.at("input_frames").get<std::size_t>();
    c.head_widths = j.at("head").get<std::vector<std::size_t>>();
    c.feature_max_neighbors = j.at("feature_max_neighbors").get<std::size_t>();
    c.flow_max_neighbors = j.at("flow_max_neighbors").get<std::size_t>();
    c.fps_start_index = j.at("fps_start_index").get<std::size_t>();
    for (const auto& s : j.at("stages")) c.stages.push_back(spec_from_json(s));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("network config: ") + e.what());
  }
}

std::vector<ParamSlot> Network::parameters() {
  std::vector<ParamSlot> out;
  for (auto& [name, mlp] : mlps) {
    std::vector<NamedTensor> named;
    append_tensors(named, name, mlp, false);
    for (auto& t : named) {
      const bool decay = t.name.size() >= 6 && t.name.compare(t.name.size() - 6, 6, "weight") == 0;
      out.push_back({t.name, t.value, decay});
    }
  }
  return out;
}

std::vector<NamedTensor> Network::tensors() {
  std::vector<NamedTensor> out;
  for (auto& [name, mlp] : mlps) append_tensors(out, name, mlp, true);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Network::tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& t : const_cast<Network*>(this)->tensors()) out.emplace_back(t.name, t.value);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, mlp] : mlps) {
    for (const auto& layer : mlp.layers) {
      total += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
      if (layer.has_bn_act) total += static_cast<std::size_t>(layer.gamma.size() + layer.beta.size());
    }
  }
  return total;
}

void Network::round_to_storage() {
  for (auto& t : tensors()) {
    *t.value = t.value->unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  }
}

MlpParams& Network::mlp(const std::string& name) {
  auto it = mlps.find(name);
  if (it == mlps.end()) throw InvalidArgument("network has no MLP named " + name);
  return it->second;
}

Network build_network(const NetworkConfig& config, std::uint64_t seed) {
  require(config.input_frames == 2 || config.input_frames == 4,
          "network config: input_frames must be 2 or 4");
  for (const auto& s : config.stages) s.validate();
  require(!config.head_widths.empty() && config.head_widths.back() == 3,
          "network config: head must end with 3 outputs");

  Network net;
  net.config = config;
  Rng rng(seed);
  const bool two_frame = config.input_frames == 2;

  const auto& fe1 = config.stage("fe1");
  net.mlps["fe1"] = MlpParams::init(extractor_input(fe1, 0), fe1.mlp_widths, false, rng);
  std::size_t c1 = fe1.mlp_widths.back();
  const auto& flow1 = config.stage("flow1");
  net.mlps["flow1"] = MlpParams::init(flow_input(flow1, c1), flow1.mlp_widths, false, rng);
  std::size_t cf1 = flow1.mlp_widths.back();
  const auto& fe2 = config.stage("fe2");
  net.mlps["fe2"] = MlpParams::init(extractor_input(fe2, cf1), fe2.mlp_widths, false, rng);
  std::size_t c2 = fe2.mlp_widths.back();
  std::size_t into_fe3 = c2;
  if (!two_frame) {
    const auto& flow2 = config.stage("flow2");
    net.mlps["flow2"] = MlpParams::init(flow_input(flow2, c2), flow2.mlp_widths, false, rng);
    into_fe3 = flow2.mlp_widths.back();
  }
  const auto& fe3 = config.stage("fe3");
  net.mlps["fe3"] = MlpParams::init(extractor_input(fe3, into_fe3), fe3.mlp_widths, false, rng);
  std::size_t c3 = fe3.mlp_widths.back();

  std::size_t head_in = 0;
  if (config.downsampling()) {
    const auto& up1 = config.stage("upconv1");
    net.mlps["upconv1.inner"] = MlpParams::init(c3 + 3, up1.mlp_widths, false, rng);
    net.mlps["upconv1.outer"] =
        MlpParams::init(up1.mlp_widths.back() + into_fe3, up1.mlp2_widths, false, rng);
    const std::size_t u1 = up1.mlp2_widths.back();
    const auto& up2 = config.stage("upconv2");
    net.mlps["upconv2.inner"] = MlpParams::init(u1 + 3, up2.mlp_widths, false, rng);
    net.mlps["upconv2.outer"] =
        MlpParams::init(up2.mlp_widths.back() + cf1, up2.mlp2_widths, false, rng);
    const auto& fp = config.stage("featprop");
    net.mlps["featprop"] = MlpParams::init(up2.mlp2_widths.back(), fp.mlp_widths, false, rng);
    head_in = fp.mlp_widths.back();
  } else {
    head_in = c1 + c2 + c3;
  }
  net.mlps["head"] = MlpParams::init(head_in, config.head_widths, true, rng, kOutputInitScale);
  net.round_to_storage();
  return net;
}

Network build_network(Variant v, std::uint64_t seed) { return build_network(make_config(v), seed); }

TapePrediction forward(PassContext& ctx, Network& net, std::span<const Var> frames) {
  const auto& config = net.config;
  check_frames(config, frames.size());
  for (const auto& f : frames) {
    geometry::validate_points(f->value, "predict_next");
    require(f->value.cols() == 3, "predict_next: frames must be N x 3");
  }

  TapePrediction out;
  auto& stages = out.stages;
  const FeatureCloud current = layers::make_cloud(ctx.tape, frames.back(), "input");

  FeatureCloud flow1;
  FeatureCloud into_fe3;
  if (config.input_frames == 2) {
    const FeatureCloud a = extract(ctx, net, "fe1", layers::make_cloud(ctx.tape, frames[0]), "feat1_prev");
    const FeatureCloud b = extract(ctx, net, "fe1", current, "feat1");
    flow1 = embed(ctx, net, "flow1", a, b, "flow1");
    stages["feat1"] = b;
    stages["flow1"] = flow1;
    into_fe3 = extract(ctx, net, "fe2", flow1, "feat2");
    stages["feat2"] = into_fe3;
  } else {
    std::vector<FeatureCloud> level1;
    for (std::size_t k = 0; k < 4; ++k) {
      const FeatureCloud in = k == 3 ? current : layers::make_cloud(ctx.tape, frames[k]);
      level1.push_back(extract(ctx, net, "fe1", in, "feat1"));
    }
    // Balanced merge, anchored at the later member of each pair.
    const FeatureCloud flow1_prev = embed(ctx, net, "flow1", level1[0], level1[1], "flow1_prev");
    flow1 = embed(ctx, net, "flow1", level1[2], level1[3], "flow1");
    const FeatureCloud feat2_prev = extract(ctx, net, "fe2", flow1_prev, "feat2_prev");
    const FeatureCloud feat2 = extract(ctx, net, "fe2", flow1, "feat2");
    into_fe3 = embed(ctx, net, "flow2", feat2_prev, feat2, "flow2");
    stages["feat1"] = level1[3];
    stages["flow1"] = flow1;
    stages["feat2"] = feat2;
    stages["flow2"] = into_fe3;
  }
  const FeatureCloud feat3 = extract(ctx, net, "fe3", into_fe3, "feat3");
  stages["feat3"] = feat3;

  Var head_input;
  if (config.downsampling()) {
    const FeatureCloud up1 = upsample(ctx, net, "upconv1", feat3, into_fe3, stages, "up1");
    stages["up1"] = up1;
    const FeatureCloud up2 = upsample(ctx, net, "upconv2", up1, flow1, stages, "up2");
    stages["up2"] = up2;
    const FeatureCloud fp = layers::feature_propagation(ctx, up2, current, net.mlp("featprop"));
    stages["featprop"] = fp;
    head_input = fp.features;
  } else {
    const Var parts[] = {stages["feat1"].features, stages["feat2"].features, feat3.features};
    head_input = ops::concat_cols(ctx.tape, parts);
  }
  out.motion = layers::shared_mlp(ctx, head_input, net.mlp("head"));
  out.predicted = ops::add(ctx.tape, frames.back(), out.motion);
  return out;
}

Prediction predict_next(Network& net, std::span<const PointCloud> frames, layers::BnMode mode) {
  check_frames(net.config, frames.size());
  Tape tape(false);
  PassContext ctx(tape, mode);
  std::vector<Var> inputs;
  for (const auto& f : frames) inputs.push_back(tape.constant(f));
  auto result = forward(ctx, net, inputs);
  Prediction out;
  out.motion = result.motion->value;
  out.predicted = result.predicted->value;
  for (const auto& [tag, cloud] : result.stages) out.stage_features[tag] = cloud.features->value;
  return out;
}

std::vector<Prediction> rollout(Network& net, std::span<const PointCloud> frames,
                                std::size_t horizon) {
  require(horizon >= 1, "rollout: horizon must be at least 1");
  check_frames(net.config, frames.size());
  std::vector<PointCloud> window(frames.begin(), frames.end());
  std::vector<Prediction> out;
  out.reserve(horizon);
  for (std::size_t h = 0; h < horizon; ++h) {
    out.push_back(predict_next(net, window, layers::BnMode::eval));
    window.erase(window.begin());
    window.push_back(out.back().predicted);
  }
  return out;
}

}  // namespace tempcloud::network

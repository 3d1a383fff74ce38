#include "tempcloud/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tempcloud::layers {

namespace {

double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Flattened per-row view of a neighbor set: row r pairs neighbor
/// neighbors.indices[r] with query owner[r].
std::vector<Index> owners_of(const geometry::NeighborSet& nbrs) {
  std::vector<Index> owner(nbrs.indices.size());
  for (Index q = 0; q < nbrs.query_count(); ++q) {
    std::fill(owner.begin() + static_cast<std::ptrdiff_t>(nbrs.offsets[q]),
              owner.begin() + static_cast<std::ptrdiff_t>(nbrs.offsets[q + 1]), q);
  }
  return owner;
}

/// Replaces empty neighbor lists with the single nearest reference point.
geometry::NeighborSet fill_empty_with_nearest(const geometry::NeighborSet& found,
                                              const Matrix& query, const Matrix& reference) {
  geometry::NeighborSet out;
  for (Index q = 0; q < found.query_count(); ++q) {
    if (found.count(q) > 0) {
      out.push_query(found.neighbors(q));
      continue;
    }
    const auto nearest = geometry::knn(query.row(static_cast<Eigen::Index>(q)), reference, 1);
    out.push_query(nearest.indices);
  }
  return out;
}

/// Ball query whose result always contains the query's own row. When more than
/// max_neighbors qualify, self replaces the last ascending-index entry.
geometry::NeighborSet ball_query_with_self(const Matrix& centers, const Matrix& points,
                                           std::span<const Index> center_rows, double radius,
                                           std::size_t max_neighbors) {
  const auto found = geometry::ball_query(centers, points, radius, max_neighbors);
  geometry::NeighborSet out;
  std::vector<Index> list;
  for (Index q = 0; q < found.query_count(); ++q) {
    const auto nbrs = found.neighbors(q);
    list.assign(nbrs.begin(), nbrs.end());
    const Index self = center_rows[q];
    if (std::find(list.begin(), list.end(), self) == list.end()) {
      if (list.size() >= max_neighbors && !list.empty()) list.pop_back();
      list.insert(std::upper_bound(list.begin(), list.end(), self), self);
    }
    out.push_query(list);
  }
  return out;
}

Var grouped_max(PassContext& ctx, std::vector<Var> parts, const geometry::NeighborSet& nbrs,
                MlpParams& params) {
  const Var rows = ops::concat_cols(ctx.tape, parts);
  const Var hidden = shared_mlp(ctx, rows, params);
  return ops::group_max(ctx.tape, hidden, nbrs.offsets);
}

std::vector<Index> compose(const std::vector<Index>& origin, const std::vector<Index>& rows) {
  std::vector<Index> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = origin[rows[i]];
  return out;
}

void check_mlp_input(const MlpParams& params, std::size_t width, const std::string& where) {
  require(params.in_width() == width,
          where + ": MLP expects " + std::to_string(params.in_width()) + " inputs, got " +
              std::to_string(width));
}

}  // namespace

std::size_t MlpParams::in_width() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.rows());
}

std::size_t MlpParams::out_width() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.cols());
}

MlpParams MlpParams::init(std::size_t in, const std::vector<std::size_t>& widths,
                          bool plain_output, Rng& rng, double output_scale) {
  require(!widths.empty(), "MlpParams::init: widths must be non-empty");
  MlpParams out;
  std::size_t fan_in = in;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const auto width = static_cast<Eigen::Index>(widths[l]);
    const bool last_plain = plain_output && l + 1 == widths.size();
    double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) *
                                    static_cast<double>(std::max<std::size_t>(fan_in, 1))));
    if (last_plain) bound *= output_scale;
    DenseLayer layer;
    layer.weight.resize(static_cast<Eigen::Index>(fan_in), width);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
      layer.weight.data()[i] = to_storage(rng.uniform(-bound, bound));
    }
    layer.bias = Matrix::Zero(1, width);
    layer.has_bn_act = !last_plain;
    if (layer.has_bn_act) {
      layer.gamma = Matrix::Ones(1, width);
      layer.beta = Matrix::Zero(1, width);
      layer.running_mean = Matrix::Zero(1, width);
      layer.running_var = Matrix::Ones(1, width);
    }
    out.layers.push_back(std::move(layer));
    fan_in = widths[l];
  }
  return out;
}

std::vector<Index> IndexPinning::pin(const std::function<std::vector<Index>()>& compute) {
  if (!replaying_) {
    store_.push_back(compute());
    return store_.back();
  }
  if (cursor_ >= store_.size()) throw StateError("IndexPinning: replay ran past the record");
  return store_[cursor_++];
}

geometry::NeighborSet IndexPinning::pin(const std::function<geometry::NeighborSet()>& compute) {
  geometry::NeighborSet result;
  if (!replaying_) {
    result = compute();
    store_.push_back(result.offsets);
    store_.push_back(result.indices);
    return result;
  }
  if (cursor_ + 2 > store_.size()) {
    throw StateError("IndexPinning: replay ran past the record");
  }
  result.offsets = store_[cursor_++];
  result.indices = store_[cursor_++];
  return result;
}

void IndexPinning::replay() {
  replaying_ = true;
  cursor_ = 0;
}

Var PassContext::bind(const Matrix& parameter) {
  auto it = bound_.find(&parameter);
  if (it != bound_.end()) return it->second;
  Var v = tape.variable(parameter);
  bound_.emplace(&parameter, v);
  return v;
}

Matrix PassContext::gradient(const Matrix& parameter) const {
  auto it = bound_.find(&parameter);
  if (it == bound_.end() || it->second->grad.size() == 0) {
    return Matrix::Zero(parameter.rows(), parameter.cols());
  }
  return it->second->grad;
}

std::vector<Index> PassContext::indices(const std::function<std::vector<Index>()>& compute) {
  return pinning != nullptr ? pinning->pin(compute) : compute();
}

geometry::NeighborSet PassContext::neighbors(
    const std::function<geometry::NeighborSet()>& compute) {
  return pinning != nullptr ? pinning->pin(compute) : compute();
}

FeatureCloud make_cloud(Tape& tape, const Var& points, std::string tag) {
  FeatureCloud cloud;
  cloud.points = points;
  cloud.features = tape.constant(Matrix(points->value.rows(), 0));
  cloud.stage_tag = std::move(tag);
  cloud.origin.resize(static_cast<std::size_t>(points->value.rows()));
  std::iota(cloud.origin.begin(), cloud.origin.end(), Index{0});
  return cloud;
}

void LayerSpec::validate() const {
  require(!mlp_widths.empty(), "LayerSpec " + name + ": mlp widths must be non-empty");
  require(radius.has_value() != k.has_value(),
          "LayerSpec " + name + ": exactly one of radius and k must be set");
  if (radius) require(*radius > 0.0, "LayerSpec " + name + ": radius must be positive");
  if (k) require(*k >= 1, "LayerSpec " + name + ": k must be at least 1");
  require(sample_rate > 0.0, "LayerSpec " + name + ": sample rate must be positive");
}

std::size_t sampled_count(double rate, std::size_t n) {
  const double raw = std::ceil(rate * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, n);
}

Var shared_mlp(PassContext& ctx, const Var& x, MlpParams& params) {
  check_mlp_input(params, static_cast<std::size_t>(x->value.cols()), "shared_mlp");
  Var h = x;
  for (auto& layer : params.layers) {
    h = ops::affine(ctx.tape, h, ctx.bind(layer.weight), ctx.bind(layer.bias));
    if (!layer.has_bn_act) continue;
    h = ops::leaky_relu(ctx.tape, h, kLeakySlope);
    const Var gamma = ctx.bind(layer.gamma);
    const Var beta = ctx.bind(layer.beta);
    if (ctx.mode == BnMode::train) {
      ops::BatchStats stats;
      h = ops::batch_norm_train(ctx.tape, h, gamma, beta, &stats);
      const double n = static_cast<double>(h->value.rows());
      const RowVector unbiased = n > 1.0 ? RowVector(stats.variance * (n / (n - 1.0)))
                                         : stats.variance;
      layer.running_mean = (1.0 - kBatchNormMomentum) * layer.running_mean +
                           kBatchNormMomentum * stats.mean;
      layer.running_var =
          (1.0 - kBatchNormMomentum) * layer.running_var + kBatchNormMomentum * unbiased;
    } else {
      h = ops::batch_norm_fixed(ctx.tape, h, gamma, beta, layer.running_mean.row(0),
                                layer.running_var.row(0));
    }
  }
  return h;
}

FeatureCloud pointnetpp_layer(PassContext& ctx, const FeatureCloud& input, const LayerSpec& spec,
                              MlpParams& params) {
  require(spec.extractor == Extractor::pointnetpp, "pointnetpp_layer: spec is not pointnetpp");
  require(spec.radius.has_value(), "pointnetpp_layer: radius required");
  const Matrix& pts = input.points->value;
  const std::size_t n = input.size();

  std::vector<Index> centers(n);
  std::iota(centers.begin(), centers.end(), Index{0});
  if (spec.sample_rate < 1.0) {
    const std::size_t m = sampled_count(spec.sample_rate, n);
    centers = ctx.indices([&] { return geometry::farthest_point_sample(pts, m, 0).indices; });
  }
  const Var center_points = ops::gather_rows(ctx.tape, input.points, centers);

  const auto nbrs = ctx.neighbors([&] {
    return ball_query_with_self(center_points->value, pts, centers, *spec.radius,
                                spec.max_neighbors);
  });
  const auto owner = owners_of(nbrs);

  std::vector<Var> parts;
  if (input.width() > 0) parts.push_back(ops::gather_rows(ctx.tape, input.features, nbrs.indices));
  parts.push_back(ops::sub(ctx.tape, ops::gather_rows(ctx.tape, input.points, nbrs.indices),
                           ops::gather_rows(ctx.tape, center_points, owner)));
  check_mlp_input(params, input.width() + 3, "pointnetpp_layer " + spec.name);

  FeatureCloud out;
  out.points = center_points;
  out.features = grouped_max(ctx, std::move(parts), nbrs, params);
  out.stage_tag = spec.name;
  out.origin = compose(input.origin, centers);
  return out;
}

FeatureCloud edgeconv_layer(PassContext& ctx, const FeatureCloud& input, const LayerSpec& spec,
                            MlpParams& params) {
  require(spec.extractor == Extractor::edgeconv, "edgeconv_layer: spec is not edgeconv");
  require(spec.k.has_value(), "edgeconv_layer: k required");
  const std::size_t n = input.size();
  const std::size_t k = *spec.k;
  if (k > n) throw InvalidArgument("edgeconv_layer: k exceeds the number of points");

  // Without features yet, coordinates serve as the feature space.
  const Var feats = input.width() > 0 ? input.features : input.points;
  const auto nbrs = ctx.neighbors([&] { return geometry::knn(feats->value, feats->value, k); });
  const auto owner = owners_of(nbrs);

  const Var centre = ops::gather_rows(ctx.tape, feats, owner);
  std::vector<Var> parts{ops::sub(ctx.tape, ops::gather_rows(ctx.tape, feats, nbrs.indices), centre),
                         centre};
  check_mlp_input(params, 2 * static_cast<std::size_t>(feats->value.cols()),
                  "edgeconv_layer " + spec.name);
  const Var pooled = grouped_max(ctx, std::move(parts), nbrs, params);

  FeatureCloud out;
  out.stage_tag = spec.name;
  if (spec.sample_rate < 1.0) {
    const std::size_t m = sampled_count(spec.sample_rate, n);
    // Downsampling picks points spread out in the learned feature space.
    const auto keep =
        ctx.indices([&] { return geometry::farthest_point_sample(pooled->value, m, 0).indices; });
    out.points = ops::gather_rows(ctx.tape, input.points, keep);
    out.features = ops::gather_rows(ctx.tape, pooled, keep);
    out.origin = compose(input.origin, keep);
  } else {
    out.points = input.points;
    out.features = pooled;
    out.origin = input.origin;
  }
  return out;
}

FeatureCloud flow_embedding(PassContext& ctx, const FeatureCloud& earlier,
                            const FeatureCloud& later, const LayerSpec& spec, MlpParams& params) {
  require(earlier.width() == later.width(), "flow_embedding: feature widths differ");
  std::vector<Var> parts;
  geometry::NeighborSet nbrs;
  if (spec.extractor == Extractor::pointnetpp) {
    require(spec.radius.has_value(), "flow_embedding: radius required");
    nbrs = ctx.neighbors([&] {
      const auto found = geometry::ball_query(later.points->value, earlier.points->value,
                                              *spec.radius, spec.max_neighbors);
      return fill_empty_with_nearest(found, later.points->value, earlier.points->value);
    });
    const auto owner = owners_of(nbrs);
    parts.push_back(ops::gather_rows(ctx.tape, earlier.features, nbrs.indices));
    parts.push_back(ops::gather_rows(ctx.tape, later.features, owner));
    parts.push_back(ops::sub(ctx.tape, ops::gather_rows(ctx.tape, earlier.points, nbrs.indices),
                             ops::gather_rows(ctx.tape, later.points, owner)));
    check_mlp_input(params, 2 * later.width() + 3, "flow_embedding " + spec.name);
  } else {
    require(spec.k.has_value(), "flow_embedding: k required");
    require(*spec.k <= earlier.size(), "flow_embedding: k exceeds the earlier cloud size");
    const Var e_feats = earlier.width() > 0 ? earlier.features : earlier.points;
    const Var l_feats = later.width() > 0 ? later.features : later.points;
    nbrs = ctx.neighbors([&] { return geometry::knn(l_feats->value, e_feats->value, *spec.k); });
    const auto owner = owners_of(nbrs);
    const Var centre = ops::gather_rows(ctx.tape, l_feats, owner);
    parts.push_back(
        ops::sub(ctx.tape, ops::gather_rows(ctx.tape, e_feats, nbrs.indices), centre));
    parts.push_back(centre);
    check_mlp_input(params, 2 * static_cast<std::size_t>(l_feats->value.cols()),
                    "flow_embedding " + spec.name);
  }

  FeatureCloud out;
  out.points = later.points;
  out.features = grouped_max(ctx, std::move(parts), nbrs, params);
  out.stage_tag = spec.name;
  out.origin = later.origin;
  return out;
}

FeatureCloud set_upconv(PassContext& ctx, const FeatureCloud& low, const FeatureCloud& high,
                        const LayerSpec& spec, MlpParams& inner, MlpParams& outer,
                        const GroupingSpace* space) {
  const Matrix& low_pts = low.points->value;
  const Matrix& high_pts = high.points->value;
  geometry::NeighborSet nbrs;
  if (spec.radius) {
    nbrs = ctx.neighbors([&] {
      const auto found =
          geometry::ball_query(high_pts, low_pts, *spec.radius, spec.max_neighbors);
      return fill_empty_with_nearest(found, high_pts, low_pts);
    });
  } else {
    require(spec.k.has_value(), "set_upconv: radius or k required");
    const std::size_t k = std::min(*spec.k, low.size());
    const Matrix& q = space != nullptr ? *space->high : high_pts;
    const Matrix& r = space != nullptr ? *space->low : low_pts;
    require(q.rows() == high_pts.rows() && r.rows() == low_pts.rows(),
            "set_upconv: grouping space rows do not match the clouds");
    nbrs = ctx.neighbors([&] { return geometry::knn(q, r, k); });
  }
  const auto owner = owners_of(nbrs);

  std::vector<Var> parts;
  if (low.width() > 0) parts.push_back(ops::gather_rows(ctx.tape, low.features, nbrs.indices));
  parts.push_back(ops::sub(ctx.tape, ops::gather_rows(ctx.tape, low.points, nbrs.indices),
                           ops::gather_rows(ctx.tape, high.points, owner)));
  check_mlp_input(inner, low.width() + 3, "set_upconv " + spec.name + " inner");
  const Var pooled = grouped_max(ctx, std::move(parts), nbrs, inner);

  std::vector<Var> joined{pooled};
  if (high.width() > 0) joined.push_back(high.features);
  check_mlp_input(outer, inner.out_width() + high.width(), "set_upconv " + spec.name + " outer");

  FeatureCloud out;
  out.points = high.points;
  out.features = shared_mlp(ctx, ops::concat_cols(ctx.tape, joined), outer);
  out.stage_tag = spec.name;
  out.origin = high.origin;
  return out;
}

FeatureCloud feature_propagation(PassContext& ctx, const FeatureCloud& low,
                                 const FeatureCloud& high, MlpParams& params) {
  require(low.size() >= 3, "feature_propagation: need at least 3 low-resolution points");
  const auto nbrs = ctx.neighbors(
      [&] { return geometry::knn(high.points->value, low.points->value, 3); });
  const Matrix weights =
      geometry::inverse_distance_weights(high.points->value, low.points->value, nbrs);
  std::vector<Var> parts{ops::weighted_rows(ctx.tape, low.features, nbrs.indices, weights)};
  if (high.width() > 0) parts.push_back(high.features);
  check_mlp_input(params, low.width() + high.width(), "feature_propagation");

  FeatureCloud out;
  out.points = high.points;
  out.features = shared_mlp(ctx, ops::concat_cols(ctx.tape, parts), params);
  out.stage_tag = "featprop";
  out.origin = high.origin;
  return out;
}

void backward(PassContext& ctx, const Var& output, const Matrix& seed) {
  ctx.tape.backward(output, seed);
}

}  // namespace tempcloud::layers

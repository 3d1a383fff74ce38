#pragma once

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tempcloud/geometry.hpp"
#include "tempcloud/random.hpp"
#include "tempcloud/tape.hpp"

namespace tempcloud::layers {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kBatchNormMomentum = 0.1;

enum class BnMode {
  train,         // batch statistics, running estimates updated
  eval,          // running estimates
  frozen_stats,  // running estimates while training later horizons
};

/// Affine map followed (when has_bn_act) by leaky ReLU and batch norm. The
/// normalization matrices are empty when has_bn_act is off.
struct DenseLayer {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
  Matrix gamma;
  Matrix beta;
  Matrix running_mean;
  Matrix running_var;
  bool has_bn_act = true;
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  std::size_t in_width() const;
  std::size_t out_width() const;

  /// Fan-in scaled uniform weights, zero biases, identity batch norm. With
  /// plain_output the last layer skips activation and normalization and its
  /// weights are scaled by output_scale.
  static MlpParams init(std::size_t in, const std::vector<std::size_t>& widths, bool plain_output,
                        Rng& rng, double output_scale = 1.0);
};

/// Records neighbor/sample index sets on the first pass and hands the same sets
/// back on replay, so repeated evaluations see constant groupings.
class IndexPinning {
 public:
  std::vector<Index> pin(const std::function<std::vector<Index>()>& compute);
  geometry::NeighborSet pin(const std::function<geometry::NeighborSet()>& compute);

  /// Subsequent pins return the recorded sets in order.
  void replay();
  bool replaying() const { return replaying_; }

 private:
  std::vector<std::vector<Index>> store_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
};

/// Everything one forward pass needs besides the data.
struct PassContext {
  Tape& tape;
  BnMode mode = BnMode::eval;
  IndexPinning* pinning = nullptr;

  PassContext(Tape& t, BnMode m, IndexPinning* p = nullptr) : tape(t), mode(m), pinning(p) {}

  /// Tape variable for a parameter matrix, created once per pass.
  Var bind(const Matrix& parameter);

  /// Gradient accumulated for a bound parameter (zeros if it never got one).
  Matrix gradient(const Matrix& parameter) const;

  std::vector<Index> indices(const std::function<std::vector<Index>()>& compute);
  geometry::NeighborSet neighbors(const std::function<geometry::NeighborSet()>& compute);

 private:
  std::unordered_map<const Matrix*, Var> bound_;
};

/// Points with per-point features. origin maps rows to rows of the frame the
/// cloud was sampled from.
struct FeatureCloud {
  Var points;    // N x 3
  Var features;  // N x C, C may be 0
  std::string stage_tag;
  std::vector<Index> origin;

  std::size_t size() const { return static_cast<std::size_t>(points->value.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(features->value.cols()); }
};

/// Raw points with no features; origin is the identity.
FeatureCloud make_cloud(Tape& tape, const Var& points, std::string tag = "input");

enum class Extractor { pointnetpp, edgeconv };

struct LayerSpec {
  std::string name;
  Extractor extractor = Extractor::pointnetpp;
  std::optional<double> radius;
  std::optional<std::size_t> k;
  double sample_rate = 1.0;  // fraction for down layers, integer factor for up layers
  std::vector<std::size_t> mlp_widths;
  std::vector<std::size_t> mlp2_widths;  // set upconv only
  std::string sample_space = "euclidean";  // euclidean | own_features | a stage tag
  std::size_t max_neighbors = 32;

  void validate() const;
  bool operator==(const LayerSpec&) const = default;
};

/// ceil(rate * n) with a guard against representation error, at least 1.
std::size_t sampled_count(double rate, std::size_t n);

Var shared_mlp(PassContext& ctx, const Var& x, MlpParams& params);

FeatureCloud pointnetpp_layer(PassContext& ctx, const FeatureCloud& input, const LayerSpec& spec,
                              MlpParams& params);

FeatureCloud edgeconv_layer(PassContext& ctx, const FeatureCloud& input, const LayerSpec& spec,
                            MlpParams& params);

/// Mixes an earlier cloud into a later one; output sits at the later cloud's points.
FeatureCloud flow_embedding(PassContext& ctx, const FeatureCloud& earlier,
                            const FeatureCloud& later, const LayerSpec& spec, MlpParams& params);

/// Feature matrices used for KNN grouping instead of coordinates.
struct GroupingSpace {
  const Matrix* high = nullptr;
  const Matrix* low = nullptr;
};

FeatureCloud set_upconv(PassContext& ctx, const FeatureCloud& low, const FeatureCloud& high,
                        const LayerSpec& spec, MlpParams& inner, MlpParams& outer,
                        const GroupingSpace* space = nullptr);

FeatureCloud feature_propagation(PassContext& ctx, const FeatureCloud& low,
                                 const FeatureCloud& high, MlpParams& params);

/// Reverse pass from the given output with seed gradient.
void backward(PassContext& ctx, const Var& output, const Matrix& seed);

}  // namespace tempcloud::layers

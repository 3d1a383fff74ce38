#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tempcloud/types.hpp"

namespace tempcloud {

/// One value in a recorded computation. grad stays empty until something
/// upstream of the seed reaches it.
struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

using Var = std::shared_ptr<Node>;

/// Reverse-mode recorder over a fixed primitive set. When recording is off,
/// ops only compute values and intermediate nodes are freed as soon as the
/// caller drops them.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value) const;
  Var variable(Matrix value);

  using BackwardFn = std::function<void(Node& self)>;

  /// Registers a node computed from inputs. backward must push self.grad into
  /// the inputs' grads. Exposed so callers can add primitives.
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

  /// Seeds output with seed and replays the record in reverse.
  void backward(const Var& output, const Matrix& seed);

  /// Drops all recorded nodes.
  void clear() { nodes_.clear(); }

 private:
  bool recording_;
  std::vector<Var> nodes_;
};

inline const Matrix& grad_or_empty(const Var& v) { return v->grad; }

namespace ops {

/// x * w + b, with b a 1 x out row broadcast over rows.
Var affine(Tape& tape, const Var& x, const Var& w, const Var& b);
Var leaky_relu(Tape& tape, const Var& x, double slope);

struct BatchStats {
  RowVector mean;
  RowVector variance;  // biased (divides by N)
};

inline constexpr double kBatchNormEps = 1e-5;

/// Normalizes each column with the statistics of this batch.
Var batch_norm_train(Tape& tape, const Var& x, const Var& gamma, const Var& beta,
                     BatchStats* stats);
/// Normalizes each column with fixed statistics.
Var batch_norm_fixed(Tape& tape, const Var& x, const Var& gamma, const Var& beta,
                     const RowVector& mean, const RowVector& variance);

Var gather_rows(Tape& tape, const Var& x, std::span<const Index> rows);

/// Row groups are [offsets[g], offsets[g+1]) of x; column-wise max per group.
/// Gradient goes to the first row attaining the max.
Var group_max(Tape& tape, const Var& x, std::span<const Index> offsets);

/// Horizontal concatenation; zero-width parts are allowed.
Var concat_cols(Tape& tape, std::span<const Var> parts);

Var add(Tape& tape, const Var& a, const Var& b);
Var sub(Tape& tape, const Var& a, const Var& b);

/// out.row(i) = sum_j weights(i, j) * x.row(indices[i * width + j]), with
/// weights held constant.
Var weighted_rows(Tape& tape, const Var& x, std::span<const Index> indices, const Matrix& weights);

}  // namespace ops
}  // namespace tempcloud

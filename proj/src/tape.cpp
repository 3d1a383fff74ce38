#include "tempcloud/tape.hpp"

#include <algorithm>
#include <cmath>

namespace tempcloud {

Var Tape::constant(Matrix value) const {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var Tape::variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = recording_;
  if (recording_) nodes_.push_back(node);
  return node;
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (!recording_) return node;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v && v->requires_grad; });
  if (!needs) return node;
  node->requires_grad = true;
  node->backward = std::move(backward);
  nodes_.push_back(node);
  return node;
}

void Tape::backward(const Var& output, const Matrix& seed) {
  if (nodes_.empty() || !output || !output->requires_grad) {
    throw StateError("backward: no recorded forward pass reaches this output");
  }
  require(seed.rows() == output->value.rows() && seed.cols() == output->value.cols(),
          "backward: seed shape does not match output");
  output->accumulate(seed);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && node.grad.size() != 0) node.backward(node);
  }
}

namespace ops {

namespace {

void push(const Var& v, const Matrix& g) {
  if (v->requires_grad) v->accumulate(g);
}

}  // namespace

Var affine(Tape& tape, const Var& x, const Var& w, const Var& b) {
  require(x->value.cols() == w->value.rows(), "affine: input width does not match weight rows");
  require(b->value.rows() == 1 && b->value.cols() == w->value.cols(), "affine: bias shape");
  Matrix y = x->value * w->value;
  y.rowwise() += b->value.row(0);
  const Var inputs[] = {x, w, b};
  return tape.record(std::move(y), inputs, [x, w, b](Node& self) {
    if (x->requires_grad) x->accumulate(self.grad * w->value.transpose());
    if (w->requires_grad) w->accumulate(x->value.transpose() * self.grad);
    if (b->requires_grad) b->accumulate(self.grad.colwise().sum());
  });
}

Var leaky_relu(Tape& tape, const Var& x, double slope) {
  Matrix y = x->value.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  const Var inputs[] = {x};
  return tape.record(std::move(y), inputs, [x, slope](Node& self) {
    Matrix g = self.grad;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (!(x->value.data()[i] > 0.0)) g.data()[i] *= slope;
    }
    push(x, g);
  });
}

Var batch_norm_train(Tape& tape, const Var& x, const Var& gamma, const Var& beta,
                     BatchStats* stats) {
  const Matrix& in = x->value;
  const auto n = static_cast<double>(in.rows());
  require(in.rows() > 0, "batch_norm: empty batch");
  RowVector mean = in.colwise().mean();
  Matrix centered = in.rowwise() - mean;
  RowVector variance = centered.cwiseAbs2().colwise().sum() / n;
  RowVector inv_std = (variance.array() + kBatchNormEps).rsqrt().matrix();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix y = (xhat.array().rowwise() * gamma->value.row(0).array()).matrix();
  y.rowwise() += beta->value.row(0);
  if (stats != nullptr) {
    stats->mean = mean;
    stats->variance = variance;
  }
  const Var inputs[] = {x, gamma, beta};
  return tape.record(
      std::move(y), inputs,
      [x, gamma, beta, xhat = std::move(xhat), inv_std, n](Node& self) {
        const Matrix& g = self.grad;
        if (gamma->requires_grad) gamma->accumulate((g.array() * xhat.array()).colwise().sum().matrix());
        if (beta->requires_grad) beta->accumulate(g.colwise().sum());
        if (x->requires_grad) {
          Matrix gxhat = g.array().rowwise() * gamma->value.row(0).array();
          RowVector sum_g = gxhat.colwise().sum();
          RowVector sum_gx = (gxhat.array() * xhat.array()).colwise().sum().matrix();
          Matrix gx = (n * gxhat.array()).matrix();
          gx.rowwise() -= sum_g;
          gx -= (xhat.array().rowwise() * sum_gx.array()).matrix();
          gx = (gx.array().rowwise() * (inv_std.array() / n)).matrix();
          x->accumulate(gx);
        }
      });
}

Var batch_norm_fixed(Tape& tape, const Var& x, const Var& gamma, const Var& beta,
                     const RowVector& mean, const RowVector& variance) {
  RowVector scale = ((variance.array() + kBatchNormEps).rsqrt() * gamma->value.row(0).array()).matrix();
  Matrix xhat = (x->value.rowwise() - mean).array().rowwise() *
                (variance.array() + kBatchNormEps).rsqrt();
  Matrix y = (xhat.array().rowwise() * gamma->value.row(0).array()).matrix();
  y.rowwise() += beta->value.row(0);
  const Var inputs[] = {x, gamma, beta};
  return tape.record(std::move(y), inputs,
                     [x, gamma, beta, xhat = std::move(xhat), scale](Node& self) {
                       const Matrix& g = self.grad;
                       if (gamma->requires_grad)
                         gamma->accumulate((g.array() * xhat.array()).colwise().sum().matrix());
                       if (beta->requires_grad) beta->accumulate(g.colwise().sum());
                       if (x->requires_grad) x->accumulate((g.array().rowwise() * scale.array()).matrix());
                     });
}

Var gather_rows(Tape& tape, const Var& x, std::span<const Index> rows) {
  const Matrix& in = x->value;
  Matrix y(static_cast<Eigen::Index>(rows.size()), in.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    y.row(static_cast<Eigen::Index>(r)) = in.row(static_cast<Eigen::Index>(rows[r]));
  }
  const Var inputs[] = {x};
  std::vector<Index> idx(rows.begin(), rows.end());
  return tape.record(std::move(y), inputs, [x, idx = std::move(idx)](Node& self) {
    if (!x->requires_grad) return;
    Matrix g = Matrix::Zero(x->value.rows(), x->value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      g.row(static_cast<Eigen::Index>(idx[r])) += self.grad.row(static_cast<Eigen::Index>(r));
    }
    x->accumulate(g);
  });
}

Var group_max(Tape& tape, const Var& x, std::span<const Index> offsets) {
  const Matrix& in = x->value;
  const std::size_t groups = offsets.size() - 1;
  const auto cols = in.cols();
  Matrix y(static_cast<Eigen::Index>(groups), cols);
  std::vector<Index> argmax(groups * static_cast<std::size_t>(cols));
  for (std::size_t g = 0; g < groups; ++g) {
    require(offsets[g + 1] > offsets[g], "group_max: empty group");
    for (Eigen::Index c = 0; c < cols; ++c) {
      Index best = offsets[g];
      double best_value = in(static_cast<Eigen::Index>(best), c);
      for (Index r = offsets[g] + 1; r < offsets[g + 1]; ++r) {
        const double v = in(static_cast<Eigen::Index>(r), c);
        if (v > best_value) {
          best_value = v;
          best = r;
        }
      }
      y(static_cast<Eigen::Index>(g), c) = best_value;
      argmax[g * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] = best;
    }
  }
  const Var inputs[] = {x};
  return tape.record(std::move(y), inputs, [x, argmax = std::move(argmax), cols](Node& self) {
    if (!x->requires_grad) return;
    Matrix g = Matrix::Zero(x->value.rows(), x->value.cols());
    for (Eigen::Index r = 0; r < self.grad.rows(); ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        g(static_cast<Eigen::Index>(argmax[static_cast<std::size_t>(r * cols + c)]), c) +=
            self.grad(r, c);
      }
    }
    x->accumulate(g);
  });
}

Var concat_cols(Tape& tape, std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const auto rows = parts.front()->value.rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p->value.rows() == rows, "concat_cols: row counts differ");
    cols += p->value.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    if (p->value.cols() > 0) y.middleCols(at, p->value.cols()) = p->value;
    at += p->value.cols();
  }
  std::vector<Var> kept(parts.begin(), parts.end());
  return tape.record(std::move(y), parts, [kept](Node& self) {
    Eigen::Index at = 0;
    for (const auto& p : kept) {
      const auto w = p->value.cols();
      if (w > 0 && p->requires_grad) p->accumulate(self.grad.middleCols(at, w));
      at += w;
    }
  });
}

Var add(Tape& tape, const Var& a, const Var& b) {
  require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
          "add: shape mismatch");
  const Var inputs[] = {a, b};
  return tape.record(a->value + b->value, inputs, [a, b](Node& self) {
    push(a, self.grad);
    push(b, self.grad);
  });
}

Var sub(Tape& tape, const Var& a, const Var& b) {
  require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
          "sub: shape mismatch");
  const Var inputs[] = {a, b};
  return tape.record(a->value - b->value, inputs, [a, b](Node& self) {
    push(a, self.grad);
    if (b->requires_grad) b->accumulate(-self.grad);
  });
}

Var weighted_rows(Tape& tape, const Var& x, std::span<const Index> indices, const Matrix& weights) {
  const auto width = weights.cols();
  require(static_cast<Eigen::Index>(indices.size()) == weights.rows() * width,
          "weighted_rows: index count does not match weights");
  Matrix y = Matrix::Zero(weights.rows(), x->value.cols());
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    for (Eigen::Index j = 0; j < width; ++j) {
      y.row(i) += weights(i, j) * x->value.row(static_cast<Eigen::Index>(indices[i * width + j]));
    }
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  const Var inputs[] = {x};
  return tape.record(std::move(y), inputs, [x, idx = std::move(idx), weights, width](Node& self) {
    if (!x->requires_grad) return;
    Matrix g = Matrix::Zero(x->value.rows(), x->value.cols());
    for (Eigen::Index i = 0; i < weights.rows(); ++i) {
      for (Eigen::Index j = 0; j < width; ++j) {
        g.row(static_cast<Eigen::Index>(idx[i * width + j])) += weights(i, j) * self.grad.row(i);
      }
    }
    x->accumulate(g);
  });
}

}  // namespace ops
}  // namespace tempcloud

#include "tempcloud/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "tempcloud/geometry.hpp"
#include "tempcloud/random.hpp"

namespace tempcloud::metrics {

namespace {

constexpr std::uint64_t kPaddingSeed = 0x7E3D5C1Aull;

void check_cloud(const PointCloud& c, const char* what) {
  if (c.rows() == 0) throw InvalidArgument(std::string(what) + ": empty point cloud");
  require(c.cols() == 3, std::string(what) + ": point clouds must be N x 3");
}

double distance(const PointCloud& p, Index i, const PointCloud& q, Index j) {
  return (p.row(static_cast<Eigen::Index>(i)) - q.row(static_cast<Eigen::Index>(j))).norm();
}

double squared(const PointCloud& p, Index i, const PointCloud& q, Index j) {
  return (p.row(static_cast<Eigen::Index>(i)) - q.row(static_cast<Eigen::Index>(j))).squaredNorm();
}

double assignment_cost(const PointCloud& p, const PointCloud& q, const std::vector<Index>& perm) {
  double cost = 0.0;
  for (Index i = 0; i < perm.size(); ++i) cost += distance(p, i, q, perm[i]);
  return cost;
}

}  // namespace

ChamferResult chamfer_distance(const PointCloud& p, const PointCloud& q, bool normalize) {
  check_cloud(p, "chamfer_distance");
  check_cloud(q, "chamfer_distance");
  ChamferResult out;
  out.nn_p_to_q = geometry::knn(p, q, 1).indices;
  out.nn_q_to_p = geometry::knn(q, p, 1).indices;

  out.per_point_error.resize(out.nn_p_to_q.size());
  double forward = 0.0;
  for (Index i = 0; i < out.nn_p_to_q.size(); ++i) {
    out.per_point_error[i] = squared(p, i, q, out.nn_p_to_q[i]);
    forward += out.per_point_error[i];
  }
  double backward = 0.0;
  for (Index j = 0; j < out.nn_q_to_p.size(); ++j) backward += squared(q, j, p, out.nn_q_to_p[j]);

  if (normalize) {
    forward /= static_cast<double>(p.rows());
    backward /= static_cast<double>(q.rows());
  }
  out.value = 0.5 * (forward + backward);
  return out;
}

Assignment emd_exact(const PointCloud& p, const PointCloud& q) {
  check_cloud(p, "emd_exact");
  check_cloud(q, "emd_exact");
  require(p.rows() == q.rows(), "emd_exact: clouds must have equal size");
  const auto n = static_cast<std::size_t>(p.rows());
  if (n > kExactEmdLimit) throw ResourceLimit("emd_exact: more than 512 points");

  Matrix cost(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) cost(i, j) = distance(p, i, q, j);

  // Shortest augmenting path with row/column potentials, 1-based.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> col_owner(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    col_owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = col_owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[col_owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      col_owner[j0] = col_owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  out.perm.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.perm[col_owner[j] - 1] = j - 1;
  out.cost = assignment_cost(p, q, out.perm);
  return out;
}

Assignment emd_auction(const PointCloud& p, const PointCloud& q, double epsilon_final) {
  check_cloud(p, "emd_auction");
  check_cloud(q, "emd_auction");
  require(p.rows() == q.rows(), "emd_auction: clouds must have equal size");
  require(epsilon_final > 0.0 && std::isfinite(epsilon_final),
          "emd_auction: epsilon_final must be positive");
  const auto n = static_cast<std::size_t>(p.rows());

  Matrix cost(n, n);
  double max_cost = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      cost(i, j) = distance(p, i, q, j);
      max_cost = std::max(max_cost, cost(i, j));
    }
  }

  Assignment out;
  out.perm.resize(n);
  if (n == 1 || max_cost == 0.0) {
    std::iota(out.perm.begin(), out.perm.end(), Index{0});
    out.cost = assignment_cost(p, q, out.perm);
    return out;
  }

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n), assigned(n);
  double eps = std::max(max_cost / 2.0, epsilon_final);
  for (;;) {
    std::fill(owner.begin(), owner.end(), kNone);
    std::fill(assigned.begin(), assigned.end(), kNone);
    std::deque<std::size_t> unassigned(n);
    std::iota(unassigned.begin(), unassigned.end(), std::size_t{0});
    while (!unassigned.empty()) {
      const std::size_t i = unassigned.front();
      unassigned.pop_front();
      // Values are negated costs net of price; bid on the best object.
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double value = -cost(i, j) - price[j];
        if (value > best) {
          second = best;
          best = value;
          best_j = j;
        } else if (value > second) {
          second = value;
        }
      }
      price[best_j] += best - second + eps;
      if (owner[best_j] != kNone) {
        assigned[owner[best_j]] = kNone;
        unassigned.push_back(owner[best_j]);
      }
      owner[best_j] = i;
      assigned[i] = best_j;
    }
    if (eps <= epsilon_final) break;
    eps = std::max(eps / 2.0, epsilon_final);
  }

  for (std::size_t i = 0; i < n; ++i) out.perm[i] = assigned[i];
  out.cost = assignment_cost(p, q, out.perm);
  return out;
}

PaddedPair pad_to_equal_size(Index p_count, Index q_count) {
  PaddedPair out;
  const Index target = std::max(p_count, q_count);
  out.p_rows.resize(p_count);
  out.q_rows.resize(q_count);
  std::iota(out.p_rows.begin(), out.p_rows.end(), Index{0});
  std::iota(out.q_rows.begin(), out.q_rows.end(), Index{0});
  Rng rng(kPaddingSeed);
  auto& smaller = p_count < q_count ? out.p_rows : out.q_rows;
  const Index source = std::min(p_count, q_count);
  while (smaller.size() < target) smaller.push_back(static_cast<Index>(rng.below(source)));
  return out;
}

LossMatching compute_matching(const PointCloud& pred, const PointCloud& target,
                              const LossWeights& weights, double emd_epsilon) {
  check_cloud(pred, "combined_loss");
  check_cloud(target, "combined_loss");
  require(weights.alpha >= 0.0 && weights.beta >= 0.0 &&
              (weights.alpha > 0.0 || weights.beta > 0.0),
          "combined_loss: weights must be non-negative and not both zero");
  LossMatching m;
  if (weights.alpha > 0.0) {
    m.nn_pred_to_target = geometry::knn(pred, target, 1).indices;
    m.nn_target_to_pred = geometry::knn(target, pred, 1).indices;
  }
  if (weights.beta > 0.0) {
    const auto padded = pad_to_equal_size(static_cast<Index>(pred.rows()),
                                          static_cast<Index>(target.rows()));
    PointCloud p(padded.p_rows.size(), 3), q(padded.q_rows.size(), 3);
    for (Index k = 0; k < padded.p_rows.size(); ++k) {
      p.row(static_cast<Eigen::Index>(k)) = pred.row(static_cast<Eigen::Index>(padded.p_rows[k]));
      q.row(static_cast<Eigen::Index>(k)) = target.row(static_cast<Eigen::Index>(padded.q_rows[k]));
    }
    const auto assignment = emd_auction(p, q, emd_epsilon);
    m.emd_pred = padded.p_rows;
    m.emd_target.resize(padded.p_rows.size());
    for (Index k = 0; k < assignment.perm.size(); ++k) {
      m.emd_target[k] = padded.q_rows[assignment.perm[k]];
    }
  }
  return m;
}

LossResult loss_with_matching(const PointCloud& pred, const PointCloud& target,
                              const LossWeights& weights, const LossMatching& matching) {
  LossResult out;
  out.grad = Matrix::Zero(pred.rows(), 3);
  if (!matching.nn_pred_to_target.empty()) {
    const double np = static_cast<double>(pred.rows());
    const double nq = static_cast<double>(target.rows());
    double forward = 0.0, backward = 0.0;
    for (Index i = 0; i < matching.nn_pred_to_target.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const auto j = static_cast<Eigen::Index>(matching.nn_pred_to_target[i]);
      const auto diff = (pred.row(r) - target.row(j)).eval();
      forward += diff.squaredNorm();
      out.grad.row(r) += weights.alpha * diff / np;
    }
    for (Index j = 0; j < matching.nn_target_to_pred.size(); ++j) {
      const auto r = static_cast<Eigen::Index>(matching.nn_target_to_pred[j]);
      const auto diff = (pred.row(r) - target.row(static_cast<Eigen::Index>(j))).eval();
      backward += diff.squaredNorm();
      out.grad.row(r) += weights.alpha * diff / nq;
    }
    out.cd = 0.5 * (forward / np + backward / nq);
  }
  if (!matching.emd_pred.empty()) {
    const double count = static_cast<double>(matching.emd_pred.size());
    double total = 0.0;
    for (Index k = 0; k < matching.emd_pred.size(); ++k) {
      const auto r = static_cast<Eigen::Index>(matching.emd_pred[k]);
      const auto diff =
          (pred.row(r) - target.row(static_cast<Eigen::Index>(matching.emd_target[k]))).eval();
      const double len = diff.norm();
      total += len;
      if (len > 0.0) out.grad.row(r) += weights.beta * diff / (len * count);
    }
    out.emd = total / count;
  }
  out.loss = weights.alpha * out.cd + weights.beta * out.emd;
  out.matching = matching;
  return out;
}

LossResult combined_loss_with_grad(const PointCloud& pred, const PointCloud& target,
                                   const LossWeights& weights, double emd_epsilon) {
  return loss_with_matching(pred, target, weights,
                            compute_matching(pred, target, weights, emd_epsilon));
}

MetricReport evaluate(const PointCloud& pred, const PointCloud& truth, EmdMethod method,
                      double auction_epsilon) {
  MetricReport report;
  const auto cd = chamfer_distance(pred, truth, false);
  report.cd_sum = cd.value;
  const double forward =
      std::accumulate(cd.per_point_error.begin(), cd.per_point_error.end(), 0.0);
  const double backward = 2.0 * cd.value - forward;
  report.cd = 0.5 * (forward / static_cast<double>(pred.rows()) +
                     backward / static_cast<double>(truth.rows()));
  report.per_point_error = cd.per_point_error;

  PointCloud p = pred, q = truth;
  if (pred.rows() != truth.rows()) {
    const auto padded =
        pad_to_equal_size(static_cast<Index>(pred.rows()), static_cast<Index>(truth.rows()));
    p.resize(padded.p_rows.size(), 3);
    q.resize(padded.q_rows.size(), 3);
    for (Index k = 0; k < padded.p_rows.size(); ++k) {
      p.row(static_cast<Eigen::Index>(k)) = pred.row(static_cast<Eigen::Index>(padded.p_rows[k]));
      q.row(static_cast<Eigen::Index>(k)) = truth.row(static_cast<Eigen::Index>(padded.q_rows[k]));
    }
  }
  const auto assignment =
      method == EmdMethod::exact ? emd_exact(p, q) : emd_auction(p, q, auction_epsilon);
  report.emd_sum = assignment.cost;
  report.emd = assignment.cost / static_cast<double>(p.rows());
  return report;
}

}  // namespace tempcloud::metrics

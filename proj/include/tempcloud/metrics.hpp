#pragma once

#include <vector>

#include "tempcloud/types.hpp"

namespace tempcloud::metrics {

struct ChamferResult {
  double value = 0.0;
  std::vector<double> per_point_error;  // squared NN distance, P -> Q
  std::vector<Index> nn_p_to_q;
  std::vector<Index> nn_q_to_p;
};

/// Half the sum of both directional squared-nearest-neighbor terms. With
/// normalize, each direction is averaged over its own cloud instead of summed.
ChamferResult chamfer_distance(const PointCloud& p, const PointCloud& q, bool normalize);

/// A bijection perm: row i of P is matched with row perm[i] of Q.
struct Assignment {
  std::vector<Index> perm;
  double cost = 0.0;  // sum of Euclidean distances, meters
};

inline constexpr std::size_t kExactEmdLimit = 512;

/// Optimal assignment (Hungarian method) on Euclidean distances.
/// Throws ResourceLimit above kExactEmdLimit points.
Assignment emd_exact(const PointCloud& p, const PointCloud& q);

/// Epsilon-scaled forward auction. Cost is within N * epsilon_final of optimal.
Assignment emd_auction(const PointCloud& p, const PointCloud& q, double epsilon_final);

/// Resamples the smaller cloud (with a fixed seed) so both have equal size.
/// Returns row maps into the original clouds.
struct PaddedPair {
  std::vector<Index> p_rows;
  std::vector<Index> q_rows;
};
PaddedPair pad_to_equal_size(Index p_count, Index q_count);

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.02;
};

/// Matching used by the combined loss. Held fixed while differentiating.
struct LossMatching {
  std::vector<Index> nn_pred_to_target;
  std::vector<Index> nn_target_to_pred;
  // EMD pairs after padding: pred row emd_pred[k] <-> target row emd_target[k].
  std::vector<Index> emd_pred;
  std::vector<Index> emd_target;
};

struct LossResult {
  double loss = 0.0;
  double cd = 0.0;   // normalized chamfer, m^2
  double emd = 0.0;  // auction EMD divided by matched count, m
  Matrix grad;       // d loss / d pred, N x 3
  LossMatching matching;
};

inline constexpr double kTrainingEmdEpsilon = 1e-3;

/// alpha * CD(normalized) + beta * EMD(auction, normalized) and its subgradient
/// with respect to pred.
LossResult combined_loss_with_grad(const PointCloud& pred, const PointCloud& target,
                                   const LossWeights& weights,
                                   double emd_epsilon = kTrainingEmdEpsilon);

/// Same loss evaluated under an existing matching.
LossResult loss_with_matching(const PointCloud& pred, const PointCloud& target,
                              const LossWeights& weights, const LossMatching& matching);

/// Finds the matching (nearest neighbors and auction pairs) for pred/target.
LossMatching compute_matching(const PointCloud& pred, const PointCloud& target,
                              const LossWeights& weights, double emd_epsilon);

struct MetricReport {
  double cd = 0.0;      // per-point mean convention, m^2
  double emd = 0.0;     // per-point mean convention, m
  double cd_sum = 0.0;  // raw sums
  double emd_sum = 0.0;
  std::vector<double> per_point_error;
};

enum class EmdMethod { exact, auction };

/// CD and EMD between a prediction and its ground truth. Exact EMD requires
/// equal sizes no larger than kExactEmdLimit; unequal sizes are padded.
MetricReport evaluate(const PointCloud& pred, const PointCloud& truth, EmdMethod method,
                      double auction_epsilon = kTrainingEmdEpsilon);

}  // namespace tempcloud::metrics

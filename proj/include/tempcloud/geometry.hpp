#pragma once

#include <span>
#include <vector>

#include "tempcloud/types.hpp"

namespace tempcloud::geometry {

/// Per-query neighbor lists in compressed-row form: the neighbors of query q
/// are indices[offsets[q] .. offsets[q + 1]).
struct NeighborSet {
  std::vector<Index> offsets{0};
  std::vector<Index> indices;

  std::size_t query_count() const { return offsets.size() - 1; }
  std::size_t count(Index q) const { return offsets[q + 1] - offsets[q]; }
  std::span<const Index> neighbors(Index q) const {
    return {indices.data() + offsets[q], count(q)};
  }
  void push_query(std::span<const Index> list) {
    indices.insert(indices.end(), list.begin(), list.end());
    offsets.push_back(indices.size());
  }

  bool operator==(const NeighborSet&) const = default;
};

struct SampleSelection {
  std::vector<Index> indices;
  Index start_index = 0;
};

/// Throws InvalidArgument unless the matrix is non-empty with finite entries.
void validate_points(const Matrix& points, const char* what);

/// Greedy farthest point sampling. The first pick is start_index; each later
/// pick maximizes the distance to the already-selected set (lowest index on ties).
SampleSelection farthest_point_sample(const Matrix& points, std::size_t m, Index start_index);

/// k nearest reference rows per query row, ascending by distance, lowest index
/// on ties. Exhaustive scan, any dimension.
NeighborSet knn(const Matrix& query, const Matrix& reference, std::size_t k);

/// Reference rows within radius of each 3D query, in ascending index order,
/// truncated to max_neighbors. Uses a uniform grid with cell edge = radius.
NeighborSet ball_query(const Matrix& query, const Matrix& reference, double radius,
                       std::size_t max_neighbors);

struct InterpolationWeights {
  NeighborSet neighbors;  // exactly 3 per query
  Matrix weights;         // N x 3, rows sum to one
};

/// Inverse-distance weights over the 3 nearest references. A reference closer
/// than 1e-10 takes the full weight.
InterpolationWeights three_nn_weights(const Matrix& query, const Matrix& reference);

/// The weighting rule of three_nn_weights applied to given neighbor lists.
Matrix inverse_distance_weights(const Matrix& query, const Matrix& reference,
                                const NeighborSet& neighbors);

}  // namespace tempcloud::geometry

#include "tempcloud/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>

#include "tempcloud/parallel.hpp"

namespace tempcloud::geometry {

namespace {

double squared_distance(const Matrix& a, Index i, const Matrix& b, Index j) {
  double sum = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(static_cast<Eigen::Index>(i), c) - b(static_cast<Eigen::Index>(j), c);
    sum += d * d;
  }
  return sum;
}

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = static_cast<std::uint64_t>(k.x) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::uint64_t>(k.y) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(k.z) * 0x165667B19E3779F9ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

class UniformGrid {
 public:
  UniformGrid(const Matrix& points, double cell) : inv_cell_(1.0 / cell) {
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      cells_[key(points(i, 0), points(i, 1), points(i, 2))].push_back(static_cast<Index>(i));
    }
  }

  CellKey key(double x, double y, double z) const {
    return {static_cast<std::int64_t>(std::floor(x * inv_cell_)),
            static_cast<std::int64_t>(std::floor(y * inv_cell_)),
            static_cast<std::int64_t>(std::floor(z * inv_cell_))};
  }

  const std::vector<Index>* cell(const CellKey& k) const {
    auto it = cells_.find(k);
    return it == cells_.end() ? nullptr : &it->second;
  }

 private:
  double inv_cell_;
  std::unordered_map<CellKey, std::vector<Index>, CellHash> cells_;
};

}  // namespace

void validate_points(const Matrix& points, const char* what) {
  if (points.rows() < 1 || points.cols() < 1) {
    throw InvalidArgument(std::string(what) + ": point matrix must be non-empty");
  }
  if (!points.allFinite()) {
    throw InvalidArgument(std::string(what) + ": point matrix has non-finite entries");
  }
}

SampleSelection farthest_point_sample(const Matrix& points, std::size_t m, Index start_index) {
  validate_points(points, "farthest_point_sample");
  const auto n = static_cast<std::size_t>(points.rows());
  require(m >= 1 && m <= n, "farthest_point_sample: m must lie in [1, N]");
  require(start_index < n, "farthest_point_sample: start_index out of range");

  SampleSelection out;
  out.start_index = start_index;
  out.indices.reserve(m);
  out.indices.push_back(start_index);

  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  Index last = start_index;
  for (std::size_t step = 1; step < m; ++step) {
    Index best = 0;
    double best_dist = -1.0;
    for (Index i = 0; i < n; ++i) {
      const double d = squared_distance(points, i, points, last);
      if (d < nearest[i]) nearest[i] = d;
      if (nearest[i] > best_dist) {
        best_dist = nearest[i];
        best = i;
      }
    }
    out.indices.push_back(best);
    last = best;
  }
  return out;
}

NeighborSet knn(const Matrix& query, const Matrix& reference, std::size_t k) {
  require(query.cols() == reference.cols(), "knn: dimension mismatch");
  const auto n_ref = static_cast<std::size_t>(reference.rows());
  require(k <= n_ref, "knn: k exceeds reference size");
  const auto n_query = static_cast<std::size_t>(query.rows());

  NeighborSet out;
  out.indices.resize(n_query * k);
  out.offsets.resize(n_query + 1);
  for (std::size_t q = 0; q <= n_query; ++q) out.offsets[q] = q * k;
  if (k == 0) return out;

  parallel_for(n_query, [&](std::size_t q) {
    std::vector<std::pair<double, Index>> cand(n_ref);
    for (Index j = 0; j < n_ref; ++j) cand[j] = {squared_distance(query, q, reference, j), j};
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) out.indices[q * k + r] = cand[r].second;
  });
  return out;
}

NeighborSet ball_query(const Matrix& query, const Matrix& reference, double radius,
                       std::size_t max_neighbors) {
  require(radius > 0.0 && std::isfinite(radius), "ball_query: radius must be positive");
  require(query.cols() == 3 && reference.cols() == 3, "ball_query: points must be 3D");

  const auto n_query = static_cast<std::size_t>(query.rows());
  const double r2 = radius * radius;
  const UniformGrid grid(reference, radius);

  std::vector<std::vector<Index>> lists(n_query);
  parallel_for(n_query, [&](std::size_t q) {
    const auto row = static_cast<Eigen::Index>(q);
    const CellKey centre = grid.key(query(row, 0), query(row, 1), query(row, 2));
    auto& found = lists[q];
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const auto* cell = grid.cell({centre.x + dx, centre.y + dy, centre.z + dz});
          if (cell == nullptr) continue;
          for (Index j : *cell) {
            if (squared_distance(query, q, reference, j) <= r2) found.push_back(j);
          }
        }
      }
    }
    std::sort(found.begin(), found.end());
    if (found.size() > max_neighbors) found.resize(max_neighbors);
  });

  NeighborSet out;
  for (const auto& list : lists) out.push_query(list);
  return out;
}

Matrix inverse_distance_weights(const Matrix& query, const Matrix& reference,
                                const NeighborSet& neighbors) {
  Matrix weights(query.rows(), 3);
  for (Eigen::Index q = 0; q < query.rows(); ++q) {
    const auto nbrs = neighbors.neighbors(static_cast<Index>(q));
    require(nbrs.size() == 3, "inverse_distance_weights: need exactly 3 neighbors per query");
    double dist[3];
    int coincident = -1;
    for (int j = 0; j < 3; ++j) {
      dist[j] = std::sqrt(squared_distance(query, static_cast<Index>(q), reference, nbrs[j]));
      if (coincident < 0 && dist[j] < 1e-10) coincident = j;
    }
    if (coincident >= 0) {
      for (int j = 0; j < 3; ++j) weights(q, j) = j == coincident ? 1.0 : 0.0;
      continue;
    }
    const double total = 1.0 / dist[0] + 1.0 / dist[1] + 1.0 / dist[2];
    for (int j = 0; j < 3; ++j) weights(q, j) = (1.0 / dist[j]) / total;
  }
  return weights;
}

InterpolationWeights three_nn_weights(const Matrix& query, const Matrix& reference) {
  require(reference.rows() >= 3, "three_nn_weights: need at least 3 reference points");
  InterpolationWeights out;
  out.neighbors = knn(query, reference, 3);
  out.weights = inverse_distance_weights(query, reference, out.neighbors);
  return out;
}

}  // namespace tempcloud::geometry

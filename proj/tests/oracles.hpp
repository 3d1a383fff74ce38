#pragma once

// Slow reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "tempcloud/random.hpp"
#include "tempcloud/types.hpp"

namespace oracle {

using tempcloud::Index;
using tempcloud::Matrix;

inline Matrix random_points(tempcloud::Rng& rng, std::size_t n, std::size_t d, double lo = 0.0,
                            double hi = 1.0) {
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

inline double dist2(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(static_cast<Eigen::Index>(i), c) - b(static_cast<Eigen::Index>(j), c);
    s += d * d;
  }
  return s;
}

/// Recomputes every candidate's distance to the whole selected set at each step.
inline std::vector<Index> fps(const Matrix& p, std::size_t m, Index start) {
  std::vector<Index> sel{start};
  const auto n = static_cast<std::size_t>(p.rows());
  while (sel.size() < m) {
    double best = -1.0;
    Index best_i = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double nearest = std::numeric_limits<double>::infinity();
      for (Index s : sel) nearest = std::min(nearest, dist2(p, i, p, s));
      if (nearest > best) {
        best = nearest;
        best_i = i;
      }
    }
    sel.push_back(best_i);
  }
  return sel;
}

inline std::vector<std::vector<Index>> knn(const Matrix& q, const Matrix& r, std::size_t k) {
  std::vector<std::vector<Index>> out;
  for (std::size_t i = 0; i < static_cast<std::size_t>(q.rows()); ++i) {
    std::vector<std::pair<double, Index>> all;
    for (std::size_t j = 0; j < static_cast<std::size_t>(r.rows()); ++j) {
      all.emplace_back(dist2(q, i, r, j), j);
    }
    std::sort(all.begin(), all.end());
    std::vector<Index> row;
    for (std::size_t t = 0; t < k; ++t) row.push_back(all[t].second);
    out.push_back(row);
  }
  return out;
}

inline std::vector<std::vector<Index>> ball(const Matrix& q, const Matrix& r, double radius,
                                            std::size_t cap) {
  std::vector<std::vector<Index>> out;
  for (std::size_t i = 0; i < static_cast<std::size_t>(q.rows()); ++i) {
    std::vector<Index> row;
    for (std::size_t j = 0; j < static_cast<std::size_t>(r.rows()) && row.size() < cap; ++j) {
      if (std::sqrt(dist2(q, i, r, j)) <= radius) row.push_back(j);
    }
    out.push_back(row);
  }
  return out;
}

/// Half the sum (or mean) of both directional nearest squared distances.
inline double chamfer(const Matrix& p, const Matrix& q, bool normalize) {
  auto direction = [&](const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(a.rows()); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < static_cast<std::size_t>(b.rows()); ++j) {
        best = std::min(best, dist2(a, i, b, j));
      }
      s += best;
    }
    return normalize ? s / static_cast<double>(a.rows()) : s;
  };
  return 0.5 * (direction(p, q) + direction(q, p));
}

/// Minimum over all permutations; N <= 8.
inline double emd_enumerate(const Matrix& p, const Matrix& q) {
  std::vector<Index> perm(static_cast<std::size_t>(p.rows()));
  std::iota(perm.begin(), perm.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) c += std::sqrt(dist2(p, i, q, perm[i]));
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Largest distance from any point to its nearest selected center.
inline double covering_radius(const Matrix& p, const std::vector<Index>& centers) {
  double worst = 0.0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(p.rows()); ++i) {
    double nearest = std::numeric_limits<double>::infinity();
    for (Index c : centers) nearest = std::min(nearest, std::sqrt(dist2(p, i, p, c)));
    worst = std::max(worst, nearest);
  }
  return worst;
}

/// Optimal k-center radius by enumerating all size-m subsets.
inline double optimal_covering_radius(const Matrix& p, std::size_t m) {
  const auto n = static_cast<std::size_t>(p.rows());
  std::vector<bool> mask(n, false);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(m), true);
  double best = std::numeric_limits<double>::infinity();
  do {
    std::vector<Index> centers;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i]) centers.push_back(i);
    }
    best = std::min(best, covering_radius(p, centers));
  } while (std::prev_permutation(mask.begin(), mask.end()));
  return best;
}

}  // namespace oracle

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tempcloud {

/// Dense row-major matrix used for point sets, feature sets and parameters.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// N x 3 matrix of coordinates in meters.
using PointCloud = Matrix;

using Index = std::size_t;

/// Precondition violations on public operations.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed files: bad lengths, non-finite values, checksum failures.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs above a computational guard (e.g. cubic-cost solvers).
class ResourceLimit : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operations called out of order, e.g. backward before forward.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Filtering left nothing to return.
class EmptyResult : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace tempcloud

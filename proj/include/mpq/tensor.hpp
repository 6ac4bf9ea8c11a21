// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "mpq/errors.hpp"

namespace mpq {

class Rng;

// Dense row-major tensor of rank 1..3. Every dimension is at least 1.
// float is the storage type everywhere; the double instantiation backs the
// verification paths (finite differences, oracles).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> shape, T fill = T(0));
  BasicTensor(std::vector<std::size_t> shape, std::vector<T> data);

  static BasicTensor vector(std::initializer_list<T> values);
  // Rows given as nested lists; all rows must have equal length.
  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static BasicTensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-2 accessors.
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * shape_[1], shape_[1]};
  }

  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  BasicTensor transposed() const;
  bool all_finite() const noexcept;

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorF64 = BasicTensor<double>;

std::size_t shape_numel(std::span<const std::size_t> shape);
void check_shape(std::span<const std::size_t> shape);

// a (m x k) * b (k x n). Accumulates in T.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// float inputs, double accumulation, float result.
Tensor matmul_f64acc(const Tensor& a, const Tensor& b);

// Linear-interpolation quantile: h = (n-1)p, v[floor h] + frac(h) * (v[ceil h] - v[floor h]).
double quantile(std::span<const float> values, double p);
double quantile(std::span<const double> values, double p);

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
};
Stats stats(std::span<const float> values);
Stats stats(std::span<const double> values);

// Largest singular value via power iteration on m^T m.
inline constexpr int kSvdMaxIterations = 1000;
inline constexpr double kSvdTolerance = 1e-10;
double svd_top(const TensorF64& m);
double svd_top(const Tensor& m);

// Symmetric eigendecomposition (cyclic Jacobi). Eigenvalues ascending,
// eigenvectors stored as columns of `vectors`.
struct SymmetricEigen {
  std::vector<double> values;
  TensorF64 vectors;
};
SymmetricEigen symmetric_eigen(const TensorF64& a);

struct KMeansResult {
  std::vector<std::size_t> labels;
  std::vector<double> centroids;
  double sse = 0.0;
  // Within-cluster SSE after every Lloyd assignment step of the winning restart.
  std::vector<double> sse_history;
  int iterations = 0;
};

inline constexpr int kKMeansMaxIterations = 100;
inline constexpr double kKMeansTolerance = 1e-9;

// 1-D k-means: k-means++ seeding from `rng`, then Lloyd iterations. `restarts`
// independent seedings are run and the lowest-SSE result kept. Centroids are
// returned in cluster-id order, not sorted. Throws DegenerateClustering when
// there are fewer distinct values than k.
KMeansResult kmeans(std::span<const double> points, std::size_t k, Rng& rng, int restarts = 8);

}  // namespace mpq

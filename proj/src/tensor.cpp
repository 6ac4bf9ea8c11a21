// SPDX-License-Identifier: Apache-2.0

#include "mpq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mpq/rng.hpp"

namespace mpq {

std::size_t shape_numel(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void check_shape(std::span<const std::size_t> shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got " + std::to_string(shape.size()));
  }
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be >= 1");
  }
}

template <typename T>
BasicTensor<T>::BasicTensor(std::vector<std::size_t> shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(std::vector<std::size_t> shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape volume " + std::to_string(shape_numel(shape_)));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::vector(std::initializer_list<T> values) {
  return BasicTensor({values.size()}, std::vector<T>(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  if (rows.size() == 0) throw DimensionError("matrix needs at least one row");
  const std::size_t cols = rows.begin()->size();
  std::vector<T> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return BasicTensor({rows.size(), cols}, std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::identity(std::size_t n) {
  BasicTensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = T(1);
  return out;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(shape_.size()));
  }
  return shape_[axis];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::transposed() const {
  if (rank() != 2) throw DimensionError("transpose needs a rank-2 tensor");
  const std::size_t r = shape_[0], c = shape_[1];
  BasicTensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = at(i, j);
  return out;
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class BasicTensor<float>;
template class BasicTensor<double>;

namespace {

template <typename Acc, typename T>
BasicTensor<T> matmul_impl(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul needs rank-2 operands");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul inner dimensions differ: " + std::to_string(k) + " vs " +
                         std::to_string(b.rows()));
  }
  std::vector<Acc> acc(n);
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), Acc(0));
    for (std::size_t p = 0; p < k; ++p) {
      const Acc aip = a.at(i, p);
      const T* brow = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<Acc>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

template <typename T>
double quantile_impl(std::span<const T> values, double p) {
  if (values.empty()) throw DomainError("quantile of an empty tensor");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("quantile probability outside [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double h = static_cast<double>(v.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <typename T>
Stats stats_impl(std::span<const T> values) {
  if (values.empty()) throw DomainError("stats of an empty tensor");
  Stats s;
  double sum = 0.0;
  s.min = s.max = values[0];
  for (T v : values) {
    sum += v;
    s.min = std::min<double>(s.min, v);
    s.max = std::max<double>(s.max, v);
  }
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (T v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

TensorF64 square_normalized(const TensorF64& a) {
  TensorF64 out = matmul(a, a);
  double norm = 0.0;
  for (double v : out.data()) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& v : out.data()) v /= norm;
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl<T>(a, b);
}
template Tensor matmul(const Tensor&, const Tensor&);
template TensorF64 matmul(const TensorF64&, const TensorF64&);

Tensor matmul_f64acc(const Tensor& a, const Tensor& b) { return matmul_impl<double>(a, b); }

double quantile(std::span<const float> values, double p) { return quantile_impl(values, p); }
double quantile(std::span<const double> values, double p) { return quantile_impl(values, p); }

Stats stats(std::span<const float> values) { return stats_impl(values); }
Stats stats(std::span<const double> values) { return stats_impl(values); }

double svd_top(const Tensor& m) { return svd_top(m.cast<double>()); }

double svd_top(const TensorF64& m) {
  if (m.rank() != 2) throw DimensionError("svd_top needs a rank-2 tensor");
  if (!m.all_finite()) throw DomainError("svd_top input has non-finite entries");
  const TensorF64 gram = matmul(m.transposed(), m);
  const std::size_t n = gram.rows();

  double scale = 0.0;
  for (double v : gram.data()) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;

  // Iterate with a high power of gram, squared until it settles, so clustered
  // top eigenvalues (common when correlating residual streams) still converge
  // inside the cap. The estimate itself is always the Rayleigh quotient of gram.
  TensorF64 accel = gram;
  for (double& v : accel.data()) v /= scale;
  for (int s = 0; s < 64; ++s) {
    TensorF64 next = square_normalized(accel);
    double change = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) change += (next[i] - accel[i]) * (next[i] - accel[i]);
    accel = std::move(next);
    if (std::sqrt(change) < 1e-13) break;
  }

  std::vector<double> v(n), w(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.5 * std::sin(static_cast<double>(i) + 1.0);

  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : x) e /= s;
    return s;
  };
  auto rayleigh = [&](const std::vector<double>& x) {
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double gi = 0.0;
      for (std::size_t j = 0; j < n; ++j) gi += gram.at(i, j) * x[j];
      r += x[i] * gi;
    }
    return r;
  };

  normalize(v);
  double lambda = rayleigh(v);
  double residual = std::numeric_limits<double>::infinity();
  for (int it = 0; it < kSvdMaxIterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += accel.at(i, j) * v[j];
      w[i] = acc;
    }
    if (normalize(w) == 0.0) {
      // Start vector fell in the null space; restart on a basis vector.
      std::fill(w.begin(), w.end(), 0.0);
      w[static_cast<std::size_t>(it) % n] = 1.0;
    }
    v.swap(w);
    const double next = rayleigh(v);
    residual = std::abs(next - lambda) / std::max(std::abs(next), std::numeric_limits<double>::min());
    lambda = next;
    if (residual <= kSvdTolerance) return std::sqrt(std::max(lambda, 0.0));
  }
  throw NumericError("svd_top power iteration did not converge", residual);
}

SymmetricEigen symmetric_eigen(const TensorF64& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) throw DimensionError("symmetric_eigen needs a square matrix");
  const std::size_t n = a.rows();
  TensorF64 m = a;
  TensorF64 v = TensorF64::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += m.at(i, j) * m.at(i, j);
    return s;
  };
  double total = 0.0;
  for (double x : m.data()) total += x * x;

  constexpr int kMaxSweeps = 100;
  int sweep = 0;
  for (; sweep < kMaxSweeps; ++sweep) {
    const double off = off_norm();
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m.at(p, q);
        if (apq == 0.0) continue;
        const double theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m.at(k, p), mkq = m.at(k, q);
          m.at(k, p) = c * mkp - s * mkq;
          m.at(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m.at(p, k), mqk = m.at(q, k);
          m.at(p, k) = c * mpk - s * mqk;
          m.at(q, k) = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (sweep == kMaxSweeps) throw NumericError("symmetric_eigen did not converge", std::sqrt(off_norm()));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return m.at(i, i) < m.at(j, j); });
  SymmetricEigen out{std::vector<double>(n), TensorF64({n, n})};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = m.at(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors.at(r, c) = v.at(r, order[c]);
  }
  return out;
}

namespace {

struct LloydRun {
  std::vector<std::size_t> labels;
  std::vector<double> centroids;
  std::vector<double> history;
  double sse = 0.0;
  int iterations = 0;
};

double assign(std::span<const double> pts, const std::vector<double>& centroids,
              std::vector<std::size_t>& labels) {
  double sse = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = (pts[i] - centroids[c]) * (pts[i] - centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    labels[i] = best;
    sse += best_d;
  }
  return sse;
}

LloydRun lloyd_once(std::span<const double> pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.size();
  LloydRun run;
  run.centroids.push_back(pts[rng.below(n)]);
  std::vector<double> d2(n);
  while (run.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : run.centroids) best = std::min(best, (pts[i] - c) * (pts[i] - c));
      d2[i] = best;
      total += best;
    }
    const double u = rng.uniform() * total;
    double cum = 0.0;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      cum += d2[i];
      if (d2[i] > 0.0 && cum > u) {
        pick = i;
        break;
      }
    }
    if (pick == n) {
      // Rounding left u at the very top; take the last point not yet covered.
      for (std::size_t i = n; i-- > 0;)
        if (d2[i] > 0.0) {
          pick = i;
          break;
        }
    }
    run.centroids.push_back(pts[pick]);
  }

  run.labels.assign(n, 0);
  std::vector<double> sum(k);
  std::vector<std::size_t> count(k);
  for (int it = 0; it < kKMeansMaxIterations; ++it) {
    run.sse = assign(pts, run.centroids, run.labels);
    run.history.push_back(run.sse);
    run.iterations = it + 1;
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[run.labels[i]] += pts[i];
      ++count[run.labels[i]];
    }
    double movement = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;  // empty cluster keeps its centroid
      const double next = sum[c] / static_cast<double>(count[c]);
      movement = std::max(movement, std::abs(next - run.centroids[c]));
      run.centroids[c] = next;
    }
    if (movement < kKMeansTolerance) break;
  }
  run.sse = assign(pts, run.centroids, run.labels);
  if (run.history.empty() || run.sse != run.history.back()) run.history.push_back(run.sse);
  return run;
}

}  // namespace

KMeansResult kmeans(std::span<const double> points, std::size_t k, Rng& rng, int restarts) {
  if (k == 0) throw DomainError("kmeans needs k >= 1");
  if (points.size() < k) throw DomainError("kmeans needs at least k points");
  for (double p : points)
    if (!std::isfinite(p)) throw DomainError("kmeans input has non-finite values");
  std::vector<double> distinct(points.begin(), points.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < k) {
    throw DegenerateClustering("kmeans: " + std::to_string(distinct.size()) +
                               " distinct values for k = " + std::to_string(k));
  }

  LloydRun best;
  bool have = false;
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    LloydRun run = lloyd_once(points, k, rng);
    if (!have || run.sse < best.sse) {
      best = std::move(run);
      have = true;
    }
  }
  return KMeansResult{std::move(best.labels), std::move(best.centroids), best.sse,
                      std::move(best.history), best.iterations};
}

}  // namespace mpq

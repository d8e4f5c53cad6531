#pragma once

// Dense float32 tensors, the handful of kernels the rest of the library
// needs, a counter-based PRNG and the Adam optimizer.
//
// Storage is 32-bit; every reduction accumulates in 64-bit and runs in a
// fixed order, so results are reproducible bit-for-bit on one platform.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attnrules/error.hpp"

namespace attnrules {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

/// Dense row-major float32 array.
class TensorF32 {
 public:
  TensorF32() : shape_{0} {}

  explicit TensorF32(Shape shape) : shape_(std::move(shape)), data_(shape_volume(shape_), 0.0f) {}

  TensorF32(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_volume(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
    require_finite("tensor construction");
  }

  static TensorF32 zeros(Shape shape) { return TensorF32(std::move(shape)); }

  static TensorF32 vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return TensorF32({n}, std::move(values));
  }

  static TensorF32 matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return TensorF32({r, c}, std::move(data));
  }

  static TensorF32 identity(std::size_t n) {
    TensorF32 t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw DimensionError("axis out of range");
    return shape_[axis];
  }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  std::span<float> row(std::size_t i) {
    const std::size_t c = shape_[1];
    return std::span<float>(data_).subspan(i * c, c);
  }
  std::span<const float> row(std::size_t i) const {
    const std::size_t c = shape_[1];
    return std::span<const float>(data_).subspan(i * c, c);
  }

  void require_rank(std::size_t r, const char* what) const {
    if (rank() != r) {
      throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                           shape_string(shape_));
    }
  }

  void require_finite(const char* what) const {
    for (float v : data_) {
      if (!std::isfinite(v)) throw DomainError(std::string(what) + ": non-finite value");
    }
  }

  friend bool operator==(const TensorF32& a, const TensorF32& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Deterministic randomness

/// Counter-based 64-bit generator (SplitMix64 finalizer over key + counter).
/// `split` derives an independent stream, so every stage can own its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  Rng split(std::uint64_t stream) const {
    Rng r(0);
    r.key_ = mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL));
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline TensorF32 random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  TensorF32 t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

// ---------------------------------------------------------------------------
// Linear algebra

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Matrix product a[m x k] * b[k x n]. Each output accumulates over k in
/// increasing order in double precision.
inline TensorF32 gemm(const TensorF32& a, const TensorF32& b) {
  a.require_rank(2, "gemm lhs");
  b.require_rank(2, "gemm rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("gemm: inner extents differ " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  TensorF32 c({m, n});
  std::vector<double> acc(n);
  const float* bp = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const float* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) c(i, j) = static_cast<float>(acc[j]);
  }
  c.require_finite("gemm");
  return c;
}

/// a[m x k] * b[n x k]^T, i.e. row-by-row dot products.
inline TensorF32 gemm_nt(const TensorF32& a, const TensorF32& b) {
  a.require_rank(2, "gemm_nt lhs");
  b.require_rank(2, "gemm_nt rhs");
  if (a.cols() != b.cols()) {
    throw DimensionError("gemm_nt: inner extents differ " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), n = b.rows();
  TensorF32 c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
  }
  c.require_finite("gemm_nt");
  return c;
}

inline TensorF32 transpose(const TensorF32& a) {
  a.require_rank(2, "transpose");
  TensorF32 t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// m[r x c] * v[c] -> [r]
inline TensorF32 matvec(const TensorF32& m, std::span<const float> v) {
  m.require_rank(2, "matvec");
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: matrix " + shape_string(m.shape()) + " vs vector of length " +
                         std::to_string(v.size()));
  }
  TensorF32 out({m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = static_cast<float>(dot(m.row(i), v));
  return out;
}

/// m[r x c]^T * v[r] -> [c]
inline TensorF32 matvec_t(const TensorF32& m, std::span<const float> v) {
  m.require_rank(2, "matvec_t");
  if (m.rows() != v.size()) {
    throw DimensionError("matvec_t: matrix " + shape_string(m.shape()) + " vs vector of length " +
                         std::to_string(v.size()));
  }
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += vi * r[j];
  }
  TensorF32 out({m.cols()});
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<float>(acc[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Non-linearities

/// Causal softmax over logits[0, upto). Entries at or beyond `upto` come out
/// as exactly zero and are never read.
inline TensorF32 softmax_causal_row(std::span<const float> logits, std::size_t upto) {
  if (logits.empty()) throw DomainError("softmax_causal_row: empty row");
  if (upto < 1 || upto > logits.size()) {
    throw DomainError("softmax_causal_row: upto must lie in [1, " + std::to_string(logits.size()) +
                      "]");
  }
  double mx = logits[0];
  for (std::size_t i = 1; i < upto; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  std::vector<double> e(upto);
  double sum = 0.0;
  for (std::size_t i = 0; i < upto; ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += e[i];
  }
  TensorF32 out({logits.size()});
  for (std::size_t i = 0; i < upto; ++i) out[i] = static_cast<float>(e[i] / sum);
  return out;
}

inline float relu(float x) { return x > 0.0f ? x : 0.0f; }

inline TensorF32 relu(const TensorF32& x) {
  TensorF32 out = x;
  for (auto& v : out.data()) v = relu(v);
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  TensorF32 first_moment;
  TensorF32 second_moment;
  std::uint64_t step_count = 0;
  double lr = 0.0012;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const Shape& param_shape, double lr_ = 0.0012)
      : first_moment(param_shape), second_moment(param_shape), lr(lr_) {}

  void reset_row(std::size_t r) {
    std::fill(first_moment.row(r).begin(), first_moment.row(r).end(), 0.0f);
    std::fill(second_moment.row(r).begin(), second_moment.row(r).end(), 0.0f);
  }
  void reset_entry(std::size_t i) {
    first_moment[i] = 0.0f;
    second_moment[i] = 0.0f;
  }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(TensorF32& params, const TensorF32& grads, AdamState& state) {
  if (params.shape() != grads.shape() || params.shape() != state.first_moment.shape() ||
      params.shape() != state.second_moment.shape()) {
    throw DimensionError("adam_step: params " + shape_string(params.shape()) + ", grads " +
                         shape_string(grads.shape()) + ", moments " +
                         shape_string(state.first_moment.shape()));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  auto p = params.data();
  auto g = grads.data();
  auto m = state.first_moment.data();
  auto v = state.second_moment.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
    const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    p[i] = static_cast<float>(p[i] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
  }
  params.require_finite("adam_step");
}

}  // namespace attnrules

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace protoquant {

using Vector = std::vector<double>;

/// Floor applied to norms in cosine similarity.
inline constexpr double kNormFloor = 1e-12;

/// Dense row-major matrix of doubles.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data has " + std::to_string(data_.size()) +
                       " elements, expected " + std::to_string(rows_ * cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool operator==(const Matrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Spatial feature map, stored location-major: element (i, j, c) lives at
/// ((i * width) + j) * channels + c, so each location's vector is contiguous.
class Tensor3 {
public:
  Tensor3() = default;
  Tensor3(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels),
        data_(height * width * channels, fill) {}
  Tensor3(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (data_.size() != height_ * width_ * channels_) {
      throw ShapeError("tensor data length does not match its shape");
    }
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t locations() const { return height_ * width_; }

  std::span<double> at(std::size_t loc) { return {data_.data() + loc * channels_, channels_}; }
  std::span<const double> at(std::size_t loc) const {
    return {data_.data() + loc * channels_, channels_};
  }
  std::span<double> at(std::size_t i, std::size_t j) { return at(i * width_ + j); }
  std::span<const double> at(std::size_t i, std::size_t j) const { return at(i * width_ + j); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool operator==(const Tensor3&) const = default;

private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// a.b / (max(|a|, eps) * max(|b|, eps)), clamped to [-1, 1]. A zero vector is
/// dissimilar (0) to everything.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("cosine_similarity: dimension mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  }
  const double denom = std::max(norm(a), kNormFloor) * std::max(norm(b), kNormFloor);
  return std::clamp(dot(a, b) / denom, -1.0, 1.0);
}

/// How the temperature enters the concept-matching softmax.
///  - Divide:   exp(cos / alpha); smaller alpha is sharper.
///  - Multiply: exp(alpha * cos), the literal formula with alpha as a gain.
enum class TemperatureMode : std::uint8_t { Divide = 0, Multiply = 1 };

/// Factor the cosine is multiplied by before the softmax.
inline double logit_scale(double alpha, TemperatureMode mode) {
  if (!(alpha > 0.0)) throw DomainError("temperature must be positive");
  return mode == TemperatureMode::Divide ? 1.0 / alpha : alpha;
}

/// Softmax of values / alpha, shifted by the maximum for stability.
inline Vector softmax_sharp(std::span<const double> values, double alpha) {
  if (!(alpha > 0.0)) throw DomainError("softmax_sharp: alpha must be positive");
  Vector out(values.size());
  if (values.empty()) return out;
  const double top = *std::max_element(values.begin(), values.end()) / alpha;
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] / alpha - top);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

/// m x d matrix of unit rows. Rows come in blocks of min(d, remaining) that are
/// mutually orthonormal; separate blocks are drawn independently.
inline Matrix orthogonal_rows(std::size_t m, std::size_t d, std::uint64_t seed) {
  if (m == 0 || d == 0) throw DomainError("orthogonal_rows: m and d must be positive");
  Rng rng(seed);
  Matrix out(m, d);
  std::size_t filled = 0;
  while (filled < m) {
    const std::size_t take = std::min(d, m - filled);
    for (std::size_t r = 0; r < take; ++r) {
      auto row = out.row(filled + r);
      for (;;) {
        for (double& v : row) v = rng.normal();
        // Two Gram-Schmidt passes keep orthogonality near machine precision.
        for (int pass = 0; pass < 2; ++pass) {
          for (std::size_t q = 0; q < r; ++q) {
            auto prev = out.row(filled + q);
            const double proj = dot(row, prev);
            for (std::size_t c = 0; c < d; ++c) row[c] -= proj * prev[c];
          }
        }
        const double n = norm(row);
        if (n > 1e-6) {
          for (double& v : row) v /= n;
          break;
        }
      }
    }
    filled += take;
  }
  return out;
}

}  // namespace protoquant

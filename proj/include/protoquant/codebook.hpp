#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "errors.hpp"
#include "numerics.hpp"

namespace protoquant {

/// Concept prototypes c_1..c_M in R^d plus an active mask.
struct Codebook {
  Matrix codes;                      // M x d
  std::vector<std::uint8_t> active;  // M flags, 1 = active

  Codebook() = default;
  explicit Codebook(Matrix c) : codes(std::move(c)), active(codes.rows(), 1) { validate(); }

  std::size_t size() const { return codes.rows(); }
  std::size_t dim() const { return codes.cols(); }
  bool is_active(std::size_t m) const { return active[m] != 0; }

  std::size_t active_count() const {
    std::size_t n = 0;
    for (auto a : active) n += a != 0;
    return n;
  }

  void validate() const {
    if (active.size() != codes.rows()) throw ShapeError("codebook: active mask length != M");
    for (std::size_t m = 0; m < size(); ++m) {
      if (!(norm(codes.row(m)) >= 1e-9)) {
        throw DomainError("codebook: code " + std::to_string(m) + " is (near) zero");
      }
    }
  }

  bool operator==(const Codebook&) const = default;
};

/// Codes pre-divided by their (floored) norms, so repeated cosine
/// assignments cost one dot product per code.
class NormalizedCodes {
public:
  explicit NormalizedCodes(const Codebook& cb) : unit_(cb.size(), cb.dim()), active_(cb.active) {
    for (std::size_t m = 0; m < cb.size(); ++m) {
      auto src = cb.codes.row(m);
      const double n = std::max(norm(src), kNormFloor);
      auto dst = unit_.row(m);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / n;
    }
  }

  /// Nearest active code by cosine; ties go to the lowest index.
  std::size_t assign(std::span<const double> z) const {
    if (z.size() != unit_.cols()) throw ShapeError("assign: feature dimension != code dimension");
    const double zn = std::max(norm(z), kNormFloor);
    std::size_t best = unit_.rows();
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < unit_.rows(); ++m) {
      if (!active_[m]) continue;
      const double cos = std::clamp(dot(z, unit_.row(m)) / zn, -1.0, 1.0);
      if (cos > best_cos) {
        best_cos = cos;
        best = m;
      }
    }
    if (best == unit_.rows()) throw EmptyCodebookError();
    return best;
  }

private:
  Matrix unit_;
  std::vector<std::uint8_t> active_;
};

/// Nearest active code by cosine similarity, lowest index on ties.
inline std::size_t assign(std::span<const double> z, const Codebook& cb) {
  return NormalizedCodes(cb).assign(z);
}

struct QuantizedMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> indices;  // row-major H x W
  Tensor3 quantized;                 // each location replaced by its code
};

inline QuantizedMap quantize_map(const Tensor3& feat, const Codebook& cb) {
  if (feat.channels() != cb.dim()) throw ShapeError("quantize_map: channel count != code dimension");
  const NormalizedCodes unit(cb);
  QuantizedMap out{feat.height(), feat.width(), std::vector<std::size_t>(feat.locations()),
                   Tensor3(feat.height(), feat.width(), feat.channels())};
  for (std::size_t loc = 0; loc < feat.locations(); ++loc) {
    const std::size_t m = unit.assign(feat.at(loc));
    out.indices[loc] = m;
    auto code = cb.codes.row(m);
    std::copy(code.begin(), code.end(), out.quantized.at(loc).begin());
  }
  return out;
}

/// (1/N) sum ||z - c_q(z)||^2 over the batch positions; z is a constant.
inline double codebook_loss(std::span<const Vector> positions, const Codebook& cb) {
  if (positions.empty()) throw DomainError("codebook_loss: empty batch");
  const NormalizedCodes unit(cb);
  double total = 0.0;
  for (const Vector& z : positions) {
    auto code = cb.codes.row(unit.assign(z));
    for (std::size_t c = 0; c < z.size(); ++c) {
      const double diff = z[c] - code[c];
      total += diff * diff;
    }
  }
  return total / static_cast<double>(positions.size());
}

struct CodebookGradient {
  Matrix grad;                       // M x d
  std::vector<std::size_t> counts;   // positions assigned to each code
  double loss = 0.0;
};

/// Gradient of codebook_loss w.r.t. the codes with assignments held fixed:
/// row k = (2/N) sum_{q(z)=k} (c_k - z). Rows of unassigned codes are zero.
/// Positions are summed in order, so the result is bit-reproducible.
template <typename PositionRange>
CodebookGradient codebook_grad_over(const PositionRange& positions, std::size_t n_positions,
                                    const Codebook& cb) {
  if (n_positions == 0) throw DomainError("codebook_grad: empty batch");
  const NormalizedCodes unit(cb);
  CodebookGradient out{Matrix(cb.size(), cb.dim()), std::vector<std::size_t>(cb.size(), 0), 0.0};
  for (const auto& z : positions) {
    if (z.size() != cb.dim()) throw ShapeError("codebook_grad: feature dimension != code dimension");
    const std::size_t k = unit.assign(z);
    ++out.counts[k];
    auto code = cb.codes.row(k);
    auto g = out.grad.row(k);
    for (std::size_t c = 0; c < code.size(); ++c) {
      const double diff = code[c] - z[c];
      g[c] += diff;
      out.loss += diff * diff;
    }
  }
  const double n = static_cast<double>(n_positions);
  for (double& v : out.grad.data()) v *= 2.0 / n;
  out.loss /= n;
  return out;
}

inline Matrix codebook_grad(std::span<const Vector> positions, const Codebook& cb) {
  return codebook_grad_over(positions, positions.size(), cb).grad;
}

}  // namespace protoquant

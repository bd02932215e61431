#pragma once

// Frozen-backbone feature datasets: the PQFS binary format and the synthetic
// planted-concept generator used as a ground-truth oracle.
//
// PQFS v1 layout (little-endian, no padding):
//   char[4]  magic "PQFS"
//   u32      version (= 1)
//   u32 x 6  n_samples, d, H, W, k, flags
//   i32[n]   labels
//   flags & 0x01  i32[n*H*W]  part ids, -1 = unannotated
//   flags & 0x02  f64[k*d]    pretrained head weights (row-major), f64[k] bias
//   flags & 0x04  i32[H*W*4]  patch rectangles x0 y0 x1 y1 (pixels, half-open)
//   flags & 0x08  n x (u32 length, bytes)  thumbnails
//   flags & 0x10  u8[n]       split, 0 = train, 1 = validation
//   f32[n*d*H*W]  features, ordered (sample, channel, row, col)

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace protoquant {

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Rect {
  std::int32_t x0 = 0;
  std::int32_t y0 = 0;
  std::int32_t x1 = 0;
  std::int32_t y1 = 0;

  std::int64_t area() const {
    return x1 > x0 && y1 > y0 ? std::int64_t{x1 - x0} * (y1 - y0) : 0;
  }
  bool operator==(const Rect&) const = default;
};

struct PretrainedHead {
  Matrix weights;  // k x d
  Vector bias;     // k
  bool operator==(const PretrainedHead&) const = default;
};

enum class SplitTag : std::uint8_t { Train = 0, Validation = 1 };

struct FeatureDataset {
  std::size_t n_samples = 0;
  std::size_t dim = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<std::int32_t> labels;
  /// Ordered (sample, row, col, channel) in memory; transposed on disk.
  std::vector<float> features;
  std::optional<std::vector<std::int32_t>> part_annotations;
  std::optional<PretrainedHead> pretrained_head;
  std::optional<std::vector<Rect>> patch_geometry;
  std::optional<std::vector<std::string>> thumbnails;
  std::optional<std::vector<std::uint8_t>> split;

  std::size_t locations() const { return height * width; }

  std::span<const float> location(std::size_t sample, std::size_t loc) const {
    return {features.data() + (sample * locations() + loc) * dim, dim};
  }

  /// Feature map of one sample widened to double.
  Tensor3 feature_map(std::size_t sample) const {
    Tensor3 out(height, width, dim);
    const float* src = features.data() + sample * locations() * dim;
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i];
    return out;
  }

  std::int32_t part(std::size_t sample, std::size_t loc) const {
    return (*part_annotations)[sample * locations() + loc];
  }

  void validate() const {
    if (n_samples == 0 || dim == 0 || height == 0 || width == 0 || classes == 0) {
      throw ShapeMismatchError("dataset dimensions must be positive");
    }
    if (labels.size() != n_samples) throw ShapeMismatchError("label count != n_samples");
    if (features.size() != n_samples * dim * locations()) {
      throw ShapeMismatchError("feature payload length != n_samples*d*H*W");
    }
    for (auto label : labels) {
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw ShapeMismatchError("label " + std::to_string(label) + " outside [0, k)");
      }
    }
    if (part_annotations) {
      if (part_annotations->size() != n_samples * locations()) {
        throw ShapeMismatchError("part annotation count != n_samples*H*W");
      }
      for (auto id : *part_annotations) {
        if (id < -1) throw ShapeMismatchError("part id below -1");
      }
    }
    if (pretrained_head) {
      if (pretrained_head->weights.rows() != classes || pretrained_head->weights.cols() != dim ||
          pretrained_head->bias.size() != classes) {
        throw ShapeMismatchError("pretrained head shape does not match (k, d)");
      }
    }
    if (patch_geometry && patch_geometry->size() != locations()) {
      throw ShapeMismatchError("patch geometry count != H*W");
    }
    if (thumbnails && thumbnails->size() != n_samples) {
      throw ShapeMismatchError("thumbnail count != n_samples");
    }
    if (split) {
      if (split->size() != n_samples) throw ShapeMismatchError("split length != n_samples");
      for (auto tag : *split) {
        if (tag > 1) throw ShapeMismatchError("split tag must be 0 or 1");
      }
    }
  }

  bool operator==(const FeatureDataset&) const = default;
};

namespace detail {

inline constexpr char kStoreMagic[4] = {'P', 'Q', 'F', 'S'};
inline constexpr std::uint32_t kStoreVersion = 1;

enum StoreFlags : std::uint32_t {
  kHasParts = 0x01,
  kHasHead = 0x02,
  kHasGeometry = 0x04,
  kHasThumbnails = 0x08,
  kHasSplit = 0x10,
  kKnownFlags = 0x1f,
};

}  // namespace detail

inline std::string encode_store(const FeatureDataset& ds) {
  ds.validate();
  using namespace detail;
  io::ByteWriter w;
  w.put_bytes(std::string_view(kStoreMagic, 4));
  w.put<std::uint32_t>(kStoreVersion);
  std::uint32_t flags = 0;
  if (ds.part_annotations) flags |= kHasParts;
  if (ds.pretrained_head) flags |= kHasHead;
  if (ds.patch_geometry) flags |= kHasGeometry;
  if (ds.thumbnails) flags |= kHasThumbnails;
  if (ds.split) flags |= kHasSplit;
  for (std::size_t v : {ds.n_samples, ds.dim, ds.height, ds.width, ds.classes}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint32_t>(flags);
  w.put_all<std::int32_t>(ds.labels);
  if (ds.part_annotations) w.put_all<std::int32_t>(*ds.part_annotations);
  if (ds.pretrained_head) {
    w.put_all<double>(ds.pretrained_head->weights.data());
    w.put_all<double>(ds.pretrained_head->bias);
  }
  if (ds.patch_geometry) {
    for (const Rect& r : *ds.patch_geometry) {
      w.put(r.x0);
      w.put(r.y0);
      w.put(r.x1);
      w.put(r.y1);
    }
  }
  if (ds.thumbnails) {
    for (const auto& blob : *ds.thumbnails) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
      w.put_bytes(blob);
    }
  }
  if (ds.split) w.put_all<std::uint8_t>(*ds.split);

  // (sample, row, col, channel) -> (sample, channel, row, col)
  const std::size_t hw = ds.locations();
  std::vector<float> plane(ds.dim * hw);
  for (std::size_t s = 0; s < ds.n_samples; ++s) {
    const float* src = ds.features.data() + s * hw * ds.dim;
    for (std::size_t loc = 0; loc < hw; ++loc) {
      for (std::size_t c = 0; c < ds.dim; ++c) plane[c * hw + loc] = src[loc * ds.dim + c];
    }
    w.put_all<float>(plane);
  }
  return w.take();
}

inline FeatureDataset decode_store(std::string_view bytes) {
  using namespace detail;
  io::ByteReader r(bytes);
  if (r.remaining() < 4) throw TruncatedPayloadError("file too short for PQFS magic");
  if (r.get_bytes(4) != std::string_view(kStoreMagic, 4)) {
    throw BadMagicError("bad magic: not a PQFS feature store");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kStoreVersion) {
    throw UnsupportedVersionError("unsupported PQFS version " + std::to_string(version));
  }
  FeatureDataset ds;
  ds.n_samples = r.get<std::uint32_t>();
  ds.dim = r.get<std::uint32_t>();
  ds.height = r.get<std::uint32_t>();
  ds.width = r.get<std::uint32_t>();
  ds.classes = r.get<std::uint32_t>();
  const auto flags = r.get<std::uint32_t>();
  if (ds.n_samples == 0 || ds.dim == 0 || ds.height == 0 || ds.width == 0 || ds.classes == 0) {
    throw ShapeMismatchError("header declares a zero dimension");
  }
  if (flags & ~kKnownFlags) throw ShapeMismatchError("header has unknown section flags");
  const std::size_t hw = ds.locations();
  // Fixed-size sections are checked before any payload is read.
  std::size_t fixed = ds.n_samples * 4 + ds.n_samples * ds.dim * hw * 4;
  if (flags & kHasParts) fixed += ds.n_samples * hw * 4;
  if (flags & kHasHead) fixed += (ds.classes * ds.dim + ds.classes) * 8;
  if (flags & kHasGeometry) fixed += hw * 16;
  if (flags & kHasSplit) fixed += ds.n_samples;
  r.require(fixed);

  ds.labels.resize(ds.n_samples);
  r.get_all<std::int32_t>(ds.labels);
  if (flags & kHasParts) {
    ds.part_annotations.emplace(ds.n_samples * hw);
    r.get_all<std::int32_t>(*ds.part_annotations);
  }
  if (flags & kHasHead) {
    PretrainedHead head{Matrix(ds.classes, ds.dim), Vector(ds.classes)};
    r.get_all<double>(head.weights.data());
    r.get_all<double>(head.bias);
    ds.pretrained_head = std::move(head);
  }
  if (flags & kHasGeometry) {
    ds.patch_geometry.emplace(hw);
    for (Rect& rect : *ds.patch_geometry) {
      rect.x0 = r.get<std::int32_t>();
      rect.y0 = r.get<std::int32_t>();
      rect.x1 = r.get<std::int32_t>();
      rect.y1 = r.get<std::int32_t>();
    }
  }
  if (flags & kHasThumbnails) {
    ds.thumbnails.emplace();
    ds.thumbnails->reserve(ds.n_samples);
    for (std::size_t s = 0; s < ds.n_samples; ++s) {
      const auto len = r.get<std::uint32_t>();
      ds.thumbnails->emplace_back(r.get_bytes(len));
    }
  }
  if (flags & kHasSplit) {
    ds.split.emplace(ds.n_samples);
    r.get_all<std::uint8_t>(*ds.split);
  }

  r.require(ds.n_samples * ds.dim * hw * 4);
  ds.features.resize(ds.n_samples * hw * ds.dim);
  std::vector<float> plane(ds.dim * hw);
  for (std::size_t s = 0; s < ds.n_samples; ++s) {
    r.get_all<float>(plane);
    float* dst = ds.features.data() + s * hw * ds.dim;
    for (std::size_t c = 0; c < ds.dim; ++c) {
      for (std::size_t loc = 0; loc < hw; ++loc) dst[loc * ds.dim + c] = plane[c * hw + loc];
    }
  }
  if (r.remaining() != 0) {
    throw ShapeMismatchError(std::to_string(r.remaining()) + " trailing bytes after payload");
  }
  ds.validate();
  return ds;
}

inline void write_store(const FeatureDataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_store(ds));
}

inline FeatureDataset read_store(const std::filesystem::path& path) {
  return decode_store(io::read_file(path));
}

/// Hash of labels and feature payload; identifies the data a model was trained on.
inline std::uint64_t provenance_hash(const FeatureDataset& ds) {
  auto h = io::fnv1a({reinterpret_cast<const char*>(ds.labels.data()),
                      ds.labels.size() * sizeof(std::int32_t)});
  return io::fnv1a({reinterpret_cast<const char*>(ds.features.data()),
                    ds.features.size() * sizeof(float)},
                   h);
}

/// Global average pool of a feature map.
inline Vector global_average_pool(const Tensor3& feat) {
  Vector out(feat.channels(), 0.0);
  for (std::size_t loc = 0; loc < feat.locations(); ++loc) {
    auto z = feat.at(loc);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += z[c];
  }
  for (double& v : out) v /= static_cast<double>(feat.locations());
  return out;
}

/// Argmax of W0 x + b0.
inline std::size_t pretrained_predict(const PretrainedHead& head, std::span<const double> pooled) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < head.weights.rows(); ++c) {
    const double score = dot(head.weights.row(c), pooled) + head.bias[c];
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Stratified split: per class, a seeded shuffle sends round(fraction * n_c)
/// samples to validation (at least one when the class has two or more).
inline std::vector<std::uint8_t> stratified_split(std::span<const std::int32_t> labels,
                                                  std::size_t classes, std::uint64_t seed,
                                                  double validation_fraction = 0.2) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::uint8_t> tags(labels.size(), static_cast<std::uint8_t>(SplitTag::Train));
  Rng rng(mix_seed(seed, 0x5917));
  for (auto& members : by_class) {
    rng.shuffle(std::span(members));
    auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * members.size()));
    if (n_val == 0 && members.size() >= 2) n_val = 1;
    for (std::size_t i = 0; i < n_val; ++i) {
      tags[members[i]] = static_cast<std::uint8_t>(SplitTag::Validation);
    }
  }
  return tags;
}

/// The dataset's own split when it carries one, otherwise a seeded 80/20 one.
inline SplitIndices resolve_split(const FeatureDataset& ds, std::uint64_t seed) {
  const auto tags = ds.split ? *ds.split : stratified_split(ds.labels, ds.classes, seed);
  SplitIndices out;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    (tags[i] == static_cast<std::uint8_t>(SplitTag::Validation) ? out.validation : out.train)
        .push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic planted-concept data

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t true_concepts = 40;
  std::size_t concepts_per_class = 4;
  std::size_t dim = 32;
  std::size_t height = 7;
  std::size_t width = 7;
  std::size_t samples_per_class = 100;
  double noise_sigma = 0.1;
  std::uint64_t seed = 42;
  /// Pixel size of one grid cell in the generated patch geometry.
  std::int32_t cell_pixels = 32;
};

struct SynthResult {
  FeatureDataset dataset;
  Matrix ground_truth;                                // G x d, unit rows
  std::vector<std::vector<std::size_t>> class_concepts;  // sorted concept ids per class
};

namespace detail {

/// Solves the symmetric positive definite system A X = B in place (B is n x m).
inline void cholesky_solve(Matrix& a, Matrix& b) {
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
    if (!(diag > 0.0)) throw DomainError("cholesky_solve: matrix not positive definite");
    a(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= a(i, k) * a(j, k);
      a(i, j) = v / a(j, j);
    }
  }
  for (std::size_t col = 0; col < b.cols(); ++col) {
    for (std::size_t i = 0; i < n; ++i) {
      double v = b(i, col);
      for (std::size_t k = 0; k < i; ++k) v -= a(i, k) * b(k, col);
      b(i, col) = v / a(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double v = b(i, col);
      for (std::size_t k = i + 1; k < n; ++k) v -= a(k, i) * b(k, col);
      b(i, col) = v / a(i, i);
    }
  }
}

}  // namespace detail

/// Ridge-regression probe on GAP features (one-hot targets, bias column
/// included in the penalty), fit on the given samples.
inline PretrainedHead fit_linear_probe(const FeatureDataset& ds,
                                       std::span<const std::size_t> samples,
                                       double lambda = 1e-3) {
  const std::size_t d = ds.dim;
  const std::size_t k = ds.classes;
  Matrix gram(d + 1, d + 1);
  Matrix rhs(d + 1, k);
  Vector x(d + 1);
  for (std::size_t s : samples) {
    const Vector pooled = global_average_pool(ds.feature_map(s));
    std::copy(pooled.begin(), pooled.end(), x.begin());
    x[d] = 1.0;
    for (std::size_t i = 0; i <= d; ++i) {
      for (std::size_t j = 0; j <= d; ++j) gram(i, j) += x[i] * x[j];
      rhs(i, static_cast<std::size_t>(ds.labels[s])) += x[i];
    }
  }
  for (std::size_t i = 0; i <= d; ++i) gram(i, i) += lambda;
  detail::cholesky_solve(gram, rhs);
  PretrainedHead head{Matrix(k, d), Vector(k)};
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < d; ++i) head.weights(c, i) = rhs(i, c);
    head.bias[c] = rhs(d, c);
  }
  return head;
}

inline SynthResult synth_generate(const SynthConfig& cfg) {
  const std::size_t k = cfg.classes;
  const std::size_t g = cfg.true_concepts;
  const std::size_t per_class = cfg.concepts_per_class;
  const std::size_t hw = cfg.height * cfg.width;
  if (k == 0 || cfg.dim == 0 || hw == 0 || cfg.samples_per_class == 0) {
    throw DomainError("synth: dimensions and counts must be positive");
  }
  if (per_class < 1 || g < per_class) throw DomainError("synth: need G >= concepts_per_class >= 1");
  if (!(cfg.noise_sigma >= 0.0)) throw DomainError("synth: noise_sigma must be >= 0");
  if (per_class > hw) {
    throw CapacityError("synth: concepts_per_class (" + std::to_string(per_class) +
                        ") exceeds grid locations (" + std::to_string(hw) + ")");
  }
  // Number of distinct concept sets, capped so it cannot overflow.
  double subsets = 1.0;
  for (std::size_t i = 0; i < per_class; ++i) subsets = subsets * double(g - i) / double(i + 1);
  if (subsets < double(k)) throw CapacityError("synth: not enough distinct concept sets for k classes");

  SynthResult out;
  out.ground_truth = orthogonal_rows(g, cfg.dim, mix_seed(cfg.seed, 0));

  Rng set_rng(mix_seed(cfg.seed, 1));
  std::vector<std::size_t> ids(g);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (k * per_class <= g) {
    set_rng.shuffle(std::span(ids));
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> set(ids.begin() + c * per_class, ids.begin() + (c + 1) * per_class);
      std::sort(set.begin(), set.end());
      out.class_concepts.push_back(std::move(set));
    }
  } else {
    std::set<std::vector<std::size_t>> seen;
    while (out.class_concepts.size() < k) {
      set_rng.shuffle(std::span(ids));
      std::vector<std::size_t> set(ids.begin(), ids.begin() + per_class);
      std::sort(set.begin(), set.end());
      if (seen.insert(set).second) out.class_concepts.push_back(std::move(set));
    }
  }

  FeatureDataset& ds = out.dataset;
  ds.n_samples = k * cfg.samples_per_class;
  ds.dim = cfg.dim;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.classes = k;
  ds.labels.reserve(ds.n_samples);
  ds.features.assign(ds.n_samples * hw * cfg.dim, 0.0f);
  ds.part_annotations.emplace(ds.n_samples * hw, -1);

  // Concepts are unit norm, so filler vectors stay below half of that.
  constexpr double kMinConceptNorm = 1.0;
  const double filler_cap = 0.5 * kMinConceptNorm;

  Rng rng(mix_seed(cfg.seed, 2));
  Vector v(cfg.dim);
  std::vector<std::size_t> locs(hw);
  std::size_t sample = 0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t rep = 0; rep < cfg.samples_per_class; ++rep, ++sample) {
      ds.labels.push_back(static_cast<std::int32_t>(c));
      float* base = ds.features.data() + sample * hw * cfg.dim;
      for (std::size_t loc = 0; loc < hw; ++loc) {
        for (double& x : v) x = rng.normal();
        const double scale = filler_cap * rng.uniform() / std::max(norm(v), kNormFloor);
        for (std::size_t i = 0; i < cfg.dim; ++i) base[loc * cfg.dim + i] = float(v[i] * scale);
      }
      std::iota(locs.begin(), locs.end(), std::size_t{0});
      for (std::size_t i = 0; i < per_class; ++i) {
        std::swap(locs[i], locs[i + rng.below(hw - i)]);
      }
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::size_t concept_id = out.class_concepts[c][i];
        auto dir = out.ground_truth.row(concept_id);
        for (std::size_t j = 0; j < cfg.dim; ++j) v[j] = dir[j] + cfg.noise_sigma * rng.normal();
        const double n = std::max(norm(v), kNormFloor);
        for (std::size_t j = 0; j < cfg.dim; ++j) base[locs[i] * cfg.dim + j] = float(v[j] / n);
        (*ds.part_annotations)[sample * hw + locs[i]] = static_cast<std::int32_t>(concept_id);
      }
    }
  }

  ds.split = stratified_split(ds.labels, k, mix_seed(cfg.seed, 3));
  ds.patch_geometry.emplace();
  for (std::size_t i = 0; i < cfg.height; ++i) {
    for (std::size_t j = 0; j < cfg.width; ++j) {
      const auto x0 = static_cast<std::int32_t>(j) * cfg.cell_pixels;
      const auto y0 = static_cast<std::int32_t>(i) * cfg.cell_pixels;
      ds.patch_geometry->push_back({x0, y0, x0 + cfg.cell_pixels, y0 + cfg.cell_pixels});
    }
  }
  const SplitIndices split = resolve_split(ds, 0);
  ds.pretrained_head = fit_linear_probe(ds, split.train);
  ds.validate();
  return out;
}

}  // namespace protoquant

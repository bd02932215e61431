#pragma once

// The interpretable head: concept matching (cosine + sharp softmax), spatial
// max-pool aggregation, and a non-negative concept-to-class matrix, with
// analytic gradients.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "codebook.hpp"
#include "errors.hpp"
#include "numerics.hpp"

namespace protoquant {

/// Which codes share the softmax denominator.
enum class SoftmaxSupport : std::uint8_t { All = 0, Active = 1 };

struct ConceptActivation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t concepts = 0;
  std::vector<double> p;                 // (location, concept), row-major locations
  Vector s;                              // presence score per concept
  std::vector<std::size_t> argmax_loc;   // flat location attaining s[m]

  std::size_t locations() const { return height * width; }
  double prob(std::size_t loc, std::size_t m) const { return p[loc * concepts + m]; }
  std::span<const double> at(std::size_t loc) const { return {p.data() + loc * concepts, concepts}; }
};

/// Non-negative k x M class matrix with a logical keep-mask and per-concept
/// neutralization. Masked or neutralized entries contribute nothing.
struct ClassMatrix {
  Matrix weights;
  std::vector<std::uint8_t> logical_mask;  // k*M, 1 = kept
  std::vector<std::uint8_t> neutralized;   // M, 1 = neutralized

  ClassMatrix() = default;
  explicit ClassMatrix(Matrix w)
      : weights(std::move(w)),
        logical_mask(weights.rows() * weights.cols(), 1),
        neutralized(weights.cols(), 0) {}

  std::size_t classes() const { return weights.rows(); }
  std::size_t concepts() const { return weights.cols(); }

  bool contributes(std::size_t c, std::size_t m) const {
    return logical_mask[c * concepts() + m] != 0 && neutralized[m] == 0;
  }
  double effective(std::size_t c, std::size_t m) const {
    return contributes(c, m) ? weights(c, m) : 0.0;
  }
  Matrix effective_weights() const {
    Matrix out(classes(), concepts());
    for (std::size_t c = 0; c < classes(); ++c) {
      for (std::size_t m = 0; m < concepts(); ++m) out(c, m) = effective(c, m);
    }
    return out;
  }

  void validate() const {
    if (logical_mask.size() != weights.rows() * weights.cols() ||
        neutralized.size() != weights.cols()) {
      throw ShapeError("class matrix: mask shapes do not match W");
    }
    for (double w : weights.data()) {
      if (!(w >= 0.0)) throw DomainError("class matrix: W must be non-negative and finite");
    }
  }

  bool operator==(const ClassMatrix&) const = default;
};

struct HeadModel {
  Codebook codebook;
  ClassMatrix classes;
  double alpha = 0.1;
  TemperatureMode temperature_mode = TemperatureMode::Divide;
  SoftmaxSupport softmax_support = SoftmaxSupport::All;

  std::size_t concepts() const { return codebook.size(); }
  std::size_t num_classes() const { return classes.classes(); }
  std::size_t dim() const { return codebook.dim(); }

  bool in_support(std::size_t m) const {
    return softmax_support == SoftmaxSupport::All || codebook.is_active(m);
  }

  void validate() const {
    codebook.validate();
    classes.validate();
    if (codebook.size() != classes.concepts()) {
      throw ShapeError("head model: codebook size != class matrix columns");
    }
    logit_scale(alpha, temperature_mode);
  }

  bool operator==(const HeadModel&) const = default;
};

/// Softmax over the support of cosine similarities at every location.
inline ConceptActivation concept_match(const Tensor3& feat, const HeadModel& model) {
  const std::size_t n_codes = model.concepts();
  if (feat.channels() != model.dim()) throw ShapeError("concept_match: feature dim != code dim");
  const double scale = logit_scale(model.alpha, model.temperature_mode);
  const double alpha = 1.0 / scale;

  std::vector<std::size_t> support;
  for (std::size_t m = 0; m < n_codes; ++m) {
    if (model.in_support(m)) support.push_back(m);
  }
  if (support.empty()) throw EmptyCodebookError();

  Vector code_norm(n_codes);
  for (std::size_t m = 0; m < n_codes; ++m) {
    code_norm[m] = std::max(norm(model.codebook.codes.row(m)), kNormFloor);
  }

  ConceptActivation act;
  act.height = feat.height();
  act.width = feat.width();
  act.concepts = n_codes;
  act.p.assign(feat.locations() * n_codes, 0.0);
  Vector cos(support.size());
  for (std::size_t loc = 0; loc < feat.locations(); ++loc) {
    auto z = feat.at(loc);
    const double zn = std::max(norm(z), kNormFloor);
    for (std::size_t i = 0; i < support.size(); ++i) {
      const std::size_t m = support[i];
      cos[i] = std::clamp(dot(z, model.codebook.codes.row(m)) / (zn * code_norm[m]), -1.0, 1.0);
    }
    const Vector probs = model.temperature_mode == TemperatureMode::Divide
                             ? softmax_sharp(cos, model.alpha)
                             : softmax_sharp(cos, alpha);
    for (std::size_t i = 0; i < support.size(); ++i) act.p[loc * n_codes + support[i]] = probs[i];
  }
  return act;
}

struct Presence {
  Vector s;
  std::vector<std::size_t> argmax_loc;
};

/// Spatial max-pool per concept; ties resolve to the first location in
/// row-major order.
inline Presence aggregate(const ConceptActivation& act) {
  Presence out{Vector(act.concepts, -std::numeric_limits<double>::infinity()),
               std::vector<std::size_t>(act.concepts, 0)};
  for (std::size_t loc = 0; loc < act.locations(); ++loc) {
    for (std::size_t m = 0; m < act.concepts; ++m) {
      const double v = act.prob(loc, m);
      if (v > out.s[m]) {
        out.s[m] = v;
        out.argmax_loc[m] = loc;
      }
    }
  }
  return out;
}

inline Vector class_logits(std::span<const double> s, const HeadModel& model) {
  if (s.size() != model.concepts()) throw ShapeError("class_logits: score length != M");
  const ClassMatrix& cm = model.classes;
  Vector logits(cm.classes(), 0.0);
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    double acc = 0.0;
    for (std::size_t m = 0; m < cm.concepts(); ++m) acc += cm.effective(c, m) * s[m];
    logits[c] = acc;
  }
  return logits;
}

struct ForwardResult {
  Vector logits;
  ConceptActivation activation;
};

inline ForwardResult forward(const Tensor3& feat, const HeadModel& model) {
  ForwardResult out{{}, concept_match(feat, model)};
  Presence pooled = aggregate(out.activation);
  out.activation.s = std::move(pooled.s);
  out.activation.argmax_loc = std::move(pooled.argmax_loc);
  out.logits = class_logits(out.activation.s, model);
  return out;
}

/// Index of the largest logit, lowest index on ties.
inline std::size_t predict(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

struct HeadGradients {
  Matrix weights;  // k x M
  Matrix codes;    // M x d
};

/// Backpropagates dL/dlogits through the head. W gradients are zero on masked
/// or neutralized entries. Code gradients flow only through each concept's
/// argmax location (max-pool subgradient), then the softmax Jacobian and the
/// cosine derivative dcos(z,c)/dc = z/(|z||c|) - cos * c/|c|^2.
inline HeadGradients head_backward(const Tensor3& feat, const HeadModel& model,
                                   const ConceptActivation& trace,
                                   std::span<const double> dlogits) {
  const std::size_t n_codes = model.concepts();
  const std::size_t k = model.num_classes();
  if (trace.p.empty() || trace.s.size() != n_codes || trace.argmax_loc.size() != n_codes ||
      trace.concepts != n_codes || trace.locations() != feat.locations()) {
    throw StateError("head_backward: no forward trace for this input and model");
  }
  if (dlogits.size() != k) throw ShapeError("head_backward: gradient length != k");

  HeadGradients out{Matrix(k, n_codes), Matrix(n_codes, model.dim())};
  const ClassMatrix& cm = model.classes;
  Vector ds(n_codes, 0.0);
  bool any = false;
  for (std::size_t c = 0; c < k; ++c) {
    if (dlogits[c] == 0.0) continue;
    for (std::size_t m = 0; m < n_codes; ++m) {
      if (!cm.contributes(c, m)) continue;
      out.weights(c, m) = dlogits[c] * trace.s[m];
      ds[m] += dlogits[c] * cm.weights(c, m);
      any = true;
    }
  }
  if (!any) return out;

  const double scale = logit_scale(model.alpha, model.temperature_mode);
  Vector code_norm(n_codes);
  for (std::size_t m = 0; m < n_codes; ++m) {
    code_norm[m] = std::max(norm(model.codebook.codes.row(m)), kNormFloor);
  }
  Vector upstream(n_codes);
  for (std::size_t loc = 0; loc < feat.locations(); ++loc) {
    bool hit = false;
    for (std::size_t m = 0; m < n_codes; ++m) {
      upstream[m] = (trace.argmax_loc[m] == loc) ? ds[m] : 0.0;
      hit = hit || upstream[m] != 0.0;
    }
    if (!hit) continue;
    auto p = trace.at(loc);
    double mean = 0.0;
    for (std::size_t m = 0; m < n_codes; ++m) mean += upstream[m] * p[m];
    auto z = feat.at(loc);
    const double zn = std::max(norm(z), kNormFloor);
    for (std::size_t j = 0; j < n_codes; ++j) {
      if (!model.in_support(j) || p[j] == 0.0) continue;
      const double dcos = scale * p[j] * (upstream[j] - mean);
      if (dcos == 0.0) continue;
      auto code = model.codebook.codes.row(j);
      const double nc = code_norm[j];
      const double cos = std::clamp(dot(z, code) / (zn * nc), -1.0, 1.0);
      auto g = out.codes.row(j);
      for (std::size_t d = 0; d < code.size(); ++d) {
        g[d] += dcos * (z[d] / (zn * nc) - cos * code[d] / (nc * nc));
      }
    }
  }
  return out;
}

}  // namespace protoquant

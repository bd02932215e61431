#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "errors.hpp"
#include "featurestore.hpp"
#include "head.hpp"

namespace protoquant {

struct PatchMatch {
  std::size_t sample = 0;
  std::size_t location = 0;
  double similarity = 0.0;
  bool operator==(const PatchMatch&) const = default;
};

/// The n store locations most cosine-similar to code m, best first; ties rank
/// by sample, then location.
inline std::vector<PatchMatch> nearest_patches(const HeadModel& model, const FeatureDataset& store,
                                               std::size_t concept_id, std::size_t n) {
  if (store.n_samples == 0) throw DomainError("nearest_patches: empty store");
  if (concept_id >= model.concepts()) throw IndexError("nearest_patches: concept out of range");
  if (store.dim != model.dim()) throw ShapeError("nearest_patches: store dim != code dim");
  auto code = model.codebook.codes.row(concept_id);
  std::vector<PatchMatch> all;
  all.reserve(store.n_samples * store.locations());
  Vector z(store.dim);
  for (std::size_t s = 0; s < store.n_samples; ++s) {
    for (std::size_t loc = 0; loc < store.locations(); ++loc) {
      auto raw = store.location(s, loc);
      std::copy(raw.begin(), raw.end(), z.begin());
      all.push_back({s, loc, cosine_similarity(z, code)});
    }
  }
  const std::size_t keep = std::min(n, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [](const PatchMatch& a, const PatchMatch& b) {
                      if (a.similarity != b.similarity) return a.similarity > b.similarity;
                      if (a.sample != b.sample) return a.sample < b.sample;
                      return a.location < b.location;
                    });
  all.resize(keep);
  return all;
}

struct ConceptExplanation {
  std::size_t concept_id = 0;
  double contribution = 0.0;  // W_eff[c, m] * s_m for the explained class
  double presence = 0.0;
  std::size_t location = 0;
  std::vector<double> activation_map;  // H x W, row-major
  std::vector<PatchMatch> patches;
};

struct ExplanationPayload {
  std::size_t sample = 0;
  std::size_t label = 0;
  std::size_t predicted = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Vector logits;
  /// Contribution of every concept to the predicted class, indexed by concept.
  Vector contributions;
  std::vector<ConceptExplanation> top;
  /// Predicted logit minus the listed contributions.
  double remainder = 0.0;
};

/// Explains the prediction for one store sample by its top-n concept
/// contributions to the predicted class.
inline ExplanationPayload explain_sample(const HeadModel& model, const FeatureDataset& store,
                                         std::size_t sample, std::size_t top_n,
                                         std::size_t patches_per_concept = 4) {
  if (sample >= store.n_samples) throw IndexError("explain: sample out of range");
  const ForwardResult fwd = forward(store.feature_map(sample), model);
  ExplanationPayload out;
  out.sample = sample;
  out.label = static_cast<std::size_t>(store.labels[sample]);
  out.predicted = predict(fwd.logits);
  out.height = store.height;
  out.width = store.width;
  out.logits = fwd.logits;
  const std::size_t n_codes = model.concepts();
  out.contributions.resize(n_codes);
  for (std::size_t m = 0; m < n_codes; ++m) {
    out.contributions[m] = model.classes.effective(out.predicted, m) * fwd.activation.s[m];
  }
  std::vector<std::size_t> order(n_codes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.contributions[a] > out.contributions[b];
  });
  double listed = 0.0;
  for (std::size_t r = 0; r < std::min(top_n, n_codes); ++r) {
    const std::size_t m = order[r];
    ConceptExplanation ce;
    ce.concept_id = m;
    ce.contribution = out.contributions[m];
    ce.presence = fwd.activation.s[m];
    ce.location = fwd.activation.argmax_loc[m];
    ce.activation_map.resize(fwd.activation.locations());
    for (std::size_t loc = 0; loc < ce.activation_map.size(); ++loc) {
      ce.activation_map[loc] = fwd.activation.prob(loc, m);
    }
    if (patches_per_concept > 0) ce.patches = nearest_patches(model, store, m, patches_per_concept);
    listed += ce.contribution;
    out.top.push_back(std::move(ce));
  }
  out.remainder = out.logits[out.predicted] - listed;
  return out;
}

}  // namespace protoquant

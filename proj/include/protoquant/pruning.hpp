#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "featurestore.hpp"
#include "head.hpp"
#include "optim.hpp"

namespace protoquant {

struct PruneReport {
  std::size_t k = 0;  // top-K per class, 0 when no logical mask was applied
  std::size_t codes_before = 0;
  std::size_t codes_after = 0;
  std::vector<std::size_t> removed;
  std::optional<double> accuracy_before;
  std::optional<double> accuracy_after;
  /// Largest |logit change| from removal under full-softmax semantics, when measured.
  std::optional<double> full_support_max_delta;

  std::string to_text() const {
    std::ostringstream out;
    out.precision(10);
    out << "K=" << k << "\ncodes_before=" << codes_before << "\ncodes_after=" << codes_after
        << "\nremoved=";
    for (std::size_t i = 0; i < removed.size(); ++i) out << (i ? "," : "") << removed[i];
    out << "\n";
    if (accuracy_before) out << "accuracy_before=" << *accuracy_before << "\n";
    if (accuracy_after) out << "accuracy_after=" << *accuracy_after << "\n";
    if (full_support_max_delta) out << "full_support_max_logit_delta=" << *full_support_max_delta << "\n";
    return out.str();
  }
};

/// Keeps the K largest entries of each class row (lowest column wins ties at
/// the K-th value) and masks the rest. W itself is unchanged.
inline HeadModel logical_prune_topk(HeadModel model, std::size_t top_k) {
  if (top_k == 0) throw DomainError("logical_prune_topk: K must be >= 1");
  ClassMatrix& cm = model.classes;
  const std::size_t n_codes = cm.concepts();
  std::vector<std::size_t> cols(n_codes);
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    std::stable_sort(cols.begin(), cols.end(),
                     [&](std::size_t a, std::size_t b) { return cm.weights(c, a) > cm.weights(c, b); });
    for (std::size_t r = 0; r < n_codes; ++r) {
      cm.logical_mask[c * n_codes + cols[r]] = r < top_k ? 1 : 0;
    }
  }
  return model;
}

/// Codes with no strictly positive kept weight in any class. Neutralization is
/// reversible and does not count.
inline std::vector<std::size_t> unused_codes(const HeadModel& model) {
  std::vector<std::size_t> out;
  const std::size_t n_codes = model.concepts();
  for (std::size_t m = 0; m < n_codes; ++m) {
    bool used = false;
    for (std::size_t c = 0; c < model.num_classes() && !used; ++c) {
      used = model.classes.logical_mask[c * n_codes + m] != 0 && model.classes.weights(c, m) > 0.0;
    }
    if (!used) out.push_back(m);
  }
  return out;
}

/// Marks unused codes inactive without removing them. Under active softmax
/// support this model predicts exactly like the physically pruned one.
inline HeadModel deactivate_unused(HeadModel model) {
  for (std::size_t m : unused_codes(model)) model.codebook.active[m] = 0;
  return model;
}

struct PhysicalPruneResult {
  HeadModel model;
  std::map<std::size_t, std::size_t> remap;  // old index -> new index, empty if unchanged
  PruneReport report;
};

/// Removes unused codes from the codebook and the class matrix.
inline PhysicalPruneResult physical_prune(const HeadModel& model) {
  model.validate();
  const std::vector<std::size_t> removed = unused_codes(model);
  PhysicalPruneResult out{model, {}, {}};
  out.report.codes_before = model.concepts();
  out.report.removed = removed;
  if (removed.empty()) {
    out.report.codes_after = model.concepts();
    return out;
  }
  if (removed.size() == model.concepts()) {
    throw DegenerateModelError("physical_prune: every code is unused; nothing would remain");
  }
  std::vector<std::size_t> kept;
  for (std::size_t m = 0, r = 0; m < model.concepts(); ++m) {
    if (r < removed.size() && removed[r] == m) {
      ++r;
      continue;
    }
    out.remap[m] = kept.size();
    kept.push_back(m);
  }
  const std::size_t k = model.num_classes();
  Matrix codes(kept.size(), model.dim());
  std::vector<std::uint8_t> active(kept.size());
  Matrix w(k, kept.size());
  std::vector<std::uint8_t> mask(k * kept.size());
  std::vector<std::uint8_t> neutralized(kept.size());
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const std::size_t m = kept[j];
    auto src = model.codebook.codes.row(m);
    std::copy(src.begin(), src.end(), codes.row(j).begin());
    active[j] = model.codebook.active[m];
    neutralized[j] = model.classes.neutralized[m];
    for (std::size_t c = 0; c < k; ++c) {
      w(c, j) = model.classes.weights(c, m);
      mask[c * kept.size() + j] = model.classes.logical_mask[c * model.concepts() + m];
    }
  }
  out.model.codebook.codes = std::move(codes);
  out.model.codebook.active = std::move(active);
  out.model.classes.weights = std::move(w);
  out.model.classes.logical_mask = std::move(mask);
  out.model.classes.neutralized = std::move(neutralized);
  out.report.codes_after = kept.size();
  return out;
}

/// Largest |logit difference| between the unpruned model (full support) and
/// the pruned one over the given samples.
inline double full_support_prune_delta(const FeatureDataset& ds, const HeadModel& before,
                                       const HeadModel& after, std::span<const std::size_t> samples) {
  HeadModel full_before = before;
  HeadModel full_after = after;
  full_before.softmax_support = SoftmaxSupport::All;
  full_after.softmax_support = SoftmaxSupport::All;
  double worst = 0.0;
  for (std::size_t s : samples) {
    const Tensor3 feat = ds.feature_map(s);
    const Vector a = forward(feat, full_before).logits;
    const Vector b = forward(feat, full_after).logits;
    for (std::size_t c = 0; c < a.size(); ++c) worst = std::max(worst, std::abs(a[c] - b[c]));
  }
  return worst;
}

/// Sets or clears the neutralization flag of concept m.
inline HeadModel neutralize(HeadModel model, std::size_t m, bool on) {
  if (m >= model.concepts()) {
    throw IndexError("neutralize: concept " + std::to_string(m) + " out of range (M=" +
                     std::to_string(model.concepts()) + ")");
  }
  model.classes.neutralized[m] = on ? 1 : 0;
  return model;
}

/// Post-prune fine-tuning: W and codes are trained together from the current
/// values; logical masks and neutralization are preserved.
inline Stage2Result finetune_after_prune(const HeadModel& model, const FeatureDataset& ds,
                                         TrainConfig cfg, const TrainHooks& hooks = {}) {
  cfg.trainable = Trainable::WeightsAndCodes;
  return train_head(ds, model, cfg, hooks);
}

}  // namespace protoquant

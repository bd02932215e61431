#pragma once

// Desk-scale versions of the codebook-size and sparsity studies, plus the
// matching score used to compare learned codes with planted concepts.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "featurestore.hpp"
#include "head.hpp"
#include "optim.hpp"
#include "pruning.hpp"

namespace protoquant {

struct MatchResult {
  double mean_cosine = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (code, concept)
  std::vector<double> cosines;
};

/// Greedy one-to-one matching: repeatedly take the most similar unmatched
/// (code, concept) pair. Ties go to the lowest code, then concept index.
inline MatchResult greedy_match(const Matrix& codes, const Matrix& concepts) {
  if (codes.cols() != concepts.cols()) throw ShapeError("greedy_match: dimension mismatch");
  struct Cand {
    double cos;
    std::size_t code;
    std::size_t concept_id;
  };
  std::vector<Cand> all;
  all.reserve(codes.rows() * concepts.rows());
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    for (std::size_t j = 0; j < concepts.rows(); ++j) {
      all.push_back({cosine_similarity(codes.row(i), concepts.row(j)), i, j});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Cand& a, const Cand& b) { return a.cos > b.cos; });
  std::vector<bool> used_code(codes.rows()), used_concept(concepts.rows());
  MatchResult out;
  for (const Cand& c : all) {
    if (used_code[c.code] || used_concept[c.concept_id]) continue;
    used_code[c.code] = used_concept[c.concept_id] = true;
    out.pairs.emplace_back(c.code, c.concept_id);
    out.cosines.push_back(c.cos);
  }
  if (!out.cosines.empty()) {
    double sum = 0.0;
    for (double v : out.cosines) sum += v;
    out.mean_cosine = sum / static_cast<double>(out.cosines.size());
  }
  return out;
}

struct AblationRow {
  std::size_t codes = 0;
  std::uint64_t seed = 0;
  double pretrained_acc = 0.0;
  double interpretable_acc = 0.0;
  double delta() const { return interpretable_acc - pretrained_acc; }
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << "M,seed,pretrained_acc,interpretable_acc,delta\n";
  for (const auto& r : rows) {
    out << r.codes << ',' << r.seed << ',' << r.pretrained_acc << ',' << r.interpretable_acc << ','
        << r.delta() << '\n';
  }
  return out.str();
}

/// Validation split used for reporting: the one stored in the dataset, or the
/// seeded stratified split when there is none.
inline std::vector<std::size_t> report_indices(const FeatureDataset& ds, std::uint64_t seed) {
  auto split = resolve_split(ds, seed);
  return split.validation.empty() ? all_indices(ds) : split.validation;
}

/// Both stages per (M, seed); accuracy is measured on the validation split.
inline std::vector<AblationRow> ablate_codebook(const FeatureDataset& ds, const std::vector<std::size_t>& sizes,
                                                const std::vector<std::uint64_t>& seeds, const TrainConfig& stage1,
                                                const TrainConfig& stage2) {
  std::vector<AblationRow> rows;
  for (std::size_t n_codes : sizes) {
    if (n_codes == 0) throw DomainError("ablate_codebook: codebook size must be positive");
    for (std::uint64_t seed : seeds) {
      TrainConfig c1 = stage1;
      TrainConfig c2 = stage2;
      c1.codebook_size = c2.codebook_size = n_codes;
      c1.seed = c2.seed = seed;
      const auto cb = stage1_train(ds, c1).codebook;
      const auto model = stage2_train(ds, cb, c2).model;
      const auto val = report_indices(ds, seed);
      AblationRow row;
      row.codes = n_codes;
      row.seed = seed;
      row.pretrained_acc = probe_accuracy(ds, val);
      row.interpretable_acc = head_accuracy(ds, model, val);
      rows.push_back(row);
    }
  }
  return rows;
}

struct SparsityRow {
  std::size_t k = 0;
  std::size_t codes_after = 0;
  double frozen_acc = 0.0;     // top-K mask, physical prune, no retraining
  double finetuned_acc = 0.0;  // same, then W and codes trained again
};

/// For each K: mask to the top-K weights per class, physically prune, score,
/// then finetune the pruned model and score again.
inline std::vector<SparsityRow> sparsity_sweep(const FeatureDataset& ds, const HeadModel& model,
                                               const std::vector<std::size_t>& ks, const TrainConfig& finetune) {
  const auto val = report_indices(ds, finetune.seed);
  std::vector<SparsityRow> rows;
  for (std::size_t top_k : ks) {
    const auto pruned = physical_prune(logical_prune_topk(model, top_k));
    SparsityRow row;
    row.k = top_k;
    row.codes_after = pruned.report.codes_after;
    row.frozen_acc = head_accuracy(ds, pruned.model, val);
    row.finetuned_acc = head_accuracy(ds, finetune_after_prune(pruned.model, ds, finetune).model, val);
    rows.push_back(row);
  }
  return rows;
}

inline std::string sparsity_csv(const std::vector<SparsityRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed << "K,codes,frozen_acc,finetuned_acc\n";
  for (const auto& r : rows) {
    out << r.k << ',' << r.codes_after << ',' << r.frozen_acc << ',' << r.finetuned_acc << '\n';
  }
  return out.str();
}

}  // namespace protoquant

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace protoquant;

namespace {

HeadModel tiny() {
  HeadModel m;
  m.codebook = Codebook(orthogonal_rows(4, 4, 2));
  m.classes = ClassMatrix(Matrix(2, 4, {0.9, 0.1, 0.5, 0.5, 0.0, 0.3, 0.2, 0.8}));
  return m;
}

std::vector<std::uint8_t> row_mask(const HeadModel& m, std::size_t c) {
  const std::size_t n = m.concepts();
  return {m.classes.logical_mask.begin() + static_cast<long>(c * n),
          m.classes.logical_mask.begin() + static_cast<long>((c + 1) * n)};
}

}  // namespace

TEST(TopK, KeepsLargestAndBreaksTiesByIndex) {
  const HeadModel m = logical_prune_topk(tiny(), 2);
  EXPECT_EQ(row_mask(m, 0), (std::vector<std::uint8_t>{1, 0, 1, 0}));
  EXPECT_EQ(row_mask(m, 1), (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_EQ(m.classes.weights, tiny().classes.weights);
}

TEST(TopK, ZeroIsRejected) { EXPECT_THROW(logical_prune_topk(tiny(), 0), DomainError); }

TEST(TopK, AtLeastMIsIdentity) {
  std::mt19937_64 gen(40);
  for (std::size_t k : {4u, 5u, 100u}) {
    const HeadModel m = logical_prune_topk(tiny(), k);
    EXPECT_EQ(m, tiny());
    EXPECT_TRUE(physical_prune(m).report.removed.empty());
  }
  for (int t = 0; t < 20; ++t) {
    const HeadModel m = oracle::random_model(gen, 3, 6, 4);
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
    EXPECT_EQ(forward(feat, logical_prune_topk(m, 6)).logits, forward(feat, m).logits);
  }
}

TEST(TopK, EachRowKeepsExactlyK) {
  std::mt19937_64 gen(41);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + gen() % 8, k = 1 + gen() % n;
    HeadModel m = oracle::random_model(gen, 3, n, 3);
    for (double& w : m.classes.weights.data()) w = static_cast<double>(gen() % 3);  // many ties
    const HeadModel p = logical_prune_topk(m, k);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto mask = row_mask(p, c);
      ASSERT_EQ(static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)), k);
      double min_kept = 1e9, max_dropped = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = m.classes.weights(c, j);
        if (mask[j]) {
          min_kept = std::min(min_kept, w);
        } else {
          max_dropped = std::max(max_dropped, w);
        }
      }
      ASSERT_GE(min_kept, max_dropped);
    }
  }
}

TEST(UnusedCodes, NeedsAKeptPositiveWeight) {
  HeadModel m = tiny();
  m.classes.logical_mask[0] = 0;  // class 0 drops code 0; class 1 has zero weight there
  m.classes.neutralized[1] = 1;   // neutralization is not removal
  EXPECT_EQ(unused_codes(m), (std::vector<std::size_t>{0}));
}

TEST(PhysicalPrune, RemapAndReport) {
  const HeadModel m = logical_prune_topk(tiny(), 1);  // keeps code 0 for class 0, code 3 for class 1
  const auto r = physical_prune(m);
  EXPECT_EQ(r.report.codes_before, 4u);
  EXPECT_EQ(r.report.codes_after, 2u);
  EXPECT_EQ(r.report.removed, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(r.remap, (std::map<std::size_t, std::size_t>{{0, 0}, {3, 1}}));
  EXPECT_EQ(r.model.concepts(), 2u);
  EXPECT_EQ(r.model.classes.weights, Matrix(2, 2, {0.9, 0.5, 0.0, 0.8}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(r.model.codebook.codes(1, c), m.codebook.codes(3, c));
  }
  EXPECT_NE(r.report.to_text().find("removed=1,2"), std::string::npos);
  EXPECT_NO_THROW(r.model.validate());
}

TEST(PhysicalPrune, IsIdempotent) {
  std::mt19937_64 gen(42);
  for (int t = 0; t < 30; ++t) {
    const HeadModel m = logical_prune_topk(oracle::random_model(gen, 3, 8, 4), 1 + gen() % 3);
    const auto once = physical_prune(m);
    const auto twice = physical_prune(once.model);
    EXPECT_EQ(twice.model, once.model);
    EXPECT_TRUE(twice.report.removed.empty());
  }
}

TEST(PhysicalPrune, AllCodesUnusedIsDegenerate) {
  HeadModel m = tiny();
  std::fill(m.classes.logical_mask.begin(), m.classes.logical_mask.end(), 0);
  EXPECT_THROW(physical_prune(m), DegenerateModelError);
}

TEST(PhysicalPrune, ExactUnderActiveSupport) {
  std::mt19937_64 gen(43);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + gen() % 8, k = 1 + gen() % 4;
    HeadModel m = oracle::random_model(gen, k, n, 2 + gen() % 6);
    m.softmax_support = SoftmaxSupport::Active;
    m = logical_prune_topk(m, 1 + gen() % 2);
    const HeadModel deactivated = deactivate_unused(m);
    const auto pruned = physical_prune(deactivated);
    for (int i = 0; i < 5; ++i) {
      const Tensor3 feat = oracle::random_feat(gen, 1 + gen() % 3, 1 + gen() % 3, m.dim());
      const Vector a = forward(feat, deactivated).logits;
      const Vector b = forward(feat, pruned.model).logits;
      for (std::size_t c = 0; c < k; ++c) ASSERT_LE(std::abs(a[c] - b[c]), 1e-12);
      // the pruned model predicts from kept codes only; remapped presence agrees too
      const auto sa = forward(feat, deactivated).activation.s;
      const auto sb = forward(feat, pruned.model).activation.s;
      for (const auto& [from, to] : pruned.remap) ASSERT_NEAR(sa[from], sb[to], 1e-12);
    }
  }
}

TEST(PhysicalPrune, FullSupportDeltaIsReported) {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.true_concepts = 6;
  cfg.concepts_per_class = 2;
  cfg.dim = 8;
  cfg.height = 2;
  cfg.width = 2;
  cfg.samples_per_class = 5;
  const auto syn = synth_generate(cfg);
  std::mt19937_64 gen(44);
  const HeadModel m = logical_prune_topk(oracle::random_model(gen, 3, 6, 8), 1);
  const auto pruned = physical_prune(m);
  const auto idx = all_indices(syn.dataset);
  const double delta = full_support_prune_delta(syn.dataset, m, pruned.model, idx);
  EXPECT_GT(delta, 0.0);
  EXPECT_EQ(full_support_prune_delta(syn.dataset, m, m, idx), 0.0);
}

TEST(Neutralize, RestoreIsBitIdentical) {
  std::mt19937_64 gen(45);
  for (int t = 0; t < 50; ++t) {
    const HeadModel m = oracle::random_model(gen, 3, 5, 4);
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
    const std::size_t j = gen() % 5;
    const HeadModel restored = neutralize(neutralize(m, j, true), j, false);
    EXPECT_EQ(restored, m);
    EXPECT_EQ(forward(feat, restored).logits, forward(feat, m).logits);
  }
}

TEST(Neutralize, LogitDeltaIsWeightTimesPresence) {
  std::mt19937_64 gen(46);
  for (int t = 0; t < 100; ++t) {
    HeadModel m = oracle::random_model(gen, 3, 5, 4);
    m.classes.logical_mask[gen() % 15] = 0;
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
    const std::size_t j = gen() % 5;
    const auto before = forward(feat, m);
    const Vector after = forward(feat, neutralize(m, j, true)).logits;
    for (std::size_t c = 0; c < 3; ++c) {
      ASSERT_NEAR(after[c] - before.logits[c], -m.classes.effective(c, j) * before.activation.s[j], 1e-12);
      ASSERT_LE(after[c], before.logits[c]);
    }
  }
}

TEST(Neutralize, ZeroColumnChangesNothing) {
  HeadModel m = tiny();
  m.classes.weights(0, 1) = 0.0;
  m.classes.weights(1, 1) = 0.0;
  const Tensor3 feat(1, 2, 4, {1, 0, 0, 0, 0, 1, 0, 0});
  EXPECT_EQ(forward(feat, neutralize(m, 1, true)).logits, forward(feat, m).logits);
  EXPECT_THROW(neutralize(m, 4, true), IndexError);
}

TEST(Finetune, MaskedEntriesStayDormant) {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.true_concepts = 6;
  cfg.concepts_per_class = 2;
  cfg.dim = 8;
  cfg.height = 3;
  cfg.width = 3;
  cfg.samples_per_class = 15;
  const auto syn = synth_generate(cfg);
  std::mt19937_64 gen(47);
  HeadModel m = logical_prune_topk(oracle::random_model(gen, 3, 6, 8), 2);
  m.classes.neutralized[0] = 1;
  const auto pruned = physical_prune(m).model;
  TrainConfig tc;
  tc.epochs = 3;
  tc.warmup_epochs = 1;
  tc.batch_size = 8;
  const auto res = finetune_after_prune(pruned, syn.dataset, tc);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < pruned.concepts(); ++j) {
      if (!pruned.classes.contributes(c, j)) EXPECT_EQ(res.model.classes.weights(c, j), pruned.classes.weights(c, j));
    }
  }
  EXPECT_EQ(res.model.classes.logical_mask, pruned.classes.logical_mask);
  EXPECT_EQ(res.model.classes.neutralized, pruned.classes.neutralized);
  EXPECT_NE(res.model.codebook.codes, pruned.codebook.codes);
}

#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "oracles.hpp"

using namespace protoquant;

namespace {

HeadModel make_model(Matrix codes, Matrix w, double alpha = 0.1) {
  HeadModel m;
  m.codebook = Codebook(std::move(codes));
  m.classes = ClassMatrix(std::move(w));
  m.alpha = alpha;
  return m;
}

// Random upstream gradient; the scalar objective is sum_c r_c * logit_c,
// evaluated by the long double oracle.
long double objective(const Tensor3& feat, const HeadModel& model, const Vector& r) {
  const auto logits =
      oracle::logits_ld(feat, model.codebook.codes, model.classes.effective_weights(), model.alpha);
  long double total = 0.0;
  for (std::size_t c = 0; c < r.size(); ++c) total += r[c] * logits[c];
  return total;
}

bool argmax_stable(const Tensor3& feat, const HeadModel& model, double& slot, double h) {
  const auto base = forward(feat, model).activation.argmax_loc;
  const double saved = slot;
  bool same = true;
  for (double step : {h, -h}) {
    slot = saved + step;
    same = same && forward(feat, model).activation.argmax_loc == base;
  }
  slot = saved;
  return same;
}

}  // namespace

TEST(ConceptMatch, SingleCodeIsCertain) {
  std::mt19937_64 gen(20);
  const HeadModel model = make_model(Matrix(1, 3, {0.3, -1.0, 2.0}), Matrix(2, 1, {1.0, 0.5}));
  const auto out = forward(oracle::random_feat(gen, 3, 2, 3), model);
  for (double p : out.activation.p) EXPECT_EQ(p, 1.0);
  EXPECT_EQ(out.activation.s[0], 1.0);
  EXPECT_EQ(out.logits, (Vector{1.0, 0.5}));
}

TEST(ConceptMatch, TwoAxisExample) {
  const HeadModel model = make_model(Matrix(2, 2, {1, 0, 0, 1}), Matrix(1, 2, {1, 1}));
  const auto act = concept_match(Tensor3(1, 1, 2, {1.0, 0.0}), model);
  EXPECT_NEAR(act.p[0], 0.9999546, 1e-7);
  EXPECT_NEAR(act.p[1], 0.0000454, 1e-7);
}

TEST(ConceptMatch, HugeTemperatureFlattens) {
  const HeadModel model = make_model(Matrix(2, 2, {1, 0, 0, 1}), Matrix(1, 2, {1, 1}), 1e6);
  const auto act = concept_match(Tensor3(1, 1, 2, {1.0, 0.0}), model);
  EXPECT_LT(std::abs(act.p[0] - 0.5), 1e-6);
  EXPECT_GT(act.p[0], act.p[1]);
}

TEST(ConceptMatch, ActiveSupportExcludesInactiveCodes) {
  std::mt19937_64 gen(21);
  HeadModel model = oracle::random_model(gen, 2, 5, 4);
  model.codebook.active[1] = 0;
  model.codebook.active[3] = 0;
  model.softmax_support = SoftmaxSupport::Active;
  const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
  const auto act = concept_match(feat, model);

  // oracle restricted to the active rows
  Matrix sub(3, 4);
  const std::vector<std::size_t> keep{0, 2, 4};
  for (std::size_t i = 0; i < 3; ++i) {
    std::copy(model.codebook.codes.row(keep[i]).begin(), model.codebook.codes.row(keep[i]).end(),
              sub.row(i).begin());
  }
  const auto ref = oracle::forward(feat, sub, Matrix(1, 3), 0.1);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(act.prob(l, 1), 0.0);
    EXPECT_EQ(act.prob(l, 3), 0.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(act.prob(l, keep[i]), ref.p[l][i], 1e-12);
  }

  model.softmax_support = SoftmaxSupport::All;
  const auto full = concept_match(feat, model);
  EXPECT_GT(full.prob(0, 1), 0.0);

  model.softmax_support = SoftmaxSupport::Active;
  std::fill(model.codebook.active.begin(), model.codebook.active.end(), 0);
  EXPECT_THROW(concept_match(feat, model), EmptyCodebookError);
}

TEST(ConceptMatch, DimensionMismatchThrows) {
  const HeadModel model = make_model(Matrix(2, 2, {1, 0, 0, 1}), Matrix(1, 2, {1, 1}));
  EXPECT_THROW(concept_match(Tensor3(1, 1, 3), model), ShapeError);
}

TEST(Aggregate, MaxPoolWithFirstLocationOnTies) {
  ConceptActivation act;
  act.height = 2;
  act.width = 2;
  act.concepts = 2;
  act.p = {0.2, 0.8, 0.7, 0.3, 0.7, 0.3, 0.1, 0.9};
  const Presence pr = aggregate(act);
  EXPECT_EQ(pr.s, (Vector{0.7, 0.9}));
  EXPECT_EQ(pr.argmax_loc, (std::vector<std::size_t>{1, 3}));
}

TEST(ClassLogits, WorkedExample) {
  const HeadModel model = make_model(Matrix(2, 2, {1, 0, 0, 1}), Matrix(2, 2, {1.0, 0.0, 0.0, 2.0}));
  EXPECT_EQ(class_logits(Vector{0.5, 0.25}, model), (Vector{0.5, 0.5}));
  EXPECT_EQ(predict(Vector{0.5, 0.5}), 0u);
  EXPECT_THROW(class_logits(Vector{0.5}, model), ShapeError);
}

TEST(ClassLogits, AllNeutralizedGivesZeroLogits) {
  std::mt19937_64 gen(22);
  HeadModel model = oracle::random_model(gen, 3, 4, 5);
  std::fill(model.classes.neutralized.begin(), model.classes.neutralized.end(), 1);
  const auto out = forward(oracle::random_feat(gen, 2, 3, 5), model);
  for (double v : out.logits) EXPECT_EQ(v, 0.0);
}

TEST(Forward, MatchesBruteForceWithMasks) {
  std::mt19937_64 gen(23);
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 1 + gen() % 4, n_codes = 1 + gen() % 6, d = 2 + gen() % 5;
    HeadModel model = oracle::random_model(gen, k, n_codes, d, t % 2 ? 0.1 : 0.5);
    for (auto& bit : model.classes.logical_mask) bit = gen() % 3 != 0;
    for (auto& bit : model.classes.neutralized) bit = gen() % 5 == 0;
    const Tensor3 feat = oracle::random_feat(gen, 1 + gen() % 3, 1 + gen() % 3, d);

    Matrix w_eff(k, n_codes);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t m = 0; m < n_codes; ++m) {
        const bool live = model.classes.logical_mask[c * n_codes + m] && !model.classes.neutralized[m];
        w_eff(c, m) = live ? model.classes.weights(c, m) : 0.0;
      }
    }
    const auto ref = oracle::forward(feat, model.codebook.codes, w_eff, model.alpha);
    const auto out = forward(feat, model);
    for (std::size_t m = 0; m < n_codes; ++m) ASSERT_NEAR(out.activation.s[m], ref.s[m], 1e-12);
    for (std::size_t c = 0; c < k; ++c) ASSERT_NEAR(out.logits[c], ref.logits[c], 1e-12);
    ASSERT_EQ(out.activation.argmax_loc, ref.where);
  }
}

TEST(Forward, IndicatorModelClassifiesCleanSynth) {
  SynthConfig cfg;
  cfg.classes = 5;
  cfg.true_concepts = 20;
  cfg.samples_per_class = 20;
  cfg.noise_sigma = 0.0;
  cfg.seed = 7;
  const SynthResult syn = synth_generate(cfg);
  Matrix w(cfg.classes, cfg.true_concepts);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (std::size_t m : syn.class_concepts[c]) w(c, m) = 1.0;
  }
  const HeadModel model = make_model(syn.ground_truth, w);
  EXPECT_EQ(head_accuracy(syn.dataset, model, all_indices(syn.dataset)), 100.0);
}

TEST(Forward, CodePermutationOnlyPermutesScores) {
  std::mt19937_64 gen(24);
  for (int t = 0; t < 50; ++t) {
    const HeadModel model = oracle::random_model(gen, 3, 5, 4);
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    Matrix codes(5, 4), w(3, 5);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto src = model.codebook.codes.row(perm[i]);
      std::copy(src.begin(), src.end(), codes.row(i).begin());
      for (std::size_t c = 0; c < 3; ++c) w(c, i) = model.classes.weights(c, perm[i]);
    }
    const HeadModel permuted = make_model(codes, w);
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
    const auto a = forward(feat, model);
    const auto b = forward(feat, permuted);
    for (std::size_t i = 0; i < 5; ++i) ASSERT_NEAR(b.activation.s[i], a.activation.s[perm[i]], 1e-14);
    for (std::size_t c = 0; c < 3; ++c) ASSERT_NEAR(a.logits[c], b.logits[c], 1e-12);
  }
}

TEST(Backward, WeightGradientMatchesCentralDifferences) {
  std::mt19937_64 gen(25);
  for (int t = 0; t < 50; ++t) {
    HeadModel model = oracle::random_model(gen, 3, 5, 6);
    model.classes.logical_mask[gen() % 15] = 0;
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 6);
    const Vector r = oracle::row(oracle::random_matrix(gen, 1, 3), 0);
    const auto trace = forward(feat, model).activation;
    const auto g = head_backward(feat, model, trace, r);
    for (std::size_t i = 0; i < model.classes.weights.size(); ++i) {
      double& slot = model.classes.weights.data()[i];
      const double fd = oracle::central_difference_ld([&] { return objective(feat, model, r); }, slot, 1e-6);
      ASSERT_LE(oracle::rel_error(g.weights.data()[i], fd), 1e-6) << "instance " << t << " entry " << i;
    }
  }
}

TEST(Backward, CodeGradientMatchesCentralDifferences) {
  std::mt19937_64 gen(26);
  int checked = 0;
  for (int t = 0; t < 60; ++t) {
    HeadModel model = oracle::random_model(gen, 3, 5, 8, t % 2 ? 0.1 : 0.7);
    const Tensor3 feat = oracle::random_feat(gen, 2, 2, 8);
    const Vector r = oracle::row(oracle::random_matrix(gen, 1, 3), 0);
    const auto trace = forward(feat, model).activation;
    const auto g = head_backward(feat, model, trace, r);
    bool stable = true;
    for (std::size_t i = 0; i < model.codebook.codes.size() && stable; ++i) {
      stable = argmax_stable(feat, model, model.codebook.codes.data()[i], 1e-6);
    }
    if (!stable) continue;
    for (std::size_t i = 0; i < model.codebook.codes.size(); ++i) {
      double& slot = model.codebook.codes.data()[i];
      const double fd = oracle::central_difference_ld([&] { return objective(feat, model, r); }, slot, 1e-6);
      ASSERT_LE(oracle::rel_error(g.codes.data()[i], fd), 1e-5) << "instance " << t << " entry " << i;
    }
    ++checked;
  }
  EXPECT_GE(checked, 50);
}

TEST(Backward, MaskedAndNeutralizedWeightsGetNoGradient) {
  std::mt19937_64 gen(27);
  HeadModel model = oracle::random_model(gen, 2, 3, 4);
  model.classes.logical_mask[1] = 0;
  model.classes.neutralized[2] = 1;
  const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
  const auto g = head_backward(feat, model, forward(feat, model).activation, Vector{1.0, -1.0});
  EXPECT_EQ(g.weights(0, 1), 0.0);
  EXPECT_EQ(g.weights(0, 2), 0.0);
  EXPECT_EQ(g.weights(1, 2), 0.0);
  EXPECT_NE(g.weights(0, 0), 0.0);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 gen(28);
  const HeadModel model = oracle::random_model(gen, 3, 4, 5);
  const Tensor3 feat = oracle::random_feat(gen, 2, 2, 5);
  const auto g = head_backward(feat, model, forward(feat, model).activation, Vector(3, 0.0));
  for (double v : g.weights.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.codes.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RequiresMatchingTrace) {
  std::mt19937_64 gen(29);
  const HeadModel model = oracle::random_model(gen, 2, 3, 4);
  const Tensor3 feat = oracle::random_feat(gen, 2, 2, 4);
  EXPECT_THROW(head_backward(feat, model, ConceptActivation{}, Vector{1.0, 0.0}), StateError);
  // match-only trace has no pooled scores
  EXPECT_THROW(head_backward(feat, model, concept_match(feat, model), Vector{1.0, 0.0}), StateError);
  const auto trace = forward(feat, model).activation;
  EXPECT_THROW(head_backward(oracle::random_feat(gen, 3, 2, 4), model, trace, Vector{1.0, 0.0}), StateError);
  EXPECT_THROW(head_backward(feat, model, trace, Vector{1.0}), ShapeError);
}

TEST(HeadModel, ValidateChecksShapesAndSigns) {
  HeadModel model = make_model(Matrix(2, 2, {1, 0, 0, 1}), Matrix(1, 2, {1, 1}));
  EXPECT_NO_THROW(model.validate());
  model.classes.weights(0, 1) = -0.1;
  EXPECT_THROW(model.validate(), DomainError);
  model.classes = ClassMatrix(Matrix(1, 3));
  EXPECT_THROW(model.validate(), ShapeError);
}

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace protoquant;

namespace {

FeatureDataset random_store(std::mt19937_64& gen, std::size_t n, std::size_t h, std::size_t w, std::size_t d,
                            std::size_t classes) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  FeatureDataset ds;
  ds.n_samples = n;
  ds.dim = d;
  ds.height = h;
  ds.width = w;
  ds.classes = classes;
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::int32_t>(i % classes));
  ds.features.resize(n * h * w * d);
  for (float& v : ds.features) v = nd(gen);
  return ds;
}

}  // namespace

TEST(NearestPatches, VerbatimCodeRanksFirst) {
  std::mt19937_64 gen(70);
  FeatureDataset store = random_store(gen, 6, 2, 2, 4, 2);
  HeadModel model;
  model.codebook = Codebook(Matrix(2, 4, {0.5, -0.25, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0}));
  model.classes = ClassMatrix(Matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  // plant code 0 at sample 4, location 3
  for (std::size_t c = 0; c < 4; ++c) store.features[(4 * 4 + 3) * 4 + c] = static_cast<float>(model.codebook.codes(0, c));
  const auto top = nearest_patches(model, store, 0, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].sample, 4u);
  EXPECT_EQ(top[0].location, 3u);
  EXPECT_NEAR(top[0].similarity, 1.0, 1e-15);
  EXPECT_GE(top[0].similarity, top[1].similarity);
  EXPECT_GE(top[1].similarity, top[2].similarity);
}

TEST(NearestPatches, RequestBeyondStoreReturnsEverything) {
  std::mt19937_64 gen(71);
  const FeatureDataset store = random_store(gen, 3, 2, 3, 5, 2);
  const HeadModel model = oracle::random_model(gen, 2, 3, 5);
  EXPECT_EQ(nearest_patches(model, store, 1, 1000).size(), 18u);
}

TEST(NearestPatches, MatchesExhaustiveOracle) {
  std::mt19937_64 gen(72);
  for (int t = 0; t < 30; ++t) {
    FeatureDataset store = random_store(gen, 2 + gen() % 5, 2, 2, 3, 2);
    // duplicate a location so there is an exact tie to break
    std::copy_n(store.features.begin(), 3, store.features.begin() + 3 * (store.n_samples * 4 - 1));
    const HeadModel model = oracle::random_model(gen, 2, 4, 3);
    const std::size_t m = gen() % 4, n = 1 + gen() % 10;
    const auto got = nearest_patches(model, store, m, n);

    std::vector<PatchMatch> all;
    for (std::size_t s = 0; s < store.n_samples; ++s) {
      for (std::size_t l = 0; l < 4; ++l) {
        auto raw = store.location(s, l);
        all.push_back({s, l, oracle::cosine({raw.begin(), raw.end()}, oracle::row(model.codebook.codes, m))});
      }
    }
    // selection: repeatedly take the best remaining, first index on ties
    std::vector<PatchMatch> expect;
    std::vector<bool> taken(all.size());
    for (std::size_t r = 0; r < std::min(n, all.size()); ++r) {
      std::size_t best = SIZE_MAX;
      for (std::size_t i = 0; i < all.size(); ++i) {
        if (!taken[i] && (best == SIZE_MAX || all[i].similarity > all[best].similarity + 1e-13)) best = i;
      }
      taken[best] = true;
      expect.push_back(all[best]);
    }
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      ASSERT_EQ(got[i].sample, expect[i].sample) << t << ' ' << i;
      ASSERT_EQ(got[i].location, expect[i].location);
      ASSERT_NEAR(got[i].similarity, expect[i].similarity, 1e-12);
    }
  }
}

TEST(NearestPatches, Errors) {
  std::mt19937_64 gen(73);
  const FeatureDataset store = random_store(gen, 2, 2, 2, 3, 2);
  const HeadModel model = oracle::random_model(gen, 2, 4, 3);
  EXPECT_THROW(nearest_patches(model, store, 4, 1), IndexError);
  EXPECT_THROW(nearest_patches(oracle::random_model(gen, 2, 4, 5), store, 0, 1), ShapeError);
  EXPECT_THROW(nearest_patches(model, FeatureDataset{}, 0, 1), DomainError);
}

TEST(Explain, ContributionsDecomposeTheLogit) {
  std::mt19937_64 gen(74);
  for (int t = 0; t < 50; ++t) {
    const FeatureDataset store = random_store(gen, 4, 2, 3, 4, 3);
    HeadModel model = oracle::random_model(gen, 3, 6, 4);
    model.classes.logical_mask[gen() % 18] = 0;
    model.classes.neutralized[gen() % 6] = 1;
    const std::size_t sample = gen() % 4, top_n = gen() % 8;
    const auto ex = explain_sample(model, store, sample, top_n, 2);
    const auto ref = forward(store.feature_map(sample), model);
    EXPECT_EQ(ex.logits, ref.logits);
    EXPECT_EQ(ex.predicted, predict(ref.logits));
    EXPECT_EQ(ex.label, sample % 3);
    ASSERT_EQ(ex.top.size(), std::min<std::size_t>(top_n, 6));

    double all = 0.0, listed = 0.0;
    for (double c : ex.contributions) all += c;
    for (const auto& ce : ex.top) {
      listed += ce.contribution;
      EXPECT_EQ(ce.contribution, model.classes.effective(ex.predicted, ce.concept_id) * ce.presence);
      EXPECT_EQ(ce.presence, ref.activation.s[ce.concept_id]);
      EXPECT_EQ(ce.activation_map[ce.location], ce.presence);
      EXPECT_EQ(ce.patches.size(), 2u);
    }
    EXPECT_NEAR(all, ex.logits[ex.predicted], 1e-9);
    EXPECT_NEAR(listed + ex.remainder, ex.logits[ex.predicted], 1e-9);
    for (std::size_t i = 1; i < ex.top.size(); ++i) EXPECT_GE(ex.top[i - 1].contribution, ex.top[i].contribution);
  }
}

TEST(Explain, SampleOutOfRange) {
  std::mt19937_64 gen(75);
  const FeatureDataset store = random_store(gen, 2, 2, 2, 3, 2);
  EXPECT_THROW(explain_sample(oracle::random_model(gen, 2, 4, 3), store, 2, 3), IndexError);
}

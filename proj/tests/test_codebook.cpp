#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "protoquant/codebook.hpp"

using namespace protoquant;

namespace {

Codebook unit_axes() { return Codebook(Matrix(2, 2, {1.0, 0.0, 0.0, 1.0})); }

std::size_t oracle_assign(const std::vector<double>& z, const Matrix& codes) {
  std::size_t best = 0;
  for (std::size_t m = 1; m < codes.rows(); ++m) {
    if (oracle::cosine(z, oracle::row(codes, m)) > oracle::cosine(z, oracle::row(codes, best))) best = m;
  }
  return best;
}

std::vector<Vector> random_positions(std::mt19937_64& gen, std::size_t n, std::size_t d) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Vector> out(n, Vector(d));
  for (auto& z : out) {
    for (auto& v : z) v = nd(gen);
  }
  return out;
}

}  // namespace

TEST(Assign, ExactMatch) {
  const Codebook cb(Matrix(3, 2, {1.0, 0.0, 0.0, 1.0, -1.0, -1.0}));
  EXPECT_EQ(assign(Vector{-1.0, -1.0}, cb), 2u);
}

TEST(Assign, CosineDecides) {
  EXPECT_EQ(assign(Vector{0.9, 0.1}, unit_axes()), 0u);
}

TEST(Assign, TieGoesToLowestIndex) {
  const double h = 1.0 / std::sqrt(2.0);
  EXPECT_EQ(assign(Vector{h, h}, unit_axes()), 0u);
}

TEST(Assign, SkipsInactiveAndFailsWhenNoneActive) {
  Codebook cb = unit_axes();
  cb.active[0] = 0;
  EXPECT_EQ(assign(Vector{0.9, 0.1}, cb), 1u);
  cb.active[1] = 0;
  EXPECT_THROW(assign(Vector{0.9, 0.1}, cb), EmptyCodebookError);
}

TEST(Assign, ScaleInvariantAndMatchesOracle) {
  std::mt19937_64 gen(12);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  const auto codes = random_positions(gen, 6, 5);
  Matrix m(6, 5);
  for (std::size_t r = 0; r < 6; ++r) std::copy(codes[r].begin(), codes[r].end(), m.row(r).begin());
  const Codebook cb(m);
  for (const Vector& z : random_positions(gen, 2000, 5)) {
    const std::size_t k = assign(z, cb);
    ASSERT_EQ(k, oracle_assign(z, m));
    Vector scaled = z;
    const double s = scale(gen);
    for (auto& v : scaled) v *= s;
    ASSERT_EQ(assign(scaled, cb), k);
  }
}

TEST(Codebook, RejectsZeroCodes) {
  EXPECT_THROW(Codebook(Matrix(2, 2, {1.0, 0.0, 0.0, 0.0})), DomainError);
}

TEST(Quantize, SingleLocationReducesToAssign) {
  Tensor3 f(1, 1, 2, {0.2, 0.9});
  const auto q = quantize_map(f, unit_axes());
  EXPECT_EQ(q.indices, std::vector<std::size_t>{1});
  EXPECT_EQ(q.quantized.at(0)[1], 1.0);
}

TEST(Quantize, TiledCodesGiveTilingPattern) {
  const Codebook cb(Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Tensor3 f(2, 3, 3);
  const std::vector<std::size_t> pattern{0, 1, 2, 2, 1, 0};
  for (std::size_t l = 0; l < 6; ++l) {
    auto code = cb.codes.row(pattern[l]);
    std::copy(code.begin(), code.end(), f.at(l).begin());
  }
  const auto q = quantize_map(f, cb);
  EXPECT_EQ(q.indices, pattern);
  EXPECT_EQ(q.quantized.data().size(), f.data().size());
  for (std::size_t i = 0; i < f.data().size(); ++i) EXPECT_EQ(q.quantized.data()[i], f.data()[i]);
}

TEST(Quantize, RandomMatchesBruteForce) {
  std::mt19937_64 gen(13);
  for (int t = 0; t < 200; ++t) {
    const Matrix codes = oracle::random_matrix(gen, 3, 4);
    const Codebook cb(codes);
    const Tensor3 f = oracle::random_feat(gen, 2, 2, 4);
    const auto q = quantize_map(f, cb);
    for (std::size_t l = 0; l < 4; ++l) ASSERT_EQ(q.indices[l], oracle_assign(oracle::loc(f, l), codes));
  }
}

TEST(Loss, ZeroWhenPositionsAreCodes) {
  const Codebook cb = unit_axes();
  const std::vector<Vector> pos{{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
  EXPECT_EQ(codebook_loss(pos, cb), 0.0);
  const Matrix g = codebook_grad(pos, cb);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, SinglePosition) {
  const Codebook cb(Matrix(2, 2, {0.5, 0.0, 0.0, 1.0}));
  const std::vector<Vector> pos{{1.0, 0.0}};
  EXPECT_DOUBLE_EQ(codebook_loss(pos, cb), 0.25);
  const Matrix g = codebook_grad(pos, cb);
  EXPECT_DOUBLE_EQ(g(0, 0), 2.0 * (0.5 - 1.0));
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_EQ(g(1, 0), 0.0);
  EXPECT_EQ(g(1, 1), 0.0);
}

TEST(Loss, EmptyBatchThrows) {
  EXPECT_THROW(codebook_loss(std::vector<Vector>{}, unit_axes()), DomainError);
  EXPECT_THROW(codebook_grad(std::vector<Vector>{}, unit_axes()), DomainError);
}

TEST(Loss, MatchesNaiveSum) {
  std::mt19937_64 gen(14);
  for (int t = 0; t < 100; ++t) {
    const Matrix codes = oracle::random_matrix(gen, 4, 3);
    const auto pos = random_positions(gen, 25, 3);
    long double total = 0;
    for (const auto& z : pos) {
      const std::size_t k = oracle_assign(z, codes);
      for (std::size_t c = 0; c < 3; ++c) total += (z[c] - codes(k, c)) * (long double)(z[c] - codes(k, c));
    }
    ASSERT_NEAR(codebook_loss(pos, Codebook(codes)), static_cast<double>(total / 25), 1e-12);
  }
}

TEST(Grad, MatchesCentralDifferences) {
  std::mt19937_64 gen(15);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    Matrix codes = oracle::random_matrix(gen, 4, 3);
    const auto pos = random_positions(gen, 20, 3);
    const Matrix g = codebook_grad(pos, Codebook(codes));
    const std::size_t idx = gen() % codes.size();
    // skip probes that flip an assignment
    std::vector<std::size_t> base;
    for (const auto& z : pos) base.push_back(oracle_assign(z, codes));
    bool flips = false;
    for (double h : {1e-6, -1e-6}) {
      Matrix moved = codes;
      moved.data()[idx] += h;
      for (std::size_t i = 0; i < pos.size(); ++i) flips = flips || oracle_assign(pos[i], moved) != base[i];
    }
    if (flips) continue;
    double& slot = codes.data()[idx];
    const double fd = oracle::central_difference([&] { return codebook_loss(pos, Codebook(codes)); }, slot, 1e-6);
    ASSERT_LE(oracle::rel_error(g.data()[idx], fd, 1e-6), 1e-6) << "instance " << t;
    ++checked;
  }
  EXPECT_GT(checked, 80);
}

TEST(Grad, UnassignedRowsAreZero) {
  const Codebook cb(Matrix(3, 2, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0}));
  const std::vector<Vector> pos{{0.7, 0.1}, {0.9, -0.2}};
  const auto r = codebook_grad_over(pos, pos.size(), cb);
  EXPECT_EQ(r.counts, (std::vector<std::size_t>{2, 0, 0}));
  for (std::size_t m = 1; m < 3; ++m) {
    for (double v : r.grad.row(m)) EXPECT_EQ(v, 0.0);
  }
}

// Gradient descent on the codebook loss settles where every used code is the
// mean of its members, the same fixed point as cosine-assign / mean-update
// clustering started from the same codes.
TEST(Grad, DescentReachesClusteringFixedPoint) {
  std::mt19937_64 gen(16);
  int agreed = 0;
  for (int t = 0; t < 40; ++t) {
    const std::size_t n_codes = 2 + gen() % 4;
    const std::size_t n = 10 + gen() % 41;
    const auto pos = random_positions(gen, n, 3);
    Matrix init = oracle::random_matrix(gen, n_codes, 3);

    // reference clustering
    Matrix ref = init;
    std::vector<std::size_t> ref_assign(n, SIZE_MAX);
    for (int it = 0; it < 500; ++it) {
      std::vector<std::size_t> a(n);
      for (std::size_t i = 0; i < n; ++i) a[i] = oracle_assign(pos[i], ref);
      if (a == ref_assign) break;
      ref_assign = a;
      for (std::size_t m = 0; m < n_codes; ++m) {
        std::vector<long double> sum(3, 0);
        int cnt = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (a[i] != m) continue;
          ++cnt;
          for (std::size_t c = 0; c < 3; ++c) sum[c] += pos[i][c];
        }
        if (cnt == 0) continue;
        for (std::size_t c = 0; c < 3; ++c) ref(m, c) = static_cast<double>(sum[c] / cnt);
      }
    }

    // gradient descent with assignments frozen per phase: each phase descends
    // on every cluster separately, with only its own code active
    Matrix codes = init;
    for (int phase = 0; phase < 500; ++phase) {
      std::vector<std::size_t> a(n);
      for (std::size_t i = 0; i < n; ++i) a[i] = assign(pos[i], Codebook(codes));
      for (std::size_t m = 0; m < n_codes; ++m) {
        std::vector<Vector> members;
        for (std::size_t i = 0; i < n; ++i) {
          if (a[i] == m) members.push_back(pos[i]);
        }
        if (members.empty()) continue;
        for (int step = 0; step < 200; ++step) {
          Codebook only(codes);
          std::fill(only.active.begin(), only.active.end(), 0);
          only.active[m] = 1;
          const Matrix g = codebook_grad(members, only);
          for (std::size_t c = 0; c < 3; ++c) codes(m, c) -= 0.25 * g(m, c);
        }
      }
      std::vector<std::size_t> after(n);
      for (std::size_t i = 0; i < n; ++i) after[i] = assign(pos[i], Codebook(codes));
      if (after == a) break;
    }
    // every used code is the mean of its members
    std::vector<std::size_t> final_assign(n);
    for (std::size_t i = 0; i < n; ++i) final_assign[i] = oracle_assign(pos[i], codes);
    for (std::size_t m = 0; m < n_codes; ++m) {
      std::vector<long double> sum(3, 0);
      int cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (final_assign[i] != m) continue;
        ++cnt;
        for (std::size_t c = 0; c < 3; ++c) sum[c] += pos[i][c];
      }
      if (cnt == 0) continue;
      for (std::size_t c = 0; c < 3; ++c) ASSERT_NEAR(codes(m, c), static_cast<double>(sum[c] / cnt), 1e-6);
    }
    if (final_assign == ref_assign) {
      ++agreed;
      for (std::size_t e = 0; e < codes.size(); ++e) ASSERT_NEAR(codes.data()[e], ref.data()[e], 1e-6);
    }
  }
  EXPECT_GE(agreed, 38);
}

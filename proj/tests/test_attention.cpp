#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "spade/attention.hpp"

using namespace spade;
using oracle::random_tensor;

namespace {

AttentionParams<double> random_params(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  return init_attention<double>(d, heads, rng);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs_diff(const Tensor<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Pattern, MaskDefinitions) {
  const std::size_t L = 11;
  for (bool causal : {false, true}) {
    const auto win = LocalityPattern::windowed(2, causal);
    const auto chunk = LocalityPattern::chunked(3, causal);
    const auto full = LocalityPattern::full(causal);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) {
        const bool past = !causal || j <= i;
        const long diff = static_cast<long>(i) - static_cast<long>(j);
        EXPECT_EQ(win.allows(i, j, L), std::abs(diff) <= 2 && past);
        EXPECT_EQ(chunk.allows(i, j, L), i / 3 == j / 3 && past);
        EXPECT_EQ(full.allows(i, j, L), past);
      }
      EXPECT_TRUE(win.allows(i, i, L));
      EXPECT_TRUE(chunk.allows(i, i, L));
    }
  }
}

TEST(Pattern, InvalidSizesAndNames) {
  EXPECT_THROW(LocalityPattern::windowed(0, false).validate(), ConfigError);
  EXPECT_THROW(LocalityPattern::chunked(0, true).validate(), ConfigError);
  EXPECT_EQ(parse_pattern_kind("chunk"), PatternKind::chunk);
  EXPECT_THROW(parse_pattern_kind("sparse"), ConfigError);
  std::mt19937_64 rng(1);
  EXPECT_THROW(init_attention<double>(6, 4, rng), ConfigError);
}

TEST(FullAttention, SingleTokenPassesValueThrough) {
  std::mt19937_64 rng(2);
  auto p = random_params(4, 2, rng);
  auto x = random_tensor<double>({1, 4}, rng);
  auto y = full_attention(x, p, false);
  auto expected = matmul(matmul(x, p.Wv), p.Wo);
  EXPECT_LE(max_abs_diff(y, expected), 1e-14);
  auto w = attention_weights(matmul(x, p.Wq), matmul(x, p.Wk), LocalityPattern::full(false), 2, 1);
  EXPECT_EQ(w[0], 1.0);
}

TEST(FullAttention, ZeroQueryKeyGivesMeans) {
  std::mt19937_64 rng(3);
  const std::size_t L = 5, d = 4;
  auto p = random_params(d, 2, rng);
  p.Wq = Tensor<double>({d, d});
  p.Wk = Tensor<double>({d, d});
  auto x = random_tensor<double>({L, d}, rng);
  auto v = matmul(x, p.Wv);
  for (bool causal : {false, true}) {
    Tensor<double> ctx({L, d});
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t n = causal ? i + 1 : L;
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += v(j, c);
        ctx(i, c) = s / static_cast<double>(n);
      }
    }
    EXPECT_LE(max_abs_diff(full_attention(x, p, causal), matmul(ctx, p.Wo)), 1e-12) << causal;
  }
}

TEST(FullAttention, MatchesBruteForce) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({6, 4}, rng);
  for (std::size_t heads : {1u, 2u}) {
    auto p = random_params(4, heads, rng);
    for (bool causal : {false, true}) {
      const auto pattern = LocalityPattern::full(causal);
      EXPECT_LE(max_abs_diff(full_attention(x, p, causal), oracle::brute_force_attention(x, p, pattern)), 1e-6);
    }
  }
}

// Reference vs brute force, and both fast paths vs reference, on the grid.
TEST(FastPaths, MatchReferenceOnGrid) {
  std::mt19937_64 rng(5);
  const std::size_t d = 8;
  auto p = random_params(d, 2, rng);
  for (std::size_t L : {1u, 7u, 64u, 257u}) {
    auto x = random_tensor<double>({L, d}, rng);
    for (std::size_t size : {1u, 8u, 128u}) {
      for (bool causal : {false, true}) {
        const auto win = LocalityPattern::windowed(size, causal);
        const auto chunk = LocalityPattern::chunked(size, causal);
        const auto ref_w = masked_attention(x, p, win);
        const auto ref_c = masked_attention(x, p, chunk);
        EXPECT_LE(max_abs_diff(window_attention_fast(x, p, size, causal), ref_w), 1e-5)
            << "window L=" << L << " w=" << size << " causal=" << causal;
        EXPECT_LE(max_abs_diff(chunk_attention_fast(x, p, size, causal), ref_c), 1e-5)
            << "chunk L=" << L << " c=" << size << " causal=" << causal;
        if (L <= 64) {
          EXPECT_LE(max_abs_diff(ref_w, oracle::brute_force_attention(x, p, win)), 1e-5);
          EXPECT_LE(max_abs_diff(ref_c, oracle::brute_force_attention(x, p, chunk)), 1e-5);
        }
      }
    }
  }
}

TEST(FastPaths, RaggedLastChunk) {
  std::mt19937_64 rng(6);
  auto p = random_params(8, 2, rng);
  auto x = random_tensor<double>({100, 8}, rng);
  for (bool causal : {false, true}) {
    EXPECT_LE(max_abs_diff(chunk_attention_fast(x, p, 16, causal), masked_attention(x, p, LocalityPattern::chunked(16, causal))),
              1e-5);
    EXPECT_LE(max_abs_diff(window_attention_fast(x, p, 8, causal),
                           masked_attention(x, p, LocalityPattern::windowed(8, causal))),
              1e-5);
  }
}

TEST(FastPaths, DegenerateSizesEqualFull) {
  std::mt19937_64 rng(7);
  auto p = random_params(8, 2, rng);
  for (std::size_t L : {1u, 7u, 64u}) {
    auto x = random_tensor<double>({L, 8}, rng);
    for (bool causal : {false, true}) {
      const auto full = full_attention(x, p, causal);
      EXPECT_LE(max_abs_diff(masked_attention(x, p, LocalityPattern::full(causal)), full), 0.0);
      EXPECT_LE(max_abs_diff(masked_attention(x, p, LocalityPattern::windowed(L > 1 ? L - 1 : 1, causal)), full), 1e-6);
      EXPECT_LE(max_abs_diff(masked_attention(x, p, LocalityPattern::chunked(L, causal)), full), 1e-6);
      EXPECT_LE(max_abs_diff(window_attention_fast(x, p, L, causal), full), 1e-6);
      EXPECT_LE(max_abs_diff(chunk_attention_fast(x, p, L, causal), full), 1e-6);
    }
  }
}

TEST(FastPaths, ChunkOfOneIsPerTokenValue) {
  std::mt19937_64 rng(8);
  auto p = random_params(4, 1, rng);
  auto x = random_tensor<double>({9, 4}, rng);
  EXPECT_LE(max_abs_diff(chunk_attention_fast(x, p, 1, false), matmul(matmul(x, p.Wv), p.Wo)), 1e-12);
}

TEST(FastPaths, WindowBandStructure) {
  std::mt19937_64 rng(9);
  auto p = random_params(4, 1, rng);
  auto x = random_tensor<double>({3, 4}, rng);
  auto base = window_attention_fast(x, p, 1, true);
  x(0, 0) += 1.0;
  x(0, 3) -= 0.5;
  auto moved = window_attention_fast(x, p, 1, true);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base(2, c), moved(2, c));
}

TEST(FastPaths, BatchedSegmentsAreIndependent) {
  std::mt19937_64 rng(10);
  auto p = random_params(8, 2, rng);
  auto a = random_tensor<double>({20, 8}, rng), b = random_tensor<double>({20, 8}, rng);
  auto both = window_attention_fast(concat_rows(std::vector<Tensor<double>>{a, b}), p, 3, true, 20);
  auto ya = window_attention_fast(a, p, 3, true), yb = window_attention_fast(b, p, 3, true);
  for (std::size_t i = 0; i < ya.size(); ++i) {
    EXPECT_NEAR(both[i], ya[i], 1e-13);
    EXPECT_NEAR(both[ya.size() + i], yb[i], 1e-13);
  }
}

TEST(Properties, WeightsAreRowStochastic) {
  std::mt19937_64 rng(11);
  const std::size_t L = 33;
  auto q = random_tensor<double>({L, 8}, rng, 3.0), k = random_tensor<double>({L, 8}, rng, 3.0);
  for (auto pattern : {LocalityPattern::full(false), LocalityPattern::full(true), LocalityPattern::windowed(4, false),
                       LocalityPattern::windowed(4, true), LocalityPattern::chunked(5, false),
                       LocalityPattern::chunked(5, true)}) {
    for (std::size_t h = 0; h < 2; ++h) {
      auto w = attention_weights(q, k, pattern, 2, h);
      for (std::size_t i = 0; i < L; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < L; ++j) {
          s += w(i, j);
          if (!pattern.allows(i, j, L)) EXPECT_EQ(w(i, j), 0.0);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(Properties, CausalNoLeakage) {
  std::mt19937_64 rng(12);
  const std::size_t L = 40;
  auto p = random_params(8, 2, rng);
  for (auto pattern : {LocalityPattern::full(true), LocalityPattern::windowed(5, true), LocalityPattern::chunked(7, true)}) {
    auto x = random_tensor<double>({L, 8}, rng);
    auto base = local_attention(x, p, pattern, L);
    auto ref_base = masked_attention(x, p, pattern);
    for (std::size_t j : {0u, 13u, 39u}) {
      auto xp = x.clone();
      for (std::size_t c = 0; c < 8; ++c) xp(j, c) += 0.7;
      auto moved = local_attention(xp, p, pattern, L);
      auto ref_moved = masked_attention(xp, p, pattern);
      for (std::size_t i = 0; i < j; ++i) {
        for (std::size_t c = 0; c < 8; ++c) {
          EXPECT_EQ(base(i, c), moved(i, c));
          EXPECT_EQ(ref_base(i, c), ref_moved(i, c));
        }
      }
    }
  }
}

TEST(Properties, PermutationCovariance) {
  std::mt19937_64 rng(13);
  const std::size_t L = 12;
  auto p = random_params(8, 2, rng);
  auto x = random_tensor<double>({L, 8}, rng);
  std::vector<std::size_t> perm(L);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> xp({L, 8});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < 8; ++c) xp(i, c) = x(perm[i], c);
  auto y = full_attention(x, p, false), yp = full_attention(xp, p, false);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp(i, c), y(perm[i], c), 1e-12);
}

// The tracked allocations of the window kernel grow linearly in L; the dense
// reference grows quadratically.
TEST(Properties, WindowMemoryIsLinear) {
  std::mt19937_64 rng(14);
  const std::size_t d = 16, w = 8;
  auto peak = [&](std::size_t L, bool reference) {
    auto q = random_tensor<float>({L, d}, rng), k = random_tensor<float>({L, d}, rng), v = random_tensor<float>({L, d}, rng);
    const auto before = MemoryTracker::live_bytes();
    MemoryTracker::reset_peak();
    {
      auto out = reference ? attend_reference(q, k, v, LocalityPattern::windowed(w, true), 1, L)
                           : attend(q, k, v, LocalityPattern::windowed(w, true), 1, L);
    }
    return static_cast<double>(MemoryTracker::peak_bytes() - before);
  };
  const double fast1 = peak(1024, false), fast4 = peak(4096, false);
  EXPECT_LE(fast4 / fast1, 4.5);
  // w+1 probabilities per row plus the output.
  EXPECT_LE(fast4, 4096.0 * ((w + 1) + d) * sizeof(float) * 1.01);
  const double ref1 = peak(1024, true), ref4 = peak(4096, true);
  EXPECT_GE(ref4 / ref1, 12.0);
}

TEST(Gradients, AttentionOps) {
  std::mt19937_64 rng(15);
  const std::size_t L = 10, d = 4;
  for (auto pattern : {LocalityPattern::full(false), LocalityPattern::windowed(2, true), LocalityPattern::chunked(3, false)}) {
    auto p = random_params(d, 2, rng);
    auto x = random_tensor<double>({2 * L, d}, rng).set_requires_grad(true);
    auto w = random_tensor<double>({2 * L, d}, rng);
    auto fast = oracle::check_gradients({&x, &p.Wq, &p.Wk, &p.Wv, &p.Wo},
                                        [&] { return sum(mul(local_attention(x, p, pattern, L), w)); });
    EXPECT_LE(fast.max_rel_error, 1e-4) << to_string(pattern.kind) << " " << fast.worst;
    auto ref = oracle::check_gradients({&x, &p.Wq, &p.Wk, &p.Wv, &p.Wo},
                                       [&] { return sum(mul(masked_attention(x, p, pattern, L), w)); });
    EXPECT_LE(ref.max_rel_error, 1e-4) << to_string(pattern.kind) << " " << ref.worst;
  }
}

TEST(Gradients, BlockedKernelAcrossBlocks) {
  // Long enough that rows span several 64-row blocks.
  std::mt19937_64 rng(16);
  const std::size_t L = 150, d = 4;
  auto q = random_tensor<double>({L, d}, rng).set_requires_grad(true);
  auto k = random_tensor<double>({L, d}, rng).set_requires_grad(true);
  auto v = random_tensor<double>({L, d}, rng).set_requires_grad(true);
  auto w = random_tensor<double>({L, d}, rng);
  auto r = oracle::check_gradients({&q, &k, &v},
                                   [&] { return sum(mul(attend(q, k, v, LocalityPattern::windowed(5, false), 2, L), w)); },
                                   1e-6, 60);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

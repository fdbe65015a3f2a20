#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "spade/ops.hpp"
#include "spade/tensor.hpp"

namespace spade {

enum class PatternKind { full, window, chunk };

inline std::string to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::full: return "full";
    case PatternKind::window: return "window";
    case PatternKind::chunk: return "chunk";
  }
  return "?";
}

inline PatternKind parse_pattern_kind(const std::string& s) {
  if (s == "full") return PatternKind::full;
  if (s == "window") return PatternKind::window;
  if (s == "chunk") return PatternKind::chunk;
  throw ConfigError("unknown attention pattern '" + s + "' (expected full, window or chunk)", "pattern");
}

// Which keys each query may attend to. Windows are symmetric with `window`
// positions per side, left-only when causal. Chunks are contiguous blocks of
// `chunk` positions; the last one is short when chunk does not divide L.
struct LocalityPattern {
  PatternKind kind = PatternKind::full;
  std::size_t window = 1;
  std::size_t chunk = 1;
  bool causal = false;

  static LocalityPattern full(bool causal) { return {PatternKind::full, 1, 1, causal}; }
  static LocalityPattern windowed(std::size_t w, bool causal) { return {PatternKind::window, w, 1, causal}; }
  static LocalityPattern chunked(std::size_t c, bool causal) { return {PatternKind::chunk, 1, c, causal}; }

  void validate() const {
    if (kind == PatternKind::window && window == 0) throw ConfigError("window size must be at least 1", "window");
    if (kind == PatternKind::chunk && chunk == 0) throw ConfigError("chunk size must be at least 1", "chunk");
  }

  // Half-open key range [first, second) visible from query i in a sequence of length n.
  std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t n) const {
    std::size_t lo = 0, hi = n;
    switch (kind) {
      case PatternKind::full: break;
      case PatternKind::window:
        lo = i > window ? i - window : 0;
        hi = std::min(n, i + window + 1);
        break;
      case PatternKind::chunk:
        lo = (i / chunk) * chunk;
        hi = std::min(n, lo + chunk);
        break;
    }
    if (causal) hi = std::min(hi, i + 1);
    return {lo, hi};
  }

  bool allows(std::size_t i, std::size_t j, std::size_t n) const {
    auto [lo, hi] = key_range(i, n);
    return j >= lo && j < hi;
  }

  bool operator==(const LocalityPattern&) const = default;
};

// n x n additive mask: 0 where attention is allowed, -inf elsewhere.
template <typename T>
Tensor<T> attention_mask(const LocalityPattern& pattern, std::size_t n) {
  Tensor<T> mask({n, n}, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    auto [lo, hi] = pattern.key_range(i, n);
    for (std::size_t j = lo; j < hi; ++j) mask(i, j) = T(0);
  }
  return mask;
}

template <typename T>
struct AttentionParams {
  Tensor<T> Wq, Wk, Wv, Wo;  // [d x d], applied as X * W
  std::size_t heads = 1;

  std::size_t model_dim() const { return Wq.dim(0); }
  std::size_t head_dim() const { return model_dim() / heads; }
  std::vector<Tensor<T>*> parameters() { return {&Wq, &Wk, &Wv, &Wo}; }
};

template <typename T, typename Rng>
AttentionParams<T> init_attention(std::size_t d, std::size_t heads, Rng& rng, T output_scale = T(1)) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads",
                      "heads");
  }
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  auto make = [&](T s) {
    Tensor<T> w({d, d});
    for (auto& v : w.data()) v = static_cast<T>(normal(rng)) * s;
    return w.set_requires_grad(true);
  };
  AttentionParams<T> p;
  p.Wq = make(T(1));
  p.Wk = make(T(1));
  p.Wv = make(T(1));
  p.Wo = make(output_scale);
  p.heads = heads;
  return p;
}

namespace detail {

struct RowRanges {
  std::vector<std::size_t> lo, hi, offset;
  std::size_t total = 0;
};

inline RowRanges row_ranges(const LocalityPattern& pattern, std::size_t n) {
  RowRanges r;
  r.lo.resize(n);
  r.hi.resize(n);
  r.offset.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::tie(r.lo[i], r.hi[i]) = pattern.key_range(i, n);
    r.offset[i] = r.total;
    r.total += r.hi[i] - r.lo[i];
  }
  r.offset[n] = r.total;
  return r;
}

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, std::size_t segment) {
  require_same_shape("attention", q, k);
  require_same_shape("attention", q, v);
  require_2d("attention", q);
  if (heads == 0 || q.cols() % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (segment == 0 || q.rows() % segment != 0) {
    throw DimensionError("attention: " + std::to_string(q.rows()) + " rows do not split into sequences of " +
                         std::to_string(segment));
  }
}

inline constexpr std::size_t kAttentionBlock = 64;

}  // namespace detail

// Multi-head softmax attention restricted to `pattern`, over inputs that hold
// consecutive sequences of `segment` rows. Only the allowed scores are kept:
// O(L*w) for windows, O(L*c) for chunks, O(L^2) for full attention. Rows
// are processed in blocks so score products run as small GEMMs.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const LocalityPattern& pattern,
                 std::size_t heads, std::size_t segment) {
  pattern.validate();
  detail::check_qkv(q, k, v, heads, segment);
  const std::size_t d = q.cols(), dh = d / heads, batches = q.rows() / segment;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto ranges = detail::row_ranges(pattern, segment);
  const auto block = detail::kAttentionBlock;
  using Index = Eigen::Index;

  Tensor<T> out(q.shape());
  Tensor<T> probs({batches * heads * ranges.total});
  RowMatrix<T> scores, dense;
  const auto Q = detail::as_matrix(q);
  const auto K = detail::as_matrix(k);
  const auto V = detail::as_matrix(v);
  auto O = detail::as_matrix(out);

  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const Index r0 = static_cast<Index>(b * segment), c0 = static_cast<Index>(h * dh);
      T* P = probs.ptr() + (b * heads + h) * ranges.total;
      for (std::size_t i0 = 0; i0 < segment; i0 += block) {
        const std::size_t i1 = std::min(segment, i0 + block);
        const std::size_t klo = ranges.lo[i0], khi = ranges.hi[i1 - 1];
        const Index bi = static_cast<Index>(i1 - i0), kw = static_cast<Index>(khi - klo);
        scores.noalias() = Q.block(r0 + static_cast<Index>(i0), c0, bi, static_cast<Index>(dh)) *
                           K.block(r0 + static_cast<Index>(klo), c0, kw, static_cast<Index>(dh)).transpose();
        dense.setZero(bi, kw);
        for (std::size_t i = i0; i < i1; ++i) {
          const Index row = static_cast<Index>(i - i0);
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j) mx = std::max(mx, scores(row, static_cast<Index>(j - klo)) * scale);
          T total = 0;
          T* pr = P + ranges.offset[i];
          for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j) {
            const T e = std::exp(scores(row, static_cast<Index>(j - klo)) * scale - mx);
            pr[j - ranges.lo[i]] = e;
            total += e;
          }
          for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j) {
            pr[j - ranges.lo[i]] /= total;
            dense(row, static_cast<Index>(j - klo)) = pr[j - ranges.lo[i]];
          }
        }
        O.block(r0 + static_cast<Index>(i0), c0, bi, static_cast<Index>(dh)).noalias() =
            dense * V.block(r0 + static_cast<Index>(klo), c0, kw, static_cast<Index>(dh));
      }
    }
  }

  if (auto* tape = detail::recording_tape<T>(q, k, v)) {
    out.set_requires_grad(true);
    tape->record({q, k, v}, out, [q, k, v, out, probs, ranges, heads, segment, batches, dh, scale, block]() mutable {
      const auto Q = detail::as_matrix(std::as_const(q));
      const auto K = detail::as_matrix(std::as_const(k));
      const auto V = detail::as_matrix(std::as_const(v));
      const auto G = detail::grad_view(out);
      RowMatrix<T> dense, dprob;
      for (std::size_t b = 0; b < batches; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const Index r0 = static_cast<Index>(b * segment), c0 = static_cast<Index>(h * dh);
          const Index w = static_cast<Index>(dh);
          const T* P = probs.ptr() + (b * heads + h) * ranges.total;
          for (std::size_t i0 = 0; i0 < segment; i0 += block) {
            const std::size_t i1 = std::min(segment, i0 + block);
            const std::size_t klo = ranges.lo[i0], khi = ranges.hi[i1 - 1];
            const Index bi = static_cast<Index>(i1 - i0), kw = static_cast<Index>(khi - klo);
            const Index qr = r0 + static_cast<Index>(i0), kr = r0 + static_cast<Index>(klo);
            dense.setZero(bi, kw);
            for (std::size_t i = i0; i < i1; ++i)
              for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j)
                dense(static_cast<Index>(i - i0), static_cast<Index>(j - klo)) = P[ranges.offset[i] + j - ranges.lo[i]];
            const auto g_blk = G.block(qr, c0, bi, w);
            if (v.requires_grad()) detail::grad_matrix(v).block(kr, c0, kw, w).noalias() += dense.transpose() * g_blk;
            if (!q.requires_grad() && !k.requires_grad()) continue;
            dprob.noalias() = g_blk * V.block(kr, c0, kw, w).transpose();
            for (std::size_t i = i0; i < i1; ++i) {
              const Index row = static_cast<Index>(i - i0);
              T dot = 0;
              for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j) {
                const Index col = static_cast<Index>(j - klo);
                dot += dense(row, col) * dprob(row, col);
              }
              for (std::size_t j = ranges.lo[i]; j < ranges.hi[i]; ++j) {
                const Index col = static_cast<Index>(j - klo);
                dense(row, col) = scale * dense(row, col) * (dprob(row, col) - dot);
              }
            }
            if (q.requires_grad()) detail::grad_matrix(q).block(qr, c0, bi, w).noalias() += dense * K.block(kr, c0, kw, w);
            if (k.requires_grad())
              detail::grad_matrix(k).block(kr, c0, kw, w).noalias() += dense.transpose() * Q.block(qr, c0, bi, w);
          }
        }
      }
    });
  }
  return out;
}

// Dense masked softmax attention assembled from generic differentiable ops:
// the semantic reference the range kernel must agree with.
template <typename T>
Tensor<T> attend_reference(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const LocalityPattern& pattern,
                           std::size_t heads, std::size_t segment) {
  pattern.validate();
  detail::check_qkv(q, k, v, heads, segment);
  const std::size_t dh = q.cols() / heads, batches = q.rows() / segment;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Tensor<T> mask = attention_mask<T>(pattern, segment);
  std::vector<Tensor<T>> sequences;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto qb = slice_rows(q, b * segment, segment);
    const auto kb = slice_rows(k, b * segment, segment);
    const auto vb = slice_rows(v, b * segment, segment);
    Tensor<T> merged;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto scores = matmul_nt(slice_cols(qb, h * dh, dh), slice_cols(kb, h * dh, dh));
      const auto weights = softmax_rows(scores, &mask, scale);
      auto head = matmul(weights, slice_cols(vb, h * dh, dh));
      merged = merged.defined() ? concat_cols(merged, head) : head;
    }
    sequences.push_back(merged);
  }
  return concat_rows(sequences);
}

// Attention weights of one head of one sequence, as a dense [L x L] matrix.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const LocalityPattern& pattern, std::size_t heads,
                            std::size_t head) {
  NoGradGuard<T> no_grad;
  const std::size_t dh = q.cols() / heads;
  const Tensor<T> mask = attention_mask<T>(pattern, q.rows());
  return softmax_rows(matmul_nt(slice_cols(q, head * dh, dh), slice_cols(k, head * dh, dh)), &mask,
                      T(1) / std::sqrt(static_cast<T>(dh)));
}

namespace detail {

template <typename T>
Tensor<T> project_and_attend(const Tensor<T>& x, const AttentionParams<T>& p, const LocalityPattern& pattern,
                             std::size_t segment, bool reference) {
  if (x.cols() != p.model_dim()) {
    throw DimensionError("attention: input width " + std::to_string(x.cols()) + " != model width " +
                         std::to_string(p.model_dim()));
  }
  const auto q = matmul(x, p.Wq);
  const auto k = matmul(x, p.Wk);
  const auto v = matmul(x, p.Wv);
  const auto ctx = reference ? attend_reference(q, k, v, pattern, p.heads, segment)
                             : attend(q, k, v, pattern, p.heads, segment);
  return matmul(ctx, p.Wo);
}

}  // namespace detail

// softmax(Q K^T / sqrt(d_h) + mask) V per head, heads concatenated, then W_o.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& x, const AttentionParams<T>& p, const LocalityPattern& pattern,
                           std::size_t segment) {
  return detail::project_and_attend(x, p, pattern, segment, true);
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& x, const AttentionParams<T>& p, const LocalityPattern& pattern) {
  return masked_attention(x, p, pattern, x.rows());
}

template <typename T>
Tensor<T> full_attention(const Tensor<T>& x, const AttentionParams<T>& p, bool causal) {
  return masked_attention(x, p, LocalityPattern::full(causal));
}

template <typename T>
Tensor<T> window_attention_fast(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t w, bool causal,
                                std::size_t segment) {
  return detail::project_and_attend(x, p, LocalityPattern::windowed(w, causal), segment, false);
}

template <typename T>
Tensor<T> window_attention_fast(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t w, bool causal) {
  return window_attention_fast(x, p, w, causal, x.rows());
}

template <typename T>
Tensor<T> chunk_attention_fast(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t c, bool causal,
                               std::size_t segment) {
  return detail::project_and_attend(x, p, LocalityPattern::chunked(c, causal), segment, false);
}

template <typename T>
Tensor<T> chunk_attention_fast(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t c, bool causal) {
  return chunk_attention_fast(x, p, c, causal, x.rows());
}

// Fast path for any pattern; what the model layers call.
template <typename T>
Tensor<T> local_attention(const Tensor<T>& x, const AttentionParams<T>& p, const LocalityPattern& pattern,
                          std::size_t segment) {
  return detail::project_and_attend(x, p, pattern, segment, false);
}

}  // namespace spade

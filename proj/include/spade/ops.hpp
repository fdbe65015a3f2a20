#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "spade/tensor.hpp"

namespace spade {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

template <typename T>
MatrixMap<T> as_matrix(Tensor<T>& t) {
  return MatrixMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
ConstMatrixMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatrixMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
// Writable gradient, allocated on first use.
template <typename T>
MatrixMap<T> grad_matrix(const Tensor<T>& t) {
  return MatrixMap<T>(t.ensure_grad().data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
ConstMatrixMap<T> grad_view(const Tensor<T>& t) {
  return ConstMatrixMap<T>(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename T>
void require_2d(const char* op, const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

}  // namespace detail

// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d("matmul", a);
  detail::require_2d("matmul", b);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad(true);
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = detail::grad_view(out);
      if (a.requires_grad()) detail::grad_matrix(a).noalias() += g * detail::as_matrix(b).transpose();
      if (b.requires_grad()) detail::grad_matrix(b).noalias() += detail::as_matrix(a).transpose() * g;
    });
  }
  return out;
}

// a[m x k] * b[n x k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d("matmul_nt", a);
  detail::require_2d("matmul_nt", b);
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  Tensor<T> out({a.dim(0), b.dim(0)});
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad(true);
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = detail::grad_view(out);
      if (a.requires_grad()) detail::grad_matrix(a).noalias() += g * detail::as_matrix(b);
      if (b.requires_grad()) detail::grad_matrix(b).noalias() += g.transpose() * detail::as_matrix(a);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad(true);
    tape->record({a, b}, out, [a, b, out]() mutable {
      if (a.requires_grad()) detail::accumulate(a, std::as_const(out).grad());
      if (b.requires_grad()) detail::accumulate(b, std::as_const(out).grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad(true);
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  if (auto* tape = detail::recording_tape<T>(a)) {
    out.set_requires_grad(true);
    tape->record({a}, out, [a, out, factor]() mutable {
      auto g = std::as_const(out).grad();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

// x[m x n] + bias[n] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.size() != x.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + bias[c];
  }
  if (auto* tape = detail::recording_tape<T>(x, bias)) {
    out.set_requires_grad(true);
    tape->record({x, bias}, out, [x, bias, out, n]() mutable {
      auto g = std::as_const(out).grad();
      if (x.requires_grad()) detail::accumulate(x, g);
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    });
  }
  return out;
}

// x[m x n] * v[n] broadcast over rows.
template <typename T>
Tensor<T> scale_cols(const Tensor<T>& x, const Tensor<T>& v) {
  if (v.size() != x.cols()) {
    throw DimensionError("scale_cols: vector " + to_string(v.shape()) + " does not match " + to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * v[i % n];
  if (auto* tape = detail::recording_tape<T>(x, v)) {
    out.set_requires_grad(true);
    tape->record({x, v}, out, [x, v, out, n]() mutable {
      auto g = std::as_const(out).grad();
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * v[i % n];
      }
      if (v.requires_grad()) {
        auto gv = v.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gv[i % n] += g[i] * x[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out]() mutable {
      const T g = std::as_const(out).grad()[0];
      for (auto& v : x.ensure_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// [a, b] along the last dimension.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t ca = a.cols(), cb = b.cols(), rows = a.rows();
  Tensor<T> out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
    std::copy_n(b.ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
  }
  if (auto* tape = detail::recording_tape<T>(a, b)) {
    out.set_requires_grad(true);
    tape->record({a, b}, out, [a, b, out, ca, cb, rows]() mutable {
      auto g = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t width) {
  if (width == 0 || begin + width > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + width) +
                         ") out of range for " + to_string(x.shape()));
  }
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * n + begin, width, out.ptr() + r * width);
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out, begin, width, rows, n]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) gx[r * n + begin + c] += g[r * width + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require_2d("slice_rows", x);
  if (count == 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  Tensor<T> out({count, n});
  std::copy_n(x.ptr() + begin * n, count * n, out.ptr());
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out, begin, count, n]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < count * n; ++i) gx[begin * n + i] += g[i];
    });
  }
  return out;
}

// Stacks matrices with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor<T> out({rows, n});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy_n(p.ptr(), p.size(), out.ptr() + offset);
    offset += p.size();
  }
  auto* tape = Tape<T>::active();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    tape->record(parts, out, [parts, out]() mutable {
      auto g = std::as_const(out).grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) detail::accumulate(p, g.subspan(offset, p.size()));
        offset += p.size();
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
constexpr T gelu_value(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
  const T inner = k * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_derivative(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T c = static_cast<T>(0.044715);
  const T inner = k * (x + c * x * x * x);
  const T t = std::tanh(inner);
  return static_cast<T>(0.5) * (T(1) + t) +
         static_cast<T>(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
}

}  // namespace detail

// Tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::gelu_value(x[i]);
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * detail::gelu_derivative(x[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > T(0) ? g[i] : T(0);
    });
  }
  return out;
}

// Row-wise layer normalization with biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match " + to_string(x.shape()));
  }
  if (!(eps > T(0))) throw DimensionError("layer_norm: eps must be positive");
  Tensor<T> out(x.shape());
  std::vector<T> normalized(x.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * n;
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mu) * rstd[r];
      normalized[r * n + c] = h;
      out[r * n + c] = h * gain[c] + bias[c];
    }
  }
  if (auto* tape = detail::recording_tape<T>(x, gain, bias)) {
    out.set_requires_grad(true);
    tape->record({x, gain, bias}, out,
                 [x, gain, bias, out, normalized = std::move(normalized), rstd = std::move(rstd), n, rows]() mutable {
                   auto g = std::as_const(out).grad();
                   if (gain.requires_grad()) {
                     auto gg = gain.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * normalized[i];
                   }
                   if (bias.requires_grad()) {
                     auto gb = bias.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                   }
                   if (!x.requires_grad()) return;
                   auto gx = x.ensure_grad();
                   for (std::size_t r = 0; r < rows; ++r) {
                     T mean_dh = 0, mean_dh_h = 0;
                     for (std::size_t c = 0; c < n; ++c) {
                       const T dh = g[r * n + c] * gain[c];
                       mean_dh += dh;
                       mean_dh_h += dh * normalized[r * n + c];
                     }
                     mean_dh /= static_cast<T>(n);
                     mean_dh_h /= static_cast<T>(n);
                     for (std::size_t c = 0; c < n; ++c) {
                       const T dh = g[r * n + c] * gain[c];
                       gx[r * n + c] += rstd[r] * (dh - mean_dh - normalized[r * n + c] * mean_dh_h);
                     }
                   }
                 });
  }
  return out;
}

// Numerically stable row softmax of `x * scale + mask`. `mask`, when given,
// has the same shape as x and holds 0 or -inf. A row whose every entry is
// masked yields zeros; its index is appended to `masked_rows` if provided.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Tensor<T>* mask = nullptr, T scale = T(1),
                       std::vector<std::size_t>* masked_rows = nullptr) {
  if (mask != nullptr) detail::require_same_shape("softmax_rows", x, *mask);
  const std::size_t n = x.cols(), rows = x.rows();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      const T v = x[r * n + c] * scale + (mask ? (*mask)[r * n + c] : T(0));
      mx = std::max(mx, v);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      if (masked_rows != nullptr) masked_rows->push_back(r);
      continue;
    }
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T v = x[r * n + c] * scale + (mask ? (*mask)[r * n + c] : T(0));
      const T e = v == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(v - mx);
      out[r * n + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= total;
  }
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out, n, rows, scale]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * out[r * n + c];
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += scale * out[r * n + c] * (g[r * n + c] - dot);
      }
    });
  }
  return out;
}

// Rows of `table` selected by `ids`.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  detail::require_2d("embedding", table);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DimensionError("embedding: token " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(vocab));
    }
  }
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[r]) * d, d, out.ptr() + r * d);
  }
  if (auto* tape = detail::recording_tape<T>(table)) {
    out.set_requires_grad(true);
    tape->record({table}, out, [table, out, ids, d]() mutable {
      auto g = std::as_const(out).grad();
      auto gt = table.ensure_grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const std::size_t base = static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t c = 0; c < d; ++c) gt[base + c] += g[r * d + c];
      }
    });
  }
  return out;
}

inline constexpr int kIgnoreTarget = -1;

// Mean next-token cross-entropy over rows whose target is not kIgnoreTarget.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  detail::require_2d("cross_entropy", logits);
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " outside " + std::to_string(classes) +
                           " classes");
    }
    ++counted;
  }
  if (counted == 0) throw DimensionError("cross_entropy: every target is ignored");
  std::vector<T> probs(logits.size(), T(0));
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    const T* lr = logits.ptr() + r * classes;
    const T mx = *std::max_element(lr, lr + classes);
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(lr[c] - mx);
    const T log_total = std::log(total);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(lr[c] - mx - log_total);
    loss += -(lr[targets[r]] - mx - log_total);
  }
  const T inv = T(1) / static_cast<T>(counted);
  Tensor<T> out = Tensor<T>::scalar(loss * inv);
  if (auto* tape = detail::recording_tape<T>(logits)) {
    out.set_requires_grad(true);
    tape->record({logits}, out, [logits, out, targets, probs = std::move(probs), classes, rows, inv]() mutable {
      const T g = std::as_const(out).grad()[0] * inv;
      auto gl = logits.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == kIgnoreTarget) continue;
        for (std::size_t c = 0; c < classes; ++c) gl[r * classes + c] += g * probs[r * classes + c];
        gl[r * classes + static_cast<std::size_t>(targets[r])] -= g;
      }
    });
  }
  return out;
}

// Inverted dropout: keeps each entry with probability 1 - rate and rescales.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, T rate, Rng& rng) {
  if (rate <= T(0)) return x;
  if (rate >= T(1)) throw DimensionError("dropout rate must be below 1");
  const T keep_scale = T(1) / (T(1) - rate);
  // Threshold on raw 64-bit draws so the mask does not depend on the
  // standard library's distribution implementation.
  const auto threshold = static_cast<std::uint64_t>(static_cast<double>(rate) * 18446744073709551616.0);
  std::vector<T> mask(x.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = static_cast<std::uint64_t>(rng()) < threshold ? T(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out, mask = std::move(mask)]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// Mean of each consecutive block of `segment` rows: [(B*segment) x d] -> [B x d].
template <typename T>
Tensor<T> mean_pool_segments(const Tensor<T>& x, std::size_t segment) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (segment == 0 || rows % segment != 0) {
    throw DimensionError("mean_pool_segments: " + std::to_string(rows) + " rows not divisible into segments of " +
                         std::to_string(segment));
  }
  const std::size_t batches = rows / segment;
  const T inv = T(1) / static_cast<T>(segment);
  Tensor<T> out({batches, d});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out[(r / segment) * d + c] += x[r * d + c] * inv;
  if (auto* tape = detail::recording_tape<T>(x)) {
    out.set_requires_grad(true);
    tape->record({x}, out, [x, out, segment, rows, d, inv]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[(r / segment) * d + c] * inv;
    });
  }
  return out;
}

}  // namespace spade

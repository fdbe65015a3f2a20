#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include "spade/fft.hpp"
#include "spade/ops.hpp"
#include "spade/tensor.hpp"

namespace spade {

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

template <typename T>
class KernelCache;

// Continuous-time parameters shared by every embedding channel: A, B and the
// low-rank factor P are common, C and the step size are per channel.
template <typename T>
struct ContinuousSSM {
  std::size_t state_dim = 0;
  std::size_t channels = 0;
  Tensor<T> A;          // [state_dim x state_dim]
  Tensor<T> B;          // [state_dim]
  Tensor<T> P;          // [state_dim]
  Tensor<T> C;          // [channels x state_dim]
  Tensor<T> log_delta;  // [channels]
  bool trainable = false;
  std::shared_ptr<KernelCache<T>> cache = std::make_shared<KernelCache<T>>();

  double delta(std::size_t channel) const { return std::exp(static_cast<double>(log_delta[channel])); }

  void set_trainable(bool on) {
    trainable = on;
    C.set_requires_grad(on);
    log_delta.set_requires_grad(on);
    invalidate_kernels();
  }

  // Must be called after editing parameters of a frozen SSM in place.
  void invalidate_kernels() { cache = std::make_shared<KernelCache<T>>(); }
};

// Leading minus sign applies to the whole case table.
inline double hippo_skew_entry(std::size_t i, std::size_t j) {
  if (i == j) return -0.5;
  const double s = std::sqrt(static_cast<double>(i) + 0.5) * std::sqrt(static_cast<double>(j) + 0.5);
  return i > j ? -s : s;
}

template <typename T>
ContinuousSSM<T> hippo_init(std::size_t state_dim, std::size_t channels, std::uint64_t seed, bool trainable = false,
                            double min_delta = 1e-3, double max_delta = 1e-1) {
  if (state_dim == 0) throw DimensionError("hippo_init: state dimension must be positive");
  if (channels == 0) throw DimensionError("hippo_init: channel count must be positive");
  if (!(min_delta > 0.0) || !(max_delta >= min_delta)) throw DimensionError("hippo_init: invalid step-size range");

  ContinuousSSM<T> ssm;
  ssm.state_dim = state_dim;
  ssm.channels = channels;
  ssm.A = Tensor<T>({state_dim, state_dim});
  ssm.B = Tensor<T>({state_dim});
  ssm.P = Tensor<T>({state_dim});
  for (std::size_t i = 0; i < state_dim; ++i) {
    ssm.P[i] = static_cast<T>(std::sqrt(static_cast<double>(i) + 0.5));
    ssm.B[i] = static_cast<T>(std::sqrt(2.0 * static_cast<double>(i) + 1.0));
  }
  for (std::size_t i = 0; i < state_dim; ++i) {
    for (std::size_t j = 0; j < state_dim; ++j) {
      const double p_i = std::sqrt(static_cast<double>(i) + 0.5);
      const double p_j = std::sqrt(static_cast<double>(j) + 0.5);
      ssm.A(i, j) = static_cast<T>(hippo_skew_entry(i, j) - p_i * p_j);
    }
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(state_dim)));
  std::uniform_real_distribution<double> uniform(std::log(min_delta), std::log(max_delta));
  ssm.C = Tensor<T>({channels, state_dim});
  for (auto& v : ssm.C.data()) v = static_cast<T>(normal(rng));
  ssm.log_delta = Tensor<T>({channels});
  for (auto& v : ssm.log_delta.data()) v = static_cast<T>(uniform(rng));
  ssm.set_trainable(trainable);
  return ssm;
}

// Single-channel discrete recurrence x_k = A_bar x_{k-1} + B_bar u_k, y_k = C_bar x_k.
template <typename T>
struct DiscreteSSM {
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> A_bar;
  Eigen::Matrix<T, Eigen::Dynamic, 1> B_bar;
  Eigen::Matrix<T, Eigen::Dynamic, 1> C_bar;

  std::size_t state_dim() const { return static_cast<std::size_t>(B_bar.size()); }
};

namespace detail {

struct BilinearFactors {
  Eigen::PartialPivLU<MatrixXd> lu;  // of I - delta/2 * A
  MatrixXd A_bar;
  VectorXd B_bar;
};

inline BilinearFactors bilinear(const MatrixXd& A, const VectorXd& B, double delta) {
  const auto n = A.rows();
  if (A.cols() != n || B.size() != n) throw DimensionError("discretize: A must be square and match B");
  if (!(delta > 0.0) || !std::isfinite(delta)) throw NumericError("discretize: step size must be positive and finite");
  const MatrixXd identity = MatrixXd::Identity(n, n);
  const MatrixXd lhs = identity - (delta / 2.0) * A;
  BilinearFactors f{Eigen::PartialPivLU<MatrixXd>(lhs), {}, {}};
  const double rcond = f.lu.rcond();
  if (!(rcond > 64.0 * std::numeric_limits<double>::epsilon())) {
    throw NumericError("discretize: I - delta/2*A is singular to working precision (reciprocal condition estimate " +
                       std::to_string(rcond) + ")");
  }
  f.A_bar = f.lu.solve(identity + (delta / 2.0) * A);
  f.B_bar = f.lu.solve(delta * B);
  return f;
}

template <typename T>
MatrixXd to_matrix(const Tensor<T>& t) {
  MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
  return m;
}

template <typename T>
VectorXd to_vector(const T* p, std::size_t n) {
  VectorXd v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = static_cast<double>(p[i]);
  return v;
}

}  // namespace detail

// Bilinear discretization of explicit (A, B, C) with step size delta.
template <typename T>
DiscreteSSM<T> discretize(const MatrixXd& A, const VectorXd& B, const VectorXd& C, double delta) {
  if (C.size() != B.size()) throw DimensionError("discretize: C must match the state dimension");
  auto f = detail::bilinear(A, B, delta);
  return {f.A_bar.cast<T>(), f.B_bar.cast<T>(), C.cast<T>()};
}

template <typename T>
DiscreteSSM<T> discretize(const ContinuousSSM<T>& ssm, std::size_t channel) {
  if (channel >= ssm.channels) {
    throw DimensionError("discretize: channel " + std::to_string(channel) + " out of range (" +
                         std::to_string(ssm.channels) + " channels)");
  }
  return discretize<T>(detail::to_matrix(ssm.A), detail::to_vector(ssm.B.ptr(), ssm.state_dim),
                       detail::to_vector(ssm.C.ptr() + channel * ssm.state_dim, ssm.state_dim), ssm.delta(channel));
}

template <typename T>
struct SSMKernel {
  std::vector<T> values;
  std::size_t length() const { return values.size(); }
};

// K[i] = C_bar A_bar^i B_bar by the state recursion v_{i+1} = A_bar v_i.
template <typename T>
SSMKernel<T> materialize_kernel(const DiscreteSSM<T>& disc, std::size_t length) {
  if (length == 0) throw DimensionError("materialize_kernel: length must be positive");
  SSMKernel<T> k;
  k.values.resize(length);
  Eigen::Matrix<T, Eigen::Dynamic, 1> v = disc.B_bar, next(v.size());
  for (std::size_t i = 0; i < length; ++i) {
    k.values[i] = disc.C_bar.dot(v);
    if (!std::isfinite(k.values[i])) {
      throw NumericError("materialize_kernel: state recursion overflowed at index " + std::to_string(i) +
                         "; A_bar is not stable");
    }
    if (i + 1 < length) {
      next.noalias() = disc.A_bar * v;
      v.swap(next);
    }
  }
  return k;
}

// Recurrent execution from a zero initial state.
template <typename T>
std::vector<T> scan(const DiscreteSSM<T>& disc, std::span<const T> u) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> x = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(disc.B_bar.size()), next(x.size());
  std::vector<T> y(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    next.noalias() = disc.A_bar * x;
    next += disc.B_bar * u[k];
    x.swap(next);
    y[k] = disc.C_bar.dot(x);
  }
  return y;
}

template <typename T>
std::vector<T> scan(const DiscreteSSM<T>& disc, const std::vector<T>& u) {
  return scan(disc, std::span<const T>(u));
}

namespace detail {

// Per-channel kernel in double precision, optionally keeping the state
// trajectory for the backward pass.
inline VectorXd channel_kernel(const MatrixXd& A_bar, const VectorXd& B_bar, const VectorXd& C, std::size_t length,
                               MatrixXd* states = nullptr) {
  VectorXd k(static_cast<Eigen::Index>(length));
  VectorXd v = B_bar, next(v.size());
  if (states != nullptr) states->resize(v.size(), static_cast<Eigen::Index>(length));
  for (std::size_t i = 0; i < length; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    if (states != nullptr) states->col(ii) = v;
    k(ii) = C.dot(v);
    if (i + 1 < length) {
      next.noalias() = A_bar * v;
      v.swap(next);
    }
  }
  if (!k.allFinite()) throw NumericError("SSM kernel overflowed; A_bar is not stable");
  return k;
}

}  // namespace detail

// Kernels of every channel as a [channels x length] tensor. When the SSM is
// trainable and a tape is active, gradients flow to C and log_delta.
template <typename T>
Tensor<T> ssm_kernels(const ContinuousSSM<T>& ssm, std::size_t length) {
  if (length == 0) throw DimensionError("ssm_kernels: length must be positive");
  const std::size_t ds = ssm.state_dim, channels = ssm.channels;
  const MatrixXd A = detail::to_matrix(ssm.A);
  const VectorXd B = detail::to_vector(ssm.B.ptr(), ds);
  Tensor<T> out({channels, length});
  for (std::size_t ch = 0; ch < channels; ++ch) {
    auto f = detail::bilinear(A, B, ssm.delta(ch));
    const VectorXd k = detail::channel_kernel(f.A_bar, f.B_bar, detail::to_vector(ssm.C.ptr() + ch * ds, ds), length);
    for (std::size_t i = 0; i < length; ++i) out(ch, i) = static_cast<T>(k(static_cast<Eigen::Index>(i)));
  }
  auto* tape = detail::recording_tape<T>(ssm.C, ssm.log_delta);
  if (tape == nullptr) return out;

  out.set_requires_grad(true);
  Tensor<T> C = ssm.C, log_delta = ssm.log_delta, A_t = ssm.A, B_t = ssm.B;
  tape->record({C, log_delta}, out, [C, log_delta, A_t, B_t, out, ds, channels, length]() mutable {
    const MatrixXd A = detail::to_matrix(A_t);
    const VectorXd B = detail::to_vector(B_t.ptr(), ds);
    const MatrixXd identity = MatrixXd::Identity(static_cast<Eigen::Index>(ds), static_cast<Eigen::Index>(ds));
    auto g_out = std::as_const(out).grad();
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double delta = std::exp(static_cast<double>(log_delta[ch]));
      auto f = detail::bilinear(A, B, delta);
      const VectorXd c = detail::to_vector(C.ptr() + ch * ds, ds);
      MatrixXd states;
      detail::channel_kernel(f.A_bar, f.B_bar, c, length, &states);
      VectorXd g(static_cast<Eigen::Index>(length));
      for (std::size_t i = 0; i < length; ++i) g(static_cast<Eigen::Index>(i)) = static_cast<double>(g_out[ch * length + i]);

      if (C.requires_grad()) {
        const VectorXd dc = states * g;
        auto gc = C.ensure_grad();
        for (std::size_t j = 0; j < ds; ++j) gc[ch * ds + j] += static_cast<T>(dc(static_cast<Eigen::Index>(j)));
      }
      if (!log_delta.requires_grad()) continue;

      // Adjoint sweep: mu_k = g_{k+1} c + A_bar^T mu_{k+1}, mu_{L-1} = 0.
      MatrixXd G = MatrixXd::Zero(static_cast<Eigen::Index>(ds), static_cast<Eigen::Index>(ds));
      VectorXd mu = VectorXd::Zero(static_cast<Eigen::Index>(ds)), next(mu.size());
      for (std::size_t k = length - 1; k-- > 0;) {
        const auto kk = static_cast<Eigen::Index>(k);
        next.noalias() = f.A_bar.transpose() * mu;
        mu = next + g(kk + 1) * c;
        G.noalias() += mu * states.col(kk).transpose();
      }
      const VectorXd lambda = g(0) * c + f.A_bar.transpose() * mu;
      const MatrixXd dA_bar = f.lu.solve(0.5 * A * (identity + f.A_bar));
      const VectorXd dB_bar = f.lu.solve(B + 0.5 * A * f.B_bar);
      const double d_delta = (G.array() * dA_bar.array()).sum() + lambda.dot(dB_bar);
      log_delta.ensure_grad()[ch] += static_cast<T>(d_delta * delta);
    }
  });
  return out;
}

// Frozen kernels memoized by length.
template <typename T>
class KernelCache {
 public:
  Tensor<T> get(const ContinuousSSM<T>& ssm, std::size_t length) {
    {
      std::shared_lock lock(mutex_);
      if (auto it = kernels_.find(length); it != kernels_.end()) return it->second;
    }
    std::unique_lock lock(mutex_);
    if (auto it = kernels_.find(length); it != kernels_.end()) return it->second;
    NoGradGuard<T> no_grad;
    auto k = ssm_kernels(ssm, length);
    kernels_.emplace(length, k);
    return k;
  }
  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return kernels_.size();
  }

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::size_t, Tensor<T>> kernels_;
};

// Depthwise causal convolution of each column of x, split into consecutive
// segments of `segment` rows, with the matching row of `kernels`
// ([channels x segment]).
template <typename T>
Tensor<T> causal_conv(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t segment) {
  const std::size_t rows = x.rows(), channels = x.cols();
  if (kernels.ndim() != 2 || kernels.dim(0) != channels || kernels.dim(1) != segment) {
    throw DimensionError("causal_conv: kernels " + to_string(kernels.shape()) + " do not match input " +
                         to_string(x.shape()) + " with segment length " + std::to_string(segment));
  }
  if (segment == 0 || rows % segment != 0) {
    throw DimensionError("causal_conv: " + std::to_string(rows) + " rows do not split into segments of " +
                         std::to_string(segment));
  }
  const std::size_t batches = rows / segment;
  CausalConvolver<T> conv(segment);
  std::vector<typename CausalConvolver<T>::Spectrum> spectra(channels);
  for (std::size_t ch = 0; ch < channels; ++ch)
    spectra[ch] = conv.spectrum(std::span<const T>(kernels.ptr() + ch * segment, segment));

  Tensor<T> out(x.shape());
  std::vector<T> signal(segment), result(segment);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t t = 0; t < segment; ++t) signal[t] = x[(b * segment + t) * channels + ch];
      conv.convolve(spectra[ch], signal, result);
      for (std::size_t t = 0; t < segment; ++t) out[(b * segment + t) * channels + ch] = result[t];
    }
  }

  if (auto* tape = detail::recording_tape<T>(x, kernels)) {
    out.set_requires_grad(true);
    tape->record({x, kernels}, out,
                 [x, kernels, out, spectra = std::move(spectra), segment, channels, batches]() mutable {
                   CausalConvolver<T> conv(segment);
                   auto g = std::as_const(out).grad();
                   std::vector<T> gcol(segment), xcol(segment), result(segment);
                   std::span<T> gx = x.requires_grad() ? x.ensure_grad() : std::span<T>{};
                   std::span<T> gk = kernels.requires_grad() ? kernels.ensure_grad() : std::span<T>{};
                   for (std::size_t b = 0; b < batches; ++b) {
                     for (std::size_t ch = 0; ch < channels; ++ch) {
                       for (std::size_t t = 0; t < segment; ++t) gcol[t] = g[(b * segment + t) * channels + ch];
                       if (!gx.empty()) {
                         conv.correlate(spectra[ch], gcol, result);
                         for (std::size_t t = 0; t < segment; ++t) gx[(b * segment + t) * channels + ch] += result[t];
                       }
                       if (!gk.empty()) {
                         for (std::size_t t = 0; t < segment; ++t) xcol[t] = x[(b * segment + t) * channels + ch];
                         conv.correlate(conv.spectrum(xcol), gcol, result);
                         for (std::size_t i = 0; i < segment; ++i) gk[ch * segment + i] += result[i];
                       }
                     }
                   }
                 });
  }
  return out;
}

// Runs every embedding channel of x ([(batches*segment) x channels]) through
// its own discretized SSM. Frozen kernels come from the cache; trainable
// ones are rebuilt on every call.
template <typename T>
Tensor<T> ssm_forward(const ContinuousSSM<T>& ssm, const Tensor<T>& x, std::size_t segment) {
  if (x.cols() != ssm.channels) {
    throw DimensionError("ssm_forward: input has " + std::to_string(x.cols()) + " channels, SSM has " +
                         std::to_string(ssm.channels));
  }
  const Tensor<T> kernels = ssm.trainable ? ssm_kernels(ssm, segment) : ssm.cache->get(ssm, segment);
  return causal_conv(x, kernels, segment);
}

template <typename T>
Tensor<T> ssm_forward(const ContinuousSSM<T>& ssm, const Tensor<T>& x) {
  return ssm_forward(ssm, x, x.rows());
}

// CSV dump of a [channels x L] kernel tensor: channel,index,value.
template <typename T>
void write_kernel_csv(std::ostream& os, const Tensor<T>& kernels) {
  os << "channel,index,value\n";
  const auto old = os.precision(std::numeric_limits<T>::max_digits10);
  for (std::size_t ch = 0; ch < kernels.rows(); ++ch)
    for (std::size_t i = 0; i < kernels.cols(); ++i) os << ch << ',' << i << ',' << kernels(ch, i) << '\n';
  os.precision(old);
}

}  // namespace spade

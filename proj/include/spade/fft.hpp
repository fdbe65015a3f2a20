#pragma once

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <cstddef>
#include <mutex>
#include <span>
#include <vector>

#include "spade/error.hpp"

namespace spade {

namespace detail {

template <typename T>
struct Fftw;

template <>
struct Fftw<double> {
  using Plan = fftw_plan;
  using Complex = fftw_complex;
  static Plan r2c(int n, double* in, Complex* out) { return fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
  static Plan c2r(int n, Complex* in, double* out) { return fftw_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
  static void execute(Plan p) { fftw_execute(p); }
  static void destroy(Plan p) { fftw_destroy_plan(p); }
  static void* alloc(std::size_t bytes) { return fftw_malloc(bytes); }
  static void release(void* p) { fftw_free(p); }
};

template <>
struct Fftw<float> {
  using Plan = fftwf_plan;
  using Complex = fftwf_complex;
  static Plan r2c(int n, float* in, Complex* out) { return fftwf_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
  static Plan c2r(int n, Complex* in, float* out) { return fftwf_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
  static void execute(Plan p) { fftwf_execute(p); }
  static void destroy(Plan p) { fftwf_destroy_plan(p); }
  static void* alloc(std::size_t bytes) { return fftwf_malloc(bytes); }
  static void release(void* p) { fftwf_free(p); }
};

// FFTW's planner is not thread-safe; execution is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Real-to-complex transform pair of a fixed power-of-two size with its own
// aligned scratch buffers. Not safe to share between threads.
template <typename T>
class RealFft {
  using Api = detail::Fftw<T>;

 public:
  using Spectrum = std::vector<std::complex<T>>;

  explicit RealFft(std::size_t n) : n_(n) {
    real_ = static_cast<T*>(Api::alloc(sizeof(T) * n_));
    freq_ = static_cast<typename Api::Complex*>(Api::alloc(sizeof(typename Api::Complex) * bins()));
    std::lock_guard lock(detail::fftw_planner_mutex());
    forward_ = Api::r2c(static_cast<int>(n_), real_, freq_);
    inverse_ = Api::c2r(static_cast<int>(n_), freq_, real_);
  }
  ~RealFft() {
    {
      std::lock_guard lock(detail::fftw_planner_mutex());
      Api::destroy(forward_);
      Api::destroy(inverse_);
    }
    Api::release(real_);
    Api::release(freq_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // Zero-pads `x` to size() and writes bins() coefficients.
  void forward(std::span<const T> x, std::complex<T>* out) {
    std::copy(x.begin(), x.end(), real_);
    std::fill(real_ + x.size(), real_ + n_, T(0));
    Api::execute(forward_);
    auto* f = reinterpret_cast<std::complex<T>*>(freq_);
    std::copy(f, f + bins(), out);
  }

  // Normalized inverse; writes the first out.size() samples.
  void inverse(const std::complex<T>* in, std::span<T> out) {
    std::copy(in, in + bins(), reinterpret_cast<std::complex<T>*>(freq_));
    Api::execute(inverse_);
    const T inv = T(1) / static_cast<T>(n_);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = real_[i] * inv;
  }

 private:
  std::size_t n_;
  T* real_ = nullptr;
  typename Api::Complex* freq_ = nullptr;
  typename Api::Plan forward_{};
  typename Api::Plan inverse_{};
};

// One-sided linear convolution and correlation of length-L sequences,
// computed on a zero-padded power-of-two grid of size >= 2L - 1 so the
// circular wrap never reaches the first L outputs.
template <typename T>
class CausalConvolver {
 public:
  using Spectrum = std::vector<std::complex<T>>;

  explicit CausalConvolver(std::size_t length)
      : length_(length), fft_(next_pow2(2 * std::max<std::size_t>(length, 1) - 1)), scratch_(fft_.bins()) {
    if (length == 0) throw DimensionError("convolution length must be positive");
  }

  std::size_t length() const { return length_; }

  Spectrum spectrum(std::span<const T> x) {
    check(x.size());
    Spectrum s(fft_.bins());
    fft_.forward(x, s.data());
    return s;
  }

  // out[k] = sum_{i<=k} kernel[i] * signal[k - i]
  void convolve(const Spectrum& kernel, std::span<const T> signal, std::span<T> out) {
    check(signal.size());
    check(out.size());
    fft_.forward(signal, scratch_.data());
    for (std::size_t i = 0; i < scratch_.size(); ++i) scratch_[i] *= kernel[i];
    fft_.inverse(scratch_.data(), out);
  }

  // out[s] = sum_{t>=s} a[t - s] * b[t]; the adjoint of convolution by a.
  void correlate(const Spectrum& a, std::span<const T> b, std::span<T> out) {
    check(b.size());
    check(out.size());
    fft_.forward(b, scratch_.data());
    for (std::size_t i = 0; i < scratch_.size(); ++i) scratch_[i] *= std::conj(a[i]);
    fft_.inverse(scratch_.data(), out);
  }

  // Spectrum-spectrum variant of correlate for when both sides are cached.
  void correlate_spectra(const Spectrum& a, const Spectrum& b, std::span<T> out) {
    check(out.size());
    for (std::size_t i = 0; i < scratch_.size(); ++i) scratch_[i] = b[i] * std::conj(a[i]);
    fft_.inverse(scratch_.data(), out);
  }

 private:
  void check(std::size_t n) const {
    if (n != length_) {
      throw DimensionError("convolution expects length " + std::to_string(length_) + ", got " + std::to_string(n));
    }
  }

  std::size_t length_;
  RealFft<T> fft_;
  Spectrum scratch_;
};

// Causal convolution of two equal-length sequences via FFT.
template <typename T>
std::vector<T> fft_conv(std::span<const T> kernel, std::span<const T> signal) {
  if (kernel.size() != signal.size()) {
    throw DimensionError("fft_conv: kernel length " + std::to_string(kernel.size()) + " != signal length " +
                         std::to_string(signal.size()));
  }
  CausalConvolver<T> conv(kernel.size());
  std::vector<T> out(kernel.size());
  conv.convolve(conv.spectrum(kernel), signal, out);
  return out;
}

template <typename T>
std::vector<T> fft_conv(const std::vector<T>& kernel, const std::vector<T>& signal) {
  return fft_conv<T>(std::span<const T>(kernel), std::span<const T>(signal));
}

}  // namespace spade

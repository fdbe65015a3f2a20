#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spade/error.hpp"

namespace spade {

// Byte accounting for every tensor buffer (data and gradients). The peak is
// the number the benchmarks report, so it has to be deterministic and must
// not depend on the OS allocator.
class MemoryTracker {
 public:
  static void allocate(std::size_t bytes) {
    const auto now = live_().fetch_add(static_cast<std::int64_t>(bytes)) +
                     static_cast<std::int64_t>(bytes);
    const auto limit = limit_().load();
    if (limit > 0 && now > limit) {
      live_().fetch_sub(static_cast<std::int64_t>(bytes));
      throw ResourceError("tensor memory budget exceeded: " + std::to_string(now) +
                          " > " + std::to_string(limit) + " bytes");
    }
    auto prev = peak_().load();
    while (now > prev && !peak_().compare_exchange_weak(prev, now)) {
    }
  }
  static void release(std::size_t bytes) { live_().fetch_sub(static_cast<std::int64_t>(bytes)); }

  static std::int64_t live_bytes() { return live_().load(); }
  static std::int64_t peak_bytes() { return peak_().load(); }
  static void reset_peak() { peak_().store(live_().load()); }

  // 0 disables the limit.
  static void set_limit(std::int64_t bytes) { limit_().store(bytes); }
  static std::int64_t limit() { return limit_().load(); }

 private:
  static std::atomic<std::int64_t>& live_() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak_() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& limit_() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    MemoryTracker::allocate(n * sizeof(T));
    try {
      return std::allocator<T>{}.allocate(n);
    } catch (...) {
      MemoryTracker::release(n * sizeof(T));
      throw;
    }
  }
  void deallocate(T* p, std::size_t n) {
    std::allocator<T>{}.deallocate(p, n);
    MemoryTracker::release(n * sizeof(T));
  }
  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array with an optional gradient buffer. Copies share
// storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    validate(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(element_count(impl_->shape), fill);
  }

  Tensor(Shape shape, const std::vector<T>& values) : impl_(std::make_shared<Impl>()) {
    validate(shape);
    if (element_count(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " needs " +
                           std::to_string(element_count(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(values.begin(), values.end());
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }
  // Last dimension; everything before it is folded into rows().
  std::size_t cols() const { return impl_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  std::span<T> data() { return {impl_->data.data(), impl_->data.size()}; }
  std::span<const T> data() const { return {impl_->data.data(), impl_->data.size()}; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T& operator()(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return {impl_->grad.data(), impl_->grad.size()}; }
  std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  // Allocates a zero gradient on first use.
  // Gradients are tape side-state, so this is available on const handles.
  std::span<T> ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return {impl_->grad.data(), impl_->grad.size()};
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
  void clear_grad() { Buffer<T>().swap(impl_->grad); }

  Tensor clone() const {
    Tensor out;
    out.impl_ = std::make_shared<Impl>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;
    bool requires_grad = false;
  };

  static void validate(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto s : shape) {
      if (s == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

// Records differentiable operations in execution order. Constructing a tape
// makes it the active tape of the calling thread until it is destroyed; ops
// executed while no tape is active record nothing.
template <typename T>
class Tape {
 public:
  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void()> backward) {
    if (consumed_) throw Error("tape already ran backward; record a new forward pass on a fresh tape");
    entries_.push_back({std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void backward(Tensor<T> loss) {
    if (consumed_) throw Error("backward called twice on the same tape");
    if (loss.size() != 1) {
      throw DimensionError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) throw Error("loss does not depend on any tensor that requires grad");
    consumed_ = true;
    loss.ensure_grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    entries_.clear();
  }

 private:
  struct Entry {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  static inline thread_local Tape* active_ = nullptr;
  Tape* previous_;
  std::vector<Entry> entries_;
  bool consumed_ = false;

  template <typename U>
  friend class NoGradGuard;
};

// Runs backward on the calling thread's active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw Error("backward called with no active tape");
  tape->backward(loss);
}

// Suspends recording for the current scope.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Tape<T>::active_) { Tape<T>::active_ = nullptr; }
  ~NoGradGuard() { Tape<T>::active_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* saved_;
};

namespace detail {

// Returns the active tape when at least one input participates in autograd.
template <typename T, typename... Ts>
Tape<T>* recording_tape(const Ts&... inputs) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? tape : nullptr;
}

template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> g) {
  auto dst = t.ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (auto v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace spade

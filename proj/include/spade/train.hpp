#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "spade/checkpoint.hpp"
#include "spade/model.hpp"
#include "spade/tasks.hpp"

namespace spade {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s, const std::string& key = "train.precision") {
  if (s == "f32" || s == "float32") return Precision::f32;
  if (s == "f64" || s == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)", key);
}

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double clip = 1.0;
  std::size_t batch = 32;
  std::size_t steps = 1000;
  std::size_t warmup = 100;
  std::size_t eval_every = 200;  // 0: evaluate only after the last step
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::size_t workers = 1;
  bool record_time = true;  // false writes 0 seconds so metric files compare byte for byte

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0", "train.lr");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)", "train.beta1");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)", "train.beta2");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive", "train.eps");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0", "train.weight_decay");
    if (!(clip > 0.0)) throw ConfigError("clip norm must be positive", "train.clip");
    if (batch == 0) throw ConfigError("batch must be positive", "train.batch");
    if (steps == 0) throw ConfigError("steps must be positive", "train.steps");
    if (warmup > steps) throw ConfigError("warmup exceeds total steps", "train.warmup");
    if (workers == 0) throw ConfigError("workers must be positive", "train.workers");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline std::vector<std::pair<std::string, std::string>> train_config_entries(const TrainConfig& c) {
  return {{"lr", format_double(c.lr)},
          {"beta1", format_double(c.beta1)},
          {"beta2", format_double(c.beta2)},
          {"eps", format_double(c.eps)},
          {"weight_decay", format_double(c.weight_decay)},
          {"clip", format_double(c.clip)},
          {"batch", std::to_string(c.batch)},
          {"steps", std::to_string(c.steps)},
          {"warmup", std::to_string(c.warmup)},
          {"eval_every", std::to_string(c.eval_every)},
          {"seed", std::to_string(c.seed)},
          {"precision", to_string(c.precision)},
          {"workers", std::to_string(c.workers)},
          {"record_time", format_bool(c.record_time)}};
}

inline bool set_train_config_entry(TrainConfig& c, const std::string& key, const std::string& value,
                                   const std::string& prefix = "train.") {
  const std::string full = prefix + key;
  if (key == "lr") c.lr = parse_double(full, value);
  else if (key == "beta1") c.beta1 = parse_double(full, value);
  else if (key == "beta2") c.beta2 = parse_double(full, value);
  else if (key == "eps") c.eps = parse_double(full, value);
  else if (key == "weight_decay") c.weight_decay = parse_double(full, value);
  else if (key == "clip") c.clip = parse_double(full, value);
  else if (key == "batch") c.batch = parse_positive(full, value);
  else if (key == "steps") c.steps = parse_positive(full, value);
  else if (key == "warmup") c.warmup = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "eval_every") c.eval_every = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "seed") c.seed = parse_uint(full, value);
  else if (key == "precision") c.precision = parse_precision(value, full);
  else if (key == "workers") c.workers = parse_positive(full, value);
  else if (key == "record_time") c.record_time = parse_bool(full, value);
  else return false;
  return true;
}

// Linear warmup to `peak`, then peak * sqrt(warmup / s). Steps count from 1.
inline double learning_rate(const TrainConfig& c, std::size_t step) {
  if (c.warmup == 0) return c.lr;
  const auto s = static_cast<double>(step), w = static_cast<double>(c.warmup);
  if (step < c.warmup) return c.lr * s / w;
  return c.lr * std::sqrt(w / s);
}

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double total = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (auto g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(total);
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) {
    const auto factor = static_cast<T>(max_norm / norm);
    for (auto p : params)
      if (p.has_grad())
        for (auto& g : p.grad()) g *= factor;
  }
  return norm;
}

// Adam with decoupled weight decay on tensors of rank >= 2.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i];
      if (!p.has_grad()) continue;
      auto data = p.data();
      auto grad = std::as_const(p).grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const bool decay = p.ndim() >= 2 && cfg_.weight_decay > 0.0;
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        if (decay) update += cfg_.weight_decay * static_cast<double>(data[j]);
        data[j] = static_cast<T>(static_cast<double>(data[j]) - lr * update);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

namespace detail {

inline std::size_t counted_targets(const std::vector<int>& targets) {
  std::size_t n = 0;
  for (int t : targets) n += t != kIgnoreTarget;
  return n;
}

inline Batch sub_batch(const Batch& b, std::size_t first, std::size_t count, bool per_sequence_targets) {
  Batch out;
  out.segment = b.segment;
  const auto L = static_cast<std::ptrdiff_t>(b.segment);
  const auto f = static_cast<std::ptrdiff_t>(first), c = static_cast<std::ptrdiff_t>(count);
  out.tokens.assign(b.tokens.begin() + f * L, b.tokens.begin() + (f + c) * L);
  if (per_sequence_targets) out.targets.assign(b.targets.begin() + f, b.targets.begin() + f + c);
  else out.targets.assign(b.targets.begin() + f * L, b.targets.begin() + (f + c) * L);
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// One optimizer step per call. With several workers the batch is split into
// contiguous slices, each slice runs on its own model replica and thread, and
// the replica gradients are summed in worker order.
template <typename T>
class Trainer {
 public:
  Trainer(SpadeModel<T>& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), params_(model.trainable_parameters()), adam_(params_, cfg_),
        dropout_rng_(detail::mix_seed(cfg_.seed, 0xd1)) {
    cfg_.validate();
    for (std::size_t w = 1; w < cfg_.workers; ++w) {
      replicas_.emplace_back(model.config());
      copy_parameters(model_, replicas_.back());
      for (auto& layer : replicas_.back().layers()) layer.ssm.invalidate_kernels();
    }
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return adam_.steps_taken(); }
  double lr(std::size_t step) const { return learning_rate(cfg_, step); }
  double last_grad_norm() const { return last_norm_; }
  double last_clipped_norm() const { return last_clipped_; }

  // Returns the batch loss.
  double step(const Batch& batch) {
    const std::size_t s = adam_.steps_taken() + 1;
    const bool per_sequence = model_.config().mode == TaskMode::classify;
    const std::size_t sequences = batch.sequences();
    const std::size_t workers = std::min(cfg_.workers, sequences);
    double loss = 0;
    if (workers <= 1) {
      loss = run_slice(model_, batch, 1.0, dropout_rng_);
    } else {
      loss = parallel_step(batch, workers, s, per_sequence);
    }
    if (!std::isfinite(loss)) {
      clear_gradients();
      throw NumericError("non-finite training loss at step " + std::to_string(s));
    }
    last_norm_ = clip_grad_norm(params_, cfg_.clip);
    if (!std::isfinite(last_norm_)) {
      clear_gradients();
      throw NumericError("non-finite gradient norm at step " + std::to_string(s));
    }
    last_clipped_ = global_grad_norm(params_);
    adam_.step(learning_rate(cfg_, s));
    clear_gradients();
    if (model_.config().ssm_trainable)
      for (auto& layer : model_.layers()) layer.ssm.invalidate_kernels();
    return loss;
  }

 private:
  static void copy_parameters(const SpadeModel<T>& from, SpadeModel<T>& to) {
    const auto src = from.parameters();
    const auto dst = to.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto d = dst[i].tensor;
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.data().begin());
    }
  }

  // Forward and backward on one slice; `weight` rescales the slice loss so
  // that summed slice gradients equal the full-batch gradient.
  static double run_slice(const SpadeModel<T>& model, const Batch& b, double weight, std::mt19937_64& rng) {
    Tape<T> tape;
    ForwardContext ctx{true, &rng};
    auto logits = model.forward(b.tokens, b.segment, ctx);
    auto loss = cross_entropy(logits, b.targets);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) return value;
    tape.backward(weight == 1.0 ? loss : scale(loss, static_cast<T>(weight)));
    return value;
  }

  double parallel_step(const Batch& batch, std::size_t workers, std::size_t s, bool per_sequence) {
    const std::size_t sequences = batch.sequences();
    const std::size_t total = per_sequence ? sequences : detail::counted_targets(batch.targets);
    std::vector<Batch> slices;
    std::vector<double> weights, losses(workers, 0.0);
    for (std::size_t w = 0, first = 0; w < workers; ++w) {
      const std::size_t count = sequences / workers + (w < sequences % workers ? 1 : 0);
      slices.push_back(detail::sub_batch(batch, first, count, per_sequence));
      first += count;
      const std::size_t n = per_sequence ? count : detail::counted_targets(slices.back().targets);
      weights.push_back(static_cast<double>(n) / static_cast<double>(total));
    }
    for (auto& r : replicas_) copy_parameters(model_, r);
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
      try {
        if (weights[w] == 0.0) return;
        std::mt19937_64 rng(detail::mix_seed(cfg_.seed, s * 1024 + w));
        const auto& m = w == 0 ? model_ : replicas_[w - 1];
        losses[w] = run_slice(m, slices[w], weights[w], rng);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    std::vector<std::thread> threads;
    for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(work, w);
    work(0);
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    double loss = 0;
    for (std::size_t w = 0; w < workers; ++w) loss += weights[w] * losses[w];
    for (std::size_t w = 1; w < workers; ++w) {
      const auto rp = replicas_[w - 1].trainable_parameters();
      for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!rp[i].has_grad()) continue;
        detail::accumulate(params_[i], std::as_const(rp[i]).grad());
      }
    }
    return loss;
  }

  void clear_gradients() {
    for (auto& p : model_.parameters()) p.tensor.clear_grad();
    for (auto& r : replicas_)
      for (auto& p : r.parameters()) p.tensor.clear_grad();
  }

  SpadeModel<T>& model_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> params_;
  Adam<T> adam_;
  std::mt19937_64 dropout_rng_;
  std::vector<SpadeModel<T>> replicas_;
  double last_norm_ = 0, last_clipped_ = 0;
};

struct EvalResult {
  double loss = 0;        // mean cross-entropy over scored targets
  double accuracy = 0;    // fraction of scored targets predicted by argmax
  double perplexity = 0;  // exp(loss)
  std::size_t scored = 0;
  MetricKind metric = MetricKind::accuracy;

  double value() const { return metric == MetricKind::accuracy ? accuracy : perplexity; }
};

// Scores a batch without dropout and without recording a tape.
template <typename T>
EvalResult evaluate_batch(const SpadeModel<T>& model, const Batch& data, MetricKind metric,
                          std::size_t chunk_sequences = 16) {
  if (data.tokens.empty() || data.segment == 0) throw ConfigError("evaluation set is empty", "task.eval_samples");
  const bool per_sequence = model.config().mode == TaskMode::classify;
  NoGradGuard<T> no_grad;
  double total = 0;
  std::size_t scored = 0, correct = 0;
  const std::size_t sequences = data.sequences();
  for (std::size_t first = 0; first < sequences; first += chunk_sequences) {
    const auto part = detail::sub_batch(data, first, std::min(chunk_sequences, sequences - first), per_sequence);
    const auto logits = model.forward(part.tokens, part.segment);
    const std::size_t classes = logits.cols();
    for (std::size_t r = 0; r < part.targets.size(); ++r) {
      const int t = part.targets[r];
      if (t == kIgnoreTarget) continue;
      const T* row = logits.ptr() + r * classes;
      const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
      const double mx = static_cast<double>(row[best]);
      double z = 0;
      for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[t]);
      correct += best == static_cast<std::size_t>(t);
      ++scored;
    }
  }
  if (scored == 0) throw ConfigError("evaluation set has no scored targets", "task.eval_samples");
  EvalResult r;
  r.metric = metric;
  r.scored = scored;
  r.loss = total / static_cast<double>(scored);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  r.perplexity = std::exp(r.loss);
  return r;
}

template <typename T>
EvalResult evaluate(const SpadeModel<T>& model, const Task& task) {
  return evaluate_batch(model, task.eval_set(), task.metric());
}

struct MetricsRecord {
  std::size_t step = 0;
  double train_loss = 0;
  double eval_loss = 0;
  double eval_metric = 0;
  double seconds = 0;
  std::int64_t peak_bytes = 0;

  bool operator==(const MetricsRecord&) const = default;
};

inline constexpr const char* kMetricsHeader = "step,train_loss,eval_loss,eval_metric,seconds,peak_bytes";

inline std::string metrics_csv_row(const MetricsRecord& r) {
  return std::to_string(r.step) + "," + format_double(r.train_loss) + "," + format_double(r.eval_loss) + "," +
         format_double(r.eval_metric) + "," + format_double(r.seconds) + "," + std::to_string(r.peak_bytes);
}

inline nlohmann::json metrics_json(const MetricsRecord& r) {
  return {{"step", r.step},           {"train_loss", r.train_loss}, {"eval_loss", r.eval_loss},
          {"eval_metric", r.eval_metric}, {"seconds", r.seconds},   {"peak_bytes", r.peak_bytes}};
}

// Appends records to metrics.csv and metrics.jsonl as they arrive.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& dir)
      : csv_(dir / "metrics.csv", std::ios::trunc), jsonl_(dir / "metrics.jsonl", std::ios::trunc) {
    if (!csv_ || !jsonl_) throw ResourceError("cannot write metrics files under " + dir.string());
    csv_ << kMetricsHeader << "\n";
    csv_.flush();
  }

  void write(const MetricsRecord& r) {
    csv_ << metrics_csv_row(r) << "\n";
    jsonl_ << metrics_json(r).dump() << "\n";
    csv_.flush();
    jsonl_.flush();
  }

 private:
  std::ofstream csv_, jsonl_;
};

inline std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (trim(line) != kMetricsHeader) throw FormatError("unexpected metrics header in " + path.string());
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(trim(cell));
    if (f.size() != 6) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields");
    MetricsRecord r;
    r.step = static_cast<std::size_t>(parse_uint("step", f[0]));
    r.train_loss = parse_double("train_loss", f[1]);
    r.eval_loss = parse_double("eval_loss", f[2]);
    r.eval_metric = parse_double("eval_metric", f[3]);
    r.seconds = parse_double("seconds", f[4]);
    r.peak_bytes = static_cast<std::int64_t>(parse_uint("peak_bytes", f[5]));
    out.push_back(r);
  }
  return out;
}

struct TrainResult {
  std::vector<MetricsRecord> records;
  EvalResult final_eval;
  std::optional<std::filesystem::path> checkpoint;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics and checkpoint; nothing is written when empty
  std::function<void(const MetricsRecord&)> on_record;
};

// Trains in place. Metrics are recorded every eval_every steps and after the
// last step; each record also refreshes the checkpoint, which is therefore
// always the last state known to be finite.
template <typename T>
TrainResult train(SpadeModel<T>& model, const Task& task, const TrainConfig& cfg, const TrainOptions& options = {}) {
  cfg.validate();
  if (model.config().mode == TaskMode::lm && model.config().vocab < task.vocab()) {
    throw ConfigError("model vocabulary " + std::to_string(model.config().vocab) + " is smaller than the task's " +
                          std::to_string(task.vocab()),
                      "model.vocab");
  }
  if (model.config().mode == TaskMode::classify) {
    throw ConfigError("the built-in tasks are next-token tasks; use mode = lm", "model.mode");
  }
  if (task.eval_set().tokens.empty()) throw ConfigError("evaluation set is empty", "task.eval_samples");

  std::optional<MetricsWriter> writer;
  std::optional<std::filesystem::path> ckpt;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    writer.emplace(*options.out_dir);
    ckpt = *options.out_dir / "checkpoint.spade";
  }
  std::optional<std::size_t> last_good;

  Trainer<T> trainer(model, cfg);
  std::mt19937_64 data_rng(detail::mix_seed(cfg.seed, 0xda7a));
  const auto start = std::chrono::steady_clock::now();
  const auto baseline = MemoryTracker::live_bytes();
  MemoryTracker::reset_peak();

  TrainResult result;
  double loss_sum = 0;
  std::size_t loss_count = 0;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    const auto batch = task.sample(cfg.batch, data_rng);
    double loss;
    try {
      loss = trainer.step(batch);
    } catch (const NumericError& e) {
      std::string where = "no checkpoint was written";
      if (ckpt && last_good) where = "last good checkpoint " + ckpt->string() + " (step " + std::to_string(*last_good) + ")";
      else if (last_good) where = "last good state was step " + std::to_string(*last_good);
      throw NumericError(std::string(e.what()) + "; " + where);
    }
    loss_sum += loss;
    ++loss_count;
    if (s == cfg.steps || (cfg.eval_every > 0 && s % cfg.eval_every == 0)) {
      const auto ev = evaluate(model, task);
      MetricsRecord r;
      r.step = s;
      r.train_loss = loss_sum / static_cast<double>(loss_count);
      r.eval_loss = ev.loss;
      r.eval_metric = ev.value();
      r.seconds = cfg.record_time
                      ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
                      : 0.0;
      r.peak_bytes = MemoryTracker::peak_bytes() - baseline;
      loss_sum = 0;
      loss_count = 0;
      if (!std::isfinite(ev.loss)) {
        throw NumericError("non-finite evaluation loss at step " + std::to_string(s) +
                           (ckpt && last_good ? "; last good checkpoint " + ckpt->string() + " (step " +
                                                    std::to_string(*last_good) + ")"
                                              : std::string()));
      }
      if (ckpt) save_checkpoint(model, *ckpt, {{"step", std::to_string(s)}});
      last_good = s;
      if (writer) writer->write(r);
      if (options.on_record) options.on_record(r);
      result.records.push_back(r);
      if (s == cfg.steps) result.final_eval = ev;
    }
  }
  result.checkpoint = ckpt;
  return result;
}

}  // namespace spade

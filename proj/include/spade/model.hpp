#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spade/attention.hpp"
#include "spade/ops.hpp"
#include "spade/parse.hpp"
#include "spade/ssm.hpp"
#include "spade/tensor.hpp"

namespace spade {

// global: attention and SSM fused through W_combine. local: pre-norm
// attention block. ssm: SSM block without attention (the S4 baseline).
enum class LayerKind { global, local, ssm };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::global: return "global";
    case LayerKind::local: return "local";
    case LayerKind::ssm: return "ssm";
  }
  return "?";
}

enum class Architecture { spade, local, ssm_only };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::spade: return "spade";
    case Architecture::local: return "local";
    case Architecture::ssm_only: return "ssm_only";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s, const std::string& key = "model.architecture") {
  if (s == "spade") return Architecture::spade;
  if (s == "local") return Architecture::local;
  if (s == "ssm_only") return Architecture::ssm_only;
  throw ConfigError("unknown architecture '" + s + "' (expected spade, local or ssm_only)", key);
}

enum class TaskMode { lm, classify };

inline std::string to_string(TaskMode m) { return m == TaskMode::lm ? "lm" : "classify"; }

inline TaskMode parse_mode(const std::string& s, const std::string& key = "model.mode") {
  if (s == "lm") return TaskMode::lm;
  if (s == "classify") return TaskMode::classify;
  throw ConfigError("unknown mode '" + s + "' (expected lm or classify)", key);
}

// Which layers of a SPADE stack are global: the bottom k, the top k, all or none.
struct Placement {
  enum class Kind { bottom, top, all, none };
  Kind kind = Kind::bottom;
  std::size_t k = 1;

  static Placement bottom(std::size_t k) { return {Kind::bottom, k}; }
  static Placement top(std::size_t k) { return {Kind::top, k}; }
  static Placement all() { return {Kind::all, 0}; }
  static Placement none() { return {Kind::none, 0}; }

  // Accepts b-k, bottom_k, top-k, top_k, all, none.
  static Placement parse(const std::string& s, const std::string& key = "model.placement") {
    if (s == "all") return all();
    if (s == "none") return none();
    auto count = [&](std::size_t prefix) {
      return parse_positive(key, s.substr(prefix));
    };
    if (s.rfind("b-", 0) == 0) return bottom(count(2));
    if (s.rfind("bottom_", 0) == 0) return bottom(count(7));
    if (s.rfind("top-", 0) == 0) return top(count(4));
    if (s.rfind("top_", 0) == 0) return top(count(4));
    throw ConfigError("unknown placement '" + s + "' (expected b-k, top-k, all or none)", key);
  }

  std::string name() const {
    switch (kind) {
      case Kind::bottom: return "b-" + std::to_string(k);
      case Kind::top: return "top-" + std::to_string(k);
      case Kind::all: return "all";
      case Kind::none: return "none";
    }
    return "?";
  }

  std::vector<LayerKind> layer_kinds(std::size_t depth) const {
    if ((kind == Kind::bottom || kind == Kind::top) && k > depth) {
      throw ConfigError("placement " + name() + " needs " + std::to_string(k) + " global layers but depth is " +
                            std::to_string(depth),
                        "model.placement");
    }
    std::vector<LayerKind> kinds(depth, LayerKind::local);
    for (std::size_t i = 0; i < depth; ++i) {
      const bool global = kind == Kind::all || (kind == Kind::bottom && i < k) || (kind == Kind::top && i + k >= depth);
      if (global) kinds[i] = LayerKind::global;
    }
    return kinds;
  }

  bool operator==(const Placement&) const = default;
};

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  LocalityPattern pattern = LocalityPattern::windowed(8, true);
  Architecture architecture = Architecture::spade;
  Placement placement = Placement::bottom(1);
  std::size_t ssm_state = 64;
  bool ssm_trainable = false;
  std::size_t ffn_hidden = 0;  // 0 means 4d
  double dropout = 0.1;
  TaskMode mode = TaskMode::lm;
  std::size_t classes = 2;
  bool tie_embeddings = true;
  std::uint64_t seed = 0;

  std::size_t hidden() const { return ffn_hidden == 0 ? 4 * d : ffn_hidden; }

  std::vector<LayerKind> kinds() const {
    switch (architecture) {
      case Architecture::spade: return placement.layer_kinds(depth);
      case Architecture::local: return std::vector<LayerKind>(depth, LayerKind::local);
      case Architecture::ssm_only: return std::vector<LayerKind>(depth, LayerKind::ssm);
    }
    return {};
  }

  void validate() const {
    if (vocab == 0) throw ConfigError("vocabulary size must be positive", "model.vocab");
    if (d == 0) throw ConfigError("model width must be positive", "model.d");
    if (depth == 0) throw ConfigError("depth must be positive", "model.depth");
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("model width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads",
                        "model.heads");
    }
    if (ssm_state == 0) throw ConfigError("SSM state size must be positive", "model.ssm_state");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)", "model.dropout");
    if (mode == TaskMode::classify && classes < 2) throw ConfigError("need at least two classes", "model.classes");
    if (mode == TaskMode::lm && !pattern.causal) {
      throw ConfigError("language modelling needs a causal attention pattern", "model.causal");
    }
    try {
      pattern.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), "model." + e.key());
    }
    kinds();
  }

  bool operator==(const ModelConfig&) const = default;
};

// key=value view of a ModelConfig, shared by the checkpoint metadata and the
// [model] section of run configs.
inline std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& c) {
  return {{"vocab", std::to_string(c.vocab)},
          {"d", std::to_string(c.d)},
          {"depth", std::to_string(c.depth)},
          {"heads", std::to_string(c.heads)},
          {"architecture", to_string(c.architecture)},
          {"pattern", to_string(c.pattern.kind)},
          {"window", std::to_string(c.pattern.window)},
          {"chunk", std::to_string(c.pattern.chunk)},
          {"causal", format_bool(c.pattern.causal)},
          {"placement", c.placement.name()},
          {"ssm_state", std::to_string(c.ssm_state)},
          {"ssm_trainable", format_bool(c.ssm_trainable)},
          {"ffn_hidden", std::to_string(c.ffn_hidden)},
          {"dropout", format_double(c.dropout)},
          {"mode", to_string(c.mode)},
          {"classes", std::to_string(c.classes)},
          {"tie_embeddings", format_bool(c.tie_embeddings)},
          {"seed", std::to_string(c.seed)}};
}

// Returns false when `key` is not a model key.
inline bool set_model_config_entry(ModelConfig& c, const std::string& key, const std::string& value,
                                   const std::string& prefix = "model.") {
  const std::string full = prefix + key;
  if (key == "vocab") c.vocab = parse_positive(full, value);
  else if (key == "d") c.d = parse_positive(full, value);
  else if (key == "depth") c.depth = parse_positive(full, value);
  else if (key == "heads") c.heads = parse_positive(full, value);
  else if (key == "architecture") c.architecture = parse_architecture(value, full);
  else if (key == "pattern") {
    try {
      c.pattern.kind = parse_pattern_kind(value);
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), full);
    }
  } else if (key == "window") c.pattern.window = parse_positive(full, value);
  else if (key == "chunk") c.pattern.chunk = parse_positive(full, value);
  else if (key == "causal") c.pattern.causal = parse_bool(full, value);
  else if (key == "placement") c.placement = Placement::parse(value, full);
  else if (key == "ssm_state") c.ssm_state = parse_positive(full, value);
  else if (key == "ssm_trainable") c.ssm_trainable = parse_bool(full, value);
  else if (key == "ffn_hidden") c.ffn_hidden = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "dropout") c.dropout = parse_double(full, value);
  else if (key == "mode") c.mode = parse_mode(value, full);
  else if (key == "classes") c.classes = parse_positive(full, value);
  else if (key == "tie_embeddings") c.tie_embeddings = parse_bool(full, value);
  else if (key == "seed") c.seed = parse_uint(full, value);
  else return false;
  return true;
}

// Closed-form parameter count, including frozen SSM tensors.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d, h = c.hidden(), ds = c.ssm_state;
  const std::size_t ffn = d * h + h + h * d + d;
  const std::size_t ssm = ds * ds + 2 * ds + d * ds + d;
  std::size_t total = c.vocab * d + 2 * d;
  for (auto kind : c.kinds()) {
    total += 4 * d + ffn;
    switch (kind) {
      case LayerKind::global: total += 4 * d * d + ssm + 4 * d + 2 * d * d; break;
      case LayerKind::local: total += 4 * d * d; break;
      case LayerKind::ssm: total += ssm + d + d * d; break;
    }
  }
  if (c.mode == TaskMode::lm && !c.tie_embeddings) total += c.vocab * d;
  if (c.mode == TaskMode::classify) total += d * c.classes + c.classes;
  return total;
}

// Widens the FFN of `baseline` so its parameter count is as close as possible
// to `target`; throws if that cannot get within `tolerance` (relative).
inline ModelConfig match_parameter_count(ModelConfig baseline, std::size_t target, double tolerance = 0.05) {
  baseline.ffn_hidden = 1;
  const auto base = static_cast<double>(parameter_count(baseline));
  const double per_unit = static_cast<double>(baseline.depth * (2 * baseline.d + 1));
  const double extra = (static_cast<double>(target) - base) / per_unit;
  baseline.ffn_hidden = static_cast<std::size_t>(std::max(1.0, std::round(1.0 + extra)));
  const auto got = static_cast<double>(parameter_count(baseline));
  if (std::abs(got - static_cast<double>(target)) > tolerance * static_cast<double>(target)) {
    throw ConfigError("cannot match " + std::to_string(target) + " parameters by widening the FFN (closest " +
                          std::to_string(static_cast<std::size_t>(got)) + ")",
                      "model.ffn_hidden");
  }
  return baseline;
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct FeedForward {
  Tensor<T> W1, b1, W2, b2;  // [d x h], [h], [h x d], [d]
};

template <typename T>
struct Layer {
  LayerKind kind = LayerKind::local;
  LayerNormParams<T> ln_in, ln_ffn;
  LayerNormParams<T> ln_local, ln_global;  // global only
  AttentionParams<T> attn;                  // global and local
  ContinuousSSM<T> ssm;                     // global and ssm
  Tensor<T> W_combine;                      // global only, [d x 2d]
  Tensor<T> D, W_out;                       // ssm only: skip [d], output [d x d]
  FeedForward<T> ffn;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;  // shares storage with the model
  bool trainable = true;
};

struct ForwardContext {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout draws; required when train is set
};

template <typename T>
class SpadeModel {
 public:
  explicit SpadeModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = cfg_.d;
    embedding_ = normal({cfg_.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    const auto kinds = cfg_.kinds();
    const T out_scale = static_cast<T>(1.0 / std::sqrt(2.0 * static_cast<double>(kinds.size())));
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      Layer<T> layer;
      layer.kind = kinds[i];
      layer.ln_in = norm_params();
      layer.ln_ffn = norm_params();
      if (layer.kind != LayerKind::ssm) layer.attn = init_attention<T>(d, cfg_.heads, rng, out_scale);
      if (layer.kind != LayerKind::local) {
        layer.ssm = hippo_init<T>(cfg_.ssm_state, d, cfg_.seed * 7919 + i + 1, cfg_.ssm_trainable);
      }
      if (layer.kind == LayerKind::global) {
        layer.ln_local = norm_params();
        layer.ln_global = norm_params();
        layer.W_combine = normal({d, 2 * d}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng);
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t c = d; c < 2 * d; ++c) layer.W_combine(r, c) *= T(0.1);
      }
      if (layer.kind == LayerKind::ssm) {
        layer.D = Tensor<T>({d}, T(1)).set_requires_grad(true);
        layer.W_out = normal({d, d}, static_cast<double>(out_scale) / std::sqrt(static_cast<double>(d)), rng);
      }
      const std::size_t h = cfg_.hidden();
      layer.ffn.W1 = normal({d, h}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      layer.ffn.b1 = Tensor<T>({h}).set_requires_grad(true);
      layer.ffn.W2 = normal({h, d}, static_cast<double>(out_scale) / std::sqrt(static_cast<double>(h)), rng);
      layer.ffn.b2 = Tensor<T>({d}).set_requires_grad(true);
      layers_.push_back(std::move(layer));
    }
    ln_final_ = norm_params();
    if (cfg_.mode == TaskMode::lm && !cfg_.tie_embeddings) {
      head_ = normal({cfg_.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    }
    if (cfg_.mode == TaskMode::classify) {
      head_ = normal({d, cfg_.classes}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      head_bias_ = Tensor<T>({cfg_.classes}).set_requires_grad(true);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  Tensor<T>& embedding_table() { return embedding_; }

  // Every tensor of the model in a fixed declaration order; this order is the
  // checkpoint layout.
  std::vector<NamedParameter<T>> parameters() const {
    std::vector<NamedParameter<T>> out;
    auto add = [&](std::string name, const Tensor<T>& t, bool trainable = true) {
      out.push_back({std::move(name), t, trainable});
    };
    add("embedding", embedding_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& L = layers_[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      add(p + "ln_in.gain", L.ln_in.gain);
      add(p + "ln_in.bias", L.ln_in.bias);
      if (L.kind != LayerKind::ssm) {
        add(p + "attn.Wq", L.attn.Wq);
        add(p + "attn.Wk", L.attn.Wk);
        add(p + "attn.Wv", L.attn.Wv);
        add(p + "attn.Wo", L.attn.Wo);
      }
      if (L.kind != LayerKind::local) {
        add(p + "ssm.A", L.ssm.A, false);
        add(p + "ssm.B", L.ssm.B, false);
        add(p + "ssm.P", L.ssm.P, false);
        add(p + "ssm.C", L.ssm.C, L.ssm.trainable);
        add(p + "ssm.log_delta", L.ssm.log_delta, L.ssm.trainable);
      }
      if (L.kind == LayerKind::global) {
        add(p + "ln_local.gain", L.ln_local.gain);
        add(p + "ln_local.bias", L.ln_local.bias);
        add(p + "ln_global.gain", L.ln_global.gain);
        add(p + "ln_global.bias", L.ln_global.bias);
        add(p + "W_combine", L.W_combine);
      }
      if (L.kind == LayerKind::ssm) {
        add(p + "D", L.D);
        add(p + "W_out", L.W_out);
      }
      add(p + "ln_ffn.gain", L.ln_ffn.gain);
      add(p + "ln_ffn.bias", L.ln_ffn.bias);
      add(p + "ffn.W1", L.ffn.W1);
      add(p + "ffn.b1", L.ffn.b1);
      add(p + "ffn.W2", L.ffn.W2);
      add(p + "ffn.b2", L.ffn.b2);
    }
    add("ln_final.gain", ln_final_.gain);
    add("ln_final.bias", ln_final_.bias);
    if (head_.defined()) add("head", head_);
    if (head_bias_.defined()) add("head.bias", head_bias_);
    return out;
  }

  std::vector<Tensor<T>> trainable_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& p : parameters())
      if (p.trainable) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  // Final hidden states, [(B*segment) x d], after the final layer norm.
  Tensor<T> hidden(const std::vector<int>& tokens, std::size_t segment, const ForwardContext& ctx = {}) const {
    if (segment == 0 || tokens.size() % segment != 0) {
      throw DimensionError(std::to_string(tokens.size()) + " tokens do not split into sequences of " +
                           std::to_string(segment));
    }
    Tensor<T> x = embedding(embedding_, tokens);
    for (const auto& layer : layers_) x = layer_forward(layer, x, segment, ctx);
    return ln(x, ln_final_);
  }

  // Next-token logits, [(B*segment) x vocab].
  Tensor<T> forward_lm(const std::vector<int>& tokens, std::size_t segment, const ForwardContext& ctx = {}) const {
    if (cfg_.mode != TaskMode::lm) throw ConfigError("model was built for classification", "model.mode");
    const auto h = hidden(tokens, segment, ctx);
    return matmul_nt(h, cfg_.tie_embeddings ? embedding_ : head_);
  }

  // Class logits from mean-pooled final states, [B x classes].
  Tensor<T> forward_classify(const std::vector<int>& tokens, std::size_t segment,
                             const ForwardContext& ctx = {}) const {
    if (cfg_.mode != TaskMode::classify) throw ConfigError("model was built for language modelling", "model.mode");
    return add_bias(matmul(mean_pool_segments(hidden(tokens, segment, ctx), segment), head_), head_bias_);
  }

  Tensor<T> forward(const std::vector<int>& tokens, std::size_t segment, const ForwardContext& ctx = {}) const {
    return cfg_.mode == TaskMode::lm ? forward_lm(tokens, segment, ctx) : forward_classify(tokens, segment, ctx);
  }

  Tensor<T> layer_forward(const Layer<T>& layer, const Tensor<T>& x, std::size_t segment,
                          const ForwardContext& ctx = {}) const {
    const auto h = ln(x, layer.ln_in);
    Tensor<T> xa;
    switch (layer.kind) {
      case LayerKind::global: {
        const auto local = drop(local_attention(h, layer.attn, cfg_.pattern, segment), ctx);
        const auto global = ssm_forward(layer.ssm, h, segment);
        xa = add(matmul_nt(concat_cols(ln(local, layer.ln_local), ln(global, layer.ln_global)), layer.W_combine), x);
        break;
      }
      case LayerKind::local:
        xa = add(drop(local_attention(h, layer.attn, cfg_.pattern, segment), ctx), x);
        break;
      case LayerKind::ssm: {
        const auto s = add(ssm_forward(layer.ssm, h, segment), scale_cols(h, layer.D));
        xa = add(drop(matmul(gelu(s), layer.W_out), ctx), x);
        break;
      }
    }
    return add(feed_forward(layer.ffn, ln(xa, layer.ln_ffn), ctx), xa);
  }

  Tensor<T> feed_forward(const FeedForward<T>& f, const Tensor<T>& x, const ForwardContext& ctx = {}) const {
    return add_bias(matmul(drop(gelu(add_bias(matmul(x, f.W1), f.b1)), ctx), f.W2), f.b2);
  }

 private:
  static Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t.set_requires_grad(true);
  }

  LayerNormParams<T> norm_params() const {
    return {Tensor<T>({cfg_.d}, T(1)).set_requires_grad(true), Tensor<T>({cfg_.d}).set_requires_grad(true)};
  }

  static Tensor<T> ln(const Tensor<T>& x, const LayerNormParams<T>& p) { return layer_norm(x, p.gain, p.bias); }

  Tensor<T> drop(const Tensor<T>& x, const ForwardContext& ctx) const {
    if (!ctx.train || cfg_.dropout <= 0.0) return x;
    if (ctx.rng == nullptr) throw Error("training forward pass needs a dropout generator");
    return dropout(x, static_cast<T>(cfg_.dropout), *ctx.rng);
  }

  ModelConfig cfg_;
  Tensor<T> embedding_;
  std::vector<Layer<T>> layers_;
  LayerNormParams<T> ln_final_;
  Tensor<T> head_, head_bias_;
};

// Same configuration and seed, SPADE stack with the given global placement.
template <typename T>
SpadeModel<T> configure_globals(const SpadeModel<T>& model, const Placement& placement) {
  ModelConfig cfg = model.config();
  cfg.architecture = Architecture::spade;
  cfg.placement = placement;
  return SpadeModel<T>(cfg);
}

}  // namespace spade

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <new>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spade/train.hpp"

namespace spade {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(value)) out.push_back(parse_positive(key, item));
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one value", key);
  return out;
}

inline std::string format_size_list(const std::vector<std::size_t>& v) {
  std::vector<std::string> s;
  for (auto x : v) s.push_back(std::to_string(x));
  return join_list(s);
}

// ------------------------------------------------------------------ scaling

inline const std::vector<std::string>& scaling_variant_names() {
  static const std::vector<std::string> names{"full", "window", "chunk", "spade_window", "spade_chunk", "ssm_only"};
  return names;
}

struct BenchConfig {
  std::vector<std::string> variants = scaling_variant_names();
  std::vector<std::size_t> lengths{512, 1024, 2048, 4096, 8192};
  std::size_t d = 128;
  std::size_t depth = 4;
  std::size_t heads = 2;
  std::size_t window = 128;
  std::size_t chunk = 128;
  std::size_t ssm_state = 64;
  std::size_t vocab = 256;
  std::size_t batch = 1;
  std::size_t warmup_reps = 2;
  std::size_t reps = 5;
  std::int64_t memory_limit = 0;  // bytes of tensor memory; 0 = unlimited

  void validate() const {
    if (variants.empty()) throw ConfigError("no variants to benchmark", "bench.variants");
    for (const auto& v : variants) {
      if (std::find(scaling_variant_names().begin(), scaling_variant_names().end(), v) == scaling_variant_names().end())
        throw ConfigError("unknown variant '" + v + "' (expected full, window, chunk, spade_window, spade_chunk or ssm_only)",
                          "bench.variants");
    }
    if (lengths.empty()) throw ConfigError("no lengths to benchmark", "bench.lengths");
    if (!std::is_sorted(lengths.begin(), lengths.end())) throw ConfigError("lengths must be ascending", "bench.lengths");
    if (reps < 5) throw ConfigError("at least 5 timed repetitions are required", "bench.reps");
    if (memory_limit < 0) throw ConfigError("memory limit must be >= 0", "bench.memory_limit");
  }

  bool operator==(const BenchConfig&) const = default;
};

inline std::vector<std::pair<std::string, std::string>> bench_config_entries(const BenchConfig& c) {
  return {{"variants", join_list(c.variants)},
          {"lengths", format_size_list(c.lengths)},
          {"d", std::to_string(c.d)},
          {"depth", std::to_string(c.depth)},
          {"heads", std::to_string(c.heads)},
          {"window", std::to_string(c.window)},
          {"chunk", std::to_string(c.chunk)},
          {"ssm_state", std::to_string(c.ssm_state)},
          {"vocab", std::to_string(c.vocab)},
          {"batch", std::to_string(c.batch)},
          {"warmup_reps", std::to_string(c.warmup_reps)},
          {"reps", std::to_string(c.reps)},
          {"memory_limit", std::to_string(c.memory_limit)}};
}

inline bool set_bench_config_entry(BenchConfig& c, const std::string& key, const std::string& value,
                                   const std::string& prefix = "bench.") {
  const std::string full = prefix + key;
  if (key == "variants") c.variants = split_list(value);
  else if (key == "lengths") c.lengths = parse_size_list(full, value);
  else if (key == "d") c.d = parse_positive(full, value);
  else if (key == "depth") c.depth = parse_positive(full, value);
  else if (key == "heads") c.heads = parse_positive(full, value);
  else if (key == "window") c.window = parse_positive(full, value);
  else if (key == "chunk") c.chunk = parse_positive(full, value);
  else if (key == "ssm_state") c.ssm_state = parse_positive(full, value);
  else if (key == "vocab") c.vocab = parse_positive(full, value);
  else if (key == "batch") c.batch = parse_positive(full, value);
  else if (key == "warmup_reps") c.warmup_reps = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "reps") c.reps = parse_positive(full, value);
  else if (key == "memory_limit") c.memory_limit = static_cast<std::int64_t>(parse_uint(full, value));
  else return false;
  return true;
}

inline ModelConfig scaling_variant_config(const std::string& variant, const BenchConfig& b, std::uint64_t seed = 0) {
  ModelConfig c;
  c.vocab = b.vocab;
  c.d = b.d;
  c.depth = b.depth;
  c.heads = b.heads;
  c.ssm_state = b.ssm_state;
  c.dropout = 0.0;
  c.seed = seed;
  if (variant == "full") {
    c.architecture = Architecture::local;
    c.pattern = LocalityPattern::full(true);
  } else if (variant == "window" || variant == "spade_window") {
    c.architecture = variant == "window" ? Architecture::local : Architecture::spade;
    c.pattern = LocalityPattern::windowed(b.window, true);
  } else if (variant == "chunk" || variant == "spade_chunk") {
    c.architecture = variant == "chunk" ? Architecture::local : Architecture::spade;
    c.pattern = LocalityPattern::chunked(b.chunk, true);
  } else if (variant == "ssm_only") {
    c.architecture = Architecture::ssm_only;
  } else {
    throw ConfigError("unknown variant '" + variant + "'", "bench.variants");
  }
  return c;
}

struct ScalingRow {
  std::string variant;
  std::size_t length = 0;
  double seconds = 0;  // mean forward+backward time per repetition
  std::size_t reps = 0;
  std::int64_t peak_bytes = 0;
  bool ok = true;
  std::string error;

  bool operator==(const ScalingRow&) const = default;
};

// Restores the tensor memory limit on scope exit.
class MemoryLimitScope {
 public:
  explicit MemoryLimitScope(std::int64_t limit) : saved_(MemoryTracker::limit()) { MemoryTracker::set_limit(limit); }
  ~MemoryLimitScope() { MemoryTracker::set_limit(saved_); }
  MemoryLimitScope(const MemoryLimitScope&) = delete;
  MemoryLimitScope& operator=(const MemoryLimitScope&) = delete;

 private:
  std::int64_t saved_;
};

// Times warmup_reps untimed and reps timed forward+backward passes on one
// random batch. Peak bytes are the largest tensor high-water mark above the
// memory already live before the pass.
template <typename T>
ScalingRow time_forward_backward(const SpadeModel<T>& model, std::size_t length, const BenchConfig& b,
                                 std::uint64_t seed = 0) {
  ScalingRow row;
  row.length = length;
  std::mt19937_64 rng(detail::mix_seed(seed, length));
  std::vector<int> tokens(b.batch * length), targets(b.batch * length);
  for (auto& t : tokens) t = static_cast<int>(rng() % model.config().vocab);
  for (auto& t : targets) t = static_cast<int>(rng() % model.config().vocab);
  const auto params = model.parameters();
  auto pass = [&] {
    Tape<T> tape;
    auto loss = cross_entropy(model.forward_lm(tokens, length), targets);
    tape.backward(loss);
  };
  auto clear = [&] {
    for (auto p : params) p.tensor.clear_grad();
  };
  try {
    MemoryLimitScope limit(b.memory_limit);
    for (std::size_t i = 0; i < b.warmup_reps; ++i) {
      pass();
      clear();
    }
    double total = 0;
    for (std::size_t i = 0; i < b.reps; ++i) {
      const auto live = MemoryTracker::live_bytes();
      MemoryTracker::reset_peak();
      const auto start = std::chrono::steady_clock::now();
      pass();
      total += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      row.peak_bytes = std::max(row.peak_bytes, MemoryTracker::peak_bytes() - live);
      clear();
    }
    row.reps = b.reps;
    row.seconds = total / static_cast<double>(b.reps);
  } catch (const ResourceError& e) {
    clear();
    row.ok = false;
    row.error = e.what();
  } catch (const std::bad_alloc&) {
    clear();
    row.ok = false;
    row.error = "out of memory";
  }
  return row;
}

// Least-squares slope of log(seconds) against log(length) over successful rows.
inline std::optional<double> fit_exponent(const std::vector<ScalingRow>& rows) {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    if (!r.ok || r.seconds <= 0) continue;
    x.push_back(std::log(static_cast<double>(r.length)));
    y.push_back(std::log(r.seconds));
  }
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
  if (sxx == 0) return std::nullopt;
  return sxy / sxx;
}

struct ScalingResult {
  std::vector<ScalingRow> rows;
  std::map<std::string, std::optional<double>> exponents;

  std::vector<ScalingRow> variant_rows(const std::string& v) const {
    std::vector<ScalingRow> out;
    for (const auto& r : rows)
      if (r.variant == v) out.push_back(r);
    return out;
  }
  const ScalingRow* find(const std::string& v, std::size_t length) const {
    for (const auto& r : rows)
      if (r.variant == v && r.length == length) return &r;
    return nullptr;
  }
};

inline constexpr const char* kScalingHeader = "variant,length,seconds,reps,peak_bytes,status";

inline void write_scaling_csv(const std::vector<ScalingRow>& rows, std::ostream& out) {
  out << kScalingHeader << "\n";
  for (const auto& r : rows) {
    out << r.variant << "," << r.length << "," << (r.ok ? format_double(r.seconds) : "nan") << "," << r.reps << ","
        << r.peak_bytes << "," << (r.ok ? "ok" : "failed") << "\n";
  }
}

inline std::vector<ScalingRow> read_scaling_csv(std::istream& in) {
  std::string line;
  std::getline(in, line);
  if (trim(line) != kScalingHeader) throw FormatError("unexpected scaling.csv header");
  std::vector<ScalingRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split_list(line);
    if (f.size() != 6) throw FormatError("scaling.csv row has " + std::to_string(f.size()) + " fields");
    ScalingRow r;
    r.variant = f[0];
    r.length = static_cast<std::size_t>(parse_uint("length", f[1]));
    r.ok = f[5] == "ok";
    r.seconds = r.ok ? parse_double("seconds", f[2]) : 0.0;
    r.reps = static_cast<std::size_t>(parse_uint("reps", f[3]));
    r.peak_bytes = static_cast<std::int64_t>(parse_uint("peak_bytes", f[4]));
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json exponents_json(const ScalingResult& result) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [variant, e] : result.exponents) {
    std::size_t points = 0;
    for (const auto& r : result.variant_rows(variant)) points += r.ok;
    j[variant] = {{"exponent", e ? nlohmann::json(*e) : nlohmann::json(nullptr)}, {"points", points}};
  }
  return j;
}

// Rows go to `progress` as they complete; failing lengths are recorded and
// the sweep continues with the next one.
template <typename T>
ScalingResult bench_scaling(const BenchConfig& b, std::uint64_t seed = 0,
                            const std::function<void(const ScalingRow&)>& progress = {}) {
  b.validate();
  ScalingResult result;
  for (const auto& variant : b.variants) {
    SpadeModel<T> model(scaling_variant_config(variant, b, seed));
    std::vector<ScalingRow> rows;
    for (auto L : b.lengths) {
      auto row = time_forward_backward(model, L, b, seed);
      row.variant = variant;
      if (progress) progress(row);
      rows.push_back(row);
      result.rows.push_back(row);
    }
    result.exponents[variant] = fit_exponent(rows);
  }
  return result;
}

inline void write_scaling_outputs(const ScalingResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "scaling.csv");
  write_scaling_csv(r.rows, csv);
  std::ofstream js(dir / "exponents.json");
  js << exponents_json(r).dump(2) << "\n";
  if (!csv || !js) throw ResourceError("cannot write benchmark outputs under " + dir.string());
}

// ---------------------------------------------------------------- ablation

struct AblateConfig {
  std::vector<std::string> placements{"b-1", "b-4", "b-8", "all", "top-1"};
  std::size_t seeds = 3;

  void validate() const {
    if (placements.empty()) throw ConfigError("no placements to compare", "ablate.placements");
    for (const auto& p : placements) Placement::parse(p, "ablate.placements");
    if (seeds == 0) throw ConfigError("need at least one seed", "ablate.seeds");
  }
  bool operator==(const AblateConfig&) const = default;
};

inline std::vector<std::pair<std::string, std::string>> ablate_config_entries(const AblateConfig& c) {
  return {{"placements", join_list(c.placements)}, {"seeds", std::to_string(c.seeds)}};
}

inline bool set_ablate_config_entry(AblateConfig& c, const std::string& key, const std::string& value,
                                    const std::string& prefix = "ablate.") {
  const std::string full = prefix + key;
  if (key == "placements") c.placements = split_list(value);
  else if (key == "seeds") c.seeds = parse_positive(full, value);
  else return false;
  return true;
}

struct RunOutcome {
  std::uint64_t seed = 0;
  double metric = 0;
  double loss = 0;
  bool operator==(const RunOutcome&) const = default;
};

struct AblationRow {
  std::string placement;
  std::vector<RunOutcome> runs;

  double mean_metric() const {
    double s = 0;
    for (const auto& r : runs) s += r.metric;
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }
  bool operator==(const AblationRow&) const = default;
};

// Builds, trains and scores one model; seed k of a study uses seed base + k
// for both initialization and data order.
template <typename T>
RunOutcome train_and_score(ModelConfig model_cfg, const Task& task, TrainConfig train_cfg, std::uint64_t seed,
                           const std::optional<std::filesystem::path>& dir = std::nullopt) {
  model_cfg.seed = seed;
  train_cfg.seed = seed;
  SpadeModel<T> model(model_cfg);
  const auto result = train(model, task, train_cfg, {dir, {}});
  return {seed, result.final_eval.value(), result.final_eval.loss};
}

template <typename T>
std::vector<AblationRow> ablate_placement(const ModelConfig& base, const Task& task, const TrainConfig& train_cfg,
                                          const AblateConfig& a, std::uint64_t seed,
                                          const std::optional<std::filesystem::path>& dir = std::nullopt) {
  a.validate();
  std::vector<AblationRow> rows;
  for (const auto& name : a.placements) {
    ModelConfig cfg = base;
    cfg.architecture = Architecture::spade;
    cfg.placement = Placement::parse(name, "ablate.placements");
    cfg.validate();
    AblationRow row{cfg.placement.name(), {}};
    for (std::size_t k = 0; k < a.seeds; ++k) {
      std::optional<std::filesystem::path> run_dir;
      if (dir) run_dir = *dir / "runs" / (row.placement + "_seed" + std::to_string(seed + k));
      row.runs.push_back(train_and_score<T>(cfg, task, train_cfg, seed + k, run_dir));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out) {
  out << "placement,seeds,mean_metric";
  const std::size_t seeds = rows.empty() ? 0 : rows.front().runs.size();
  for (std::size_t k = 0; k < seeds; ++k) out << ",metric_seed" << k;
  out << "\n";
  for (const auto& r : rows) {
    out << r.placement << "," << r.runs.size() << "," << format_double(r.mean_metric());
    for (const auto& run : r.runs) out << "," << format_double(run.metric);
    out << "\n";
  }
}

// ------------------------------------------------------------------- sweep

struct SweepConfig {
  std::vector<std::size_t> windows{4, 8, 16};
  std::vector<std::size_t> lengths{128, 256};
  std::size_t seeds = 1;

  void validate() const {
    if (windows.empty()) throw ConfigError("no windows to sweep", "sweep.windows");
    if (lengths.empty()) throw ConfigError("no lengths to sweep", "sweep.lengths");
    if (seeds == 0) throw ConfigError("need at least one seed", "sweep.seeds");
  }
  bool operator==(const SweepConfig&) const = default;
};

inline std::vector<std::pair<std::string, std::string>> sweep_config_entries(const SweepConfig& c) {
  return {{"windows", format_size_list(c.windows)}, {"lengths", format_size_list(c.lengths)},
          {"seeds", std::to_string(c.seeds)}};
}

inline bool set_sweep_config_entry(SweepConfig& c, const std::string& key, const std::string& value,
                                   const std::string& prefix = "sweep.") {
  const std::string full = prefix + key;
  if (key == "windows") c.windows = parse_size_list(full, value);
  else if (key == "lengths") c.lengths = parse_size_list(full, value);
  else if (key == "seeds") c.seeds = parse_positive(full, value);
  else return false;
  return true;
}

// Mean eval metric per (window, length); rows follow `windows`, columns `lengths`.
struct SweepGrid {
  std::vector<std::size_t> windows, lengths;
  std::vector<std::vector<double>> metric;

  bool operator==(const SweepGrid&) const = default;
};

// Recall tasks keep their gap when it fits and otherwise shrink it to the
// largest gap the length allows.
inline TaskSpec task_at_length(TaskSpec spec, std::size_t length) {
  spec.length = length;
  if (spec.kind == TaskKind::recall && spec.gap + 2 * spec.pairs + 1 > length) {
    if (length < 2 * spec.pairs + 1) throw ConfigError("sweep length too short for the recall task", "sweep.lengths");
    spec.gap = length - 2 * spec.pairs - 1;
  }
  if (spec.kind == TaskKind::copy && 2 * spec.copy_length > length) spec.copy_length = length / 2;
  return spec;
}

template <typename T>
SweepGrid sweep_window_length(const ModelConfig& base, const TaskSpec& task_spec, const TrainConfig& train_cfg,
                              const SweepConfig& s, std::uint64_t seed,
                              const std::optional<std::filesystem::path>& dir = std::nullopt) {
  s.validate();
  SweepGrid grid{s.windows, s.lengths, {}};
  std::vector<std::unique_ptr<Task>> tasks;
  for (auto L : s.lengths) tasks.push_back(make_task(task_at_length(task_spec, L)));
  for (auto w : s.windows) {
    std::vector<double> row;
    for (std::size_t j = 0; j < s.lengths.size(); ++j) {
      ModelConfig cfg = base;
      cfg.architecture = Architecture::spade;
      cfg.pattern = LocalityPattern::windowed(w, true);
      double total = 0;
      for (std::size_t k = 0; k < s.seeds; ++k) {
        std::optional<std::filesystem::path> run_dir;
        if (dir)
          run_dir = *dir / "runs" /
                    ("w" + std::to_string(w) + "_L" + std::to_string(s.lengths[j]) + "_seed" + std::to_string(seed + k));
        total += train_and_score<T>(cfg, *tasks[j], train_cfg, seed + k, run_dir).metric;
      }
      row.push_back(total / static_cast<double>(s.seeds));
    }
    grid.metric.push_back(std::move(row));
  }
  return grid;
}

inline void write_sweep_csv(const SweepGrid& g, std::ostream& out) {
  out << "window";
  for (auto L : g.lengths) out << ",L" << L;
  out << "\n";
  for (std::size_t i = 0; i < g.windows.size(); ++i) {
    out << g.windows[i];
    for (double v : g.metric[i]) out << "," << format_double(v);
    out << "\n";
  }
}

inline SweepGrid read_sweep_csv(std::istream& in) {
  SweepGrid g;
  std::string line;
  std::getline(in, line);
  const auto head = split_list(line);
  if (head.empty() || head[0] != "window") throw FormatError("sweep.csv must start with a window column");
  for (std::size_t j = 1; j < head.size(); ++j) {
    if (head[j].size() < 2 || head[j][0] != 'L') throw FormatError("bad sweep.csv column '" + head[j] + "'");
    g.lengths.push_back(static_cast<std::size_t>(parse_uint("length", head[j].substr(1))));
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split_list(line);
    if (f.size() != head.size()) throw FormatError("sweep.csv row width does not match its header");
    g.windows.push_back(static_cast<std::size_t>(parse_uint("window", f[0])));
    std::vector<double> row;
    for (std::size_t j = 1; j < f.size(); ++j) row.push_back(parse_double("metric", f[j]));
    g.metric.push_back(std::move(row));
  }
  return g;
}

}  // namespace spade

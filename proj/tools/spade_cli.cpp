// spade train|eval|bench|ablate|sweep --config <path> [--set key=value ...] --out <dir> --seed <n>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "spade/config.hpp"

namespace fs = std::filesystem;
using namespace spade;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kResource = 4, kFormat = 5 };

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
};

RunConfig resolve(Command command, const Options& o) {
  RunConfig c;
  if (!o.config.empty()) c = load_run_config(o.config);
  c.command = command;
  for (const auto& s : o.sets) apply_override(c, s);
  if (!o.out.empty()) c.out = o.out;
  if (o.seed) c.seed = *o.seed;
  if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw ResourceError("cannot write " + path.string());
}

fs::path prepare_out(const RunConfig& c) {
  const fs::path dir = c.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ResourceError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.ini", write_run_config(c));
  return dir;
}

template <typename T>
void run_train(const RunConfig& c) {
  const auto dir = prepare_out(c);
  const auto task = make_task(c.task);
  SpadeModel<T> model(c.resolved_model());
  std::printf("training %s on %s: %zu parameters, %zu steps\n", to_string(c.model.architecture).c_str(),
              to_string(c.task.kind).c_str(), model.parameter_count(), c.train.steps);
  const auto metric = to_string(task->metric());
  const auto result = train(model, *task, c.resolved_train(), {dir, [&](const MetricsRecord& r) {
                                                                 std::printf("step %zu  train_loss %.4f  eval_loss %.4f  %s %.4f  %.1fs\n",
                                                                             r.step, r.train_loss, r.eval_loss,
                                                                             metric.c_str(), r.eval_metric, r.seconds);
                                                                 std::fflush(stdout);
                                                               }});
  std::printf("final %s %.6g, checkpoint %s\n", metric.c_str(), result.final_eval.value(),
              (dir / "checkpoint.spade").string().c_str());
}

template <typename T>
void run_eval(const RunConfig& c) {
  const auto dir = prepare_out(c);
  const auto model = load_checkpoint<T>(c.checkpoint_path());
  const auto task = make_task(c.task);
  if (model.config().vocab < task->vocab()) {
    throw ConfigError("checkpoint vocabulary " + std::to_string(model.config().vocab) + " is smaller than the task's " +
                          std::to_string(task->vocab()),
                      "task.kind");
  }
  const auto r = evaluate(model, *task);
  nlohmann::json j{{"checkpoint", c.checkpoint_path().string()},
                   {"task", to_string(c.task.kind)},
                   {"length", c.task.length},
                   {"metric", to_string(r.metric)},
                   {"value", r.value()},
                   {"loss", r.loss},
                   {"accuracy", r.accuracy},
                   {"perplexity", r.perplexity},
                   {"scored", r.scored}};
  write_text(dir / "eval.json", j.dump(2) + "\n");
  std::printf("%s %.6g (loss %.6g over %zu targets)\n", to_string(r.metric).c_str(), r.value(), r.loss, r.scored);
}

template <typename T>
void run_bench(const RunConfig& c) {
  const auto dir = prepare_out(c);
  const auto result = bench_scaling<T>(c.bench, c.seed, [](const ScalingRow& r) {
    if (r.ok) std::printf("%-13s L=%-6zu %.4fs  peak %lld bytes\n", r.variant.c_str(), r.length, r.seconds,
                          static_cast<long long>(r.peak_bytes));
    else std::printf("%-13s L=%-6zu failed: %s\n", r.variant.c_str(), r.length, r.error.c_str());
    std::fflush(stdout);
  });
  write_scaling_outputs(result, dir);
  for (const auto& [v, e] : result.exponents) {
    if (e) std::printf("%-13s exponent %.3f\n", v.c_str(), *e);
    else std::printf("%-13s exponent n/a\n", v.c_str());
  }
}

template <typename T>
void run_ablate(const RunConfig& c) {
  const auto dir = prepare_out(c);
  const auto task = make_task(c.task);
  const auto rows = ablate_placement<T>(c.resolved_model(), *task, c.resolved_train(), c.ablate, c.seed, dir);
  std::ofstream out(dir / "ablation.csv");
  write_ablation_csv(rows, out);
  if (!out) throw ResourceError("cannot write ablation.csv");
  for (const auto& r : rows) std::printf("%-8s mean %s %.4f\n", r.placement.c_str(), to_string(task->metric()).c_str(), r.mean_metric());
}

template <typename T>
void run_sweep(const RunConfig& c) {
  const auto dir = prepare_out(c);
  const auto grid = sweep_window_length<T>(c.resolved_model(), c.task, c.resolved_train(), c.sweep, c.seed, dir);
  std::ofstream out(dir / "sweep.csv");
  write_sweep_csv(grid, out);
  if (!out) throw ResourceError("cannot write sweep.csv");
  write_sweep_csv(grid, std::cout);
}

template <typename T>
void dispatch(const RunConfig& c) {
  switch (c.command) {
    case Command::train: return run_train<T>(c);
    case Command::eval: return run_eval<T>(c);
    case Command::bench: return run_bench<T>(c);
    case Command::ablate: return run_ablate<T>(c);
    case Command::sweep: return run_sweep<T>(c);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SPADE: state space augmented transformer experiments"};
  app.require_subcommand(1);
  Options opts;
  const std::vector<std::pair<Command, std::string>> commands{
      {Command::train, "Train a model on a task; writes metrics.csv, metrics.jsonl and checkpoint.spade"},
      {Command::eval, "Evaluate a checkpoint on a task; writes eval.json"},
      {Command::bench, "Time forward+backward across sequence lengths; writes scaling.csv and exponents.json"},
      {Command::ablate, "Compare global-layer placements on a task; writes ablation.csv"},
      {Command::sweep, "Grid over window size and sequence length; writes sweep.csv"}};
  std::vector<std::pair<Command, CLI::App*>> subs;
  for (const auto& [cmd, help] : commands) {
    auto* sub = app.add_subcommand(to_string(cmd), help);
    sub->add_option("--config", opts.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--set", opts.sets, "Override a config key, e.g. --set train.lr=3e-4")->take_all();
    sub->add_option("--out", opts.out, "Output directory (run.out)");
    sub->add_option("--seed", opts.seed, "Seed for initialization and data order (run.seed)");
    if (cmd == Command::eval) sub->add_option("--checkpoint", opts.checkpoint, "Checkpoint to evaluate (run.checkpoint)");
    subs.emplace_back(cmd, sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    Command cmd = Command::train;
    for (const auto& [c, sub] : subs)
      if (sub->parsed()) cmd = c;
    const auto cfg = resolve(cmd, opts);
    if (cfg.train.precision == Precision::f64) dispatch<double>(cfg);
    else dispatch<float>(cfg);
    return kOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error [%s]: %s\n", e.key().c_str(), e.what());
    return kConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const ResourceError& e) {
    std::fprintf(stderr, "resource error: %s\n", e.what());
    return kResource;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kFormat;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "spade/bench.hpp"

namespace spade {

enum class Command { train, eval, bench, ablate, sweep };

inline std::string to_string(Command c) {
  switch (c) {
    case Command::train: return "train";
    case Command::eval: return "eval";
    case Command::bench: return "bench";
    case Command::ablate: return "ablate";
    case Command::sweep: return "sweep";
  }
  return "?";
}

inline Command parse_command(const std::string& s, const std::string& key = "run.command") {
  if (s == "train") return Command::train;
  if (s == "eval") return Command::eval;
  if (s == "bench") return Command::bench;
  if (s == "ablate") return Command::ablate;
  if (s == "sweep") return Command::sweep;
  throw ConfigError("unknown subcommand '" + s + "' (expected train, eval, bench, ablate or sweep)", key);
}

// Everything one CLI invocation needs. The model vocabulary comes from the
// task and both the model and the trainer take run.seed, so [model] has no
// vocab or seed key and [train] has no seed key.
struct RunConfig {
  Command command = Command::train;
  std::string out = "out";
  std::uint64_t seed = 0;
  std::string checkpoint;  // eval: model to load; empty means <out>/checkpoint.spade
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  BenchConfig bench;
  AblateConfig ablate;
  SweepConfig sweep;

  std::size_t task_vocab() const { return task.kind == TaskKind::char_lm ? 256 : task.vocab; }

  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.vocab = task_vocab();
    m.seed = seed;
    return m;
  }
  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint.spade" : std::filesystem::path(checkpoint);
  }

  void validate() const {
    resolved_model().validate();
    resolved_train().validate();
    bench.validate();
    ablate.validate();
    sweep.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename Entries>
Entries without(Entries entries, std::initializer_list<const char*> drop) {
  std::erase_if(entries, [&](const auto& kv) {
    for (const char* d : drop)
      if (kv.first == d) return true;
    return false;
  });
  return entries;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> run_config_sections(
    const RunConfig& c) {
  return {{"run",
           {{"command", to_string(c.command)},
            {"out", c.out},
            {"seed", std::to_string(c.seed)},
            {"checkpoint", c.checkpoint}}},
          {"model", detail::without(model_config_entries(c.model), {"vocab", "seed"})},
          {"task", task_spec_entries(c.task)},
          {"train", detail::without(train_config_entries(c.train), {"seed"})},
          {"bench", bench_config_entries(c.bench)},
          {"ablate", ablate_config_entries(c.ablate)},
          {"sweep", sweep_config_entries(c.sweep)}};
}

inline std::string write_run_config(const RunConfig& c) {
  std::string out;
  for (const auto& [section, entries] : run_config_sections(c)) {
    out += (out.empty() ? "[" : "\n[") + section + "]\n";
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  }
  return out;
}

// Applies one dotted assignment such as "train.lr" = "3e-4".
inline void set_run_config_entry(RunConfig& c, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("key '" + dotted + "' needs a section prefix such as train.", dotted);
  const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  bool known = false;
  if (section == "run") {
    known = true;
    if (key == "command") c.command = parse_command(value, dotted);
    else if (key == "out") c.out = value;
    else if (key == "seed") c.seed = parse_uint(dotted, value);
    else if (key == "checkpoint") c.checkpoint = value;
    else known = false;
  } else if (section == "model") {
    known = key != "vocab" && key != "seed" && set_model_config_entry(c.model, key, value);
  } else if (section == "task") {
    known = set_task_spec_entry(c.task, key, value);
  } else if (section == "train") {
    known = key != "seed" && set_train_config_entry(c.train, key, value);
  } else if (section == "bench") {
    known = set_bench_config_entry(c.bench, key, value);
  } else if (section == "ablate") {
    known = set_ablate_config_entry(c.ablate, key, value);
  } else if (section == "sweep") {
    known = set_sweep_config_entry(c.sweep, key, value);
  } else {
    throw ConfigError("unknown config section '" + section + "'", dotted);
  }
  if (!known) throw ConfigError("unknown config key '" + dotted + "'", dotted);
}

// INI text: [section] headers, key = value lines, '#' or ';' comments.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header", line);
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'",
                        section.empty() ? line : section + "." + trim(line));
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside any section", key);
    set_run_config_entry(base, section + "." + key, value);
  }
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'", "--config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::move(base));
}

// "section.key=value" from --set.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value", assignment);
  set_run_config_entry(c, trim(std::string_view(assignment).substr(0, eq)),
                       trim(std::string_view(assignment).substr(eq + 1)));
}

}  // namespace spade

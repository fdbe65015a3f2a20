#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "spade/error.hpp"
#include "spade/ops.hpp"
#include "spade/parse.hpp"

namespace spade {

enum class TaskKind { copy, recall, char_lm };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::recall: return "recall";
    case TaskKind::char_lm: return "char_lm";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s, const std::string& key = "task.kind") {
  if (s == "copy") return TaskKind::copy;
  if (s == "recall" || s == "long_range_recall") return TaskKind::recall;
  if (s == "char_lm") return TaskKind::char_lm;
  throw ConfigError("unknown task '" + s + "' (expected copy, recall or char_lm)", key);
}

struct TaskSpec {
  TaskKind kind = TaskKind::recall;
  std::size_t length = 256;
  std::size_t vocab = 32;         // recall and copy; char_lm is always 256
  std::size_t pairs = 2;          // recall: key-value pairs
  std::size_t gap = 192;          // recall: minimum key-to-query distance
  std::size_t filler_tokens = 1;  // recall: size of the filler alphabet
  std::size_t copy_length = 16;   // copy: symbols to reproduce
  std::string corpus;             // char_lm: path to a UTF-8 text file
  std::size_t eval_samples = 512; // recall/copy: held-out sequences; char_lm: cap on segments (0 = all)
  std::string eval_split = "val"; // char_lm: val or test
  std::uint64_t eval_seed = 12345;

  bool operator==(const TaskSpec&) const = default;
};

inline std::vector<std::pair<std::string, std::string>> task_spec_entries(const TaskSpec& t) {
  return {{"kind", to_string(t.kind)},
          {"length", std::to_string(t.length)},
          {"vocab", std::to_string(t.vocab)},
          {"pairs", std::to_string(t.pairs)},
          {"gap", std::to_string(t.gap)},
          {"filler_tokens", std::to_string(t.filler_tokens)},
          {"copy_length", std::to_string(t.copy_length)},
          {"corpus", t.corpus},
          {"eval_samples", std::to_string(t.eval_samples)},
          {"eval_split", t.eval_split},
          {"eval_seed", std::to_string(t.eval_seed)}};
}

inline bool set_task_spec_entry(TaskSpec& t, const std::string& key, const std::string& value,
                                const std::string& prefix = "task.") {
  const std::string full = prefix + key;
  if (key == "kind") t.kind = parse_task_kind(value, full);
  else if (key == "length") t.length = parse_positive(full, value);
  else if (key == "vocab") t.vocab = parse_positive(full, value);
  else if (key == "pairs") t.pairs = parse_positive(full, value);
  else if (key == "gap") t.gap = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "filler_tokens") t.filler_tokens = parse_positive(full, value);
  else if (key == "copy_length") t.copy_length = parse_positive(full, value);
  else if (key == "corpus") t.corpus = value;
  else if (key == "eval_samples") t.eval_samples = static_cast<std::size_t>(parse_uint(full, value));
  else if (key == "eval_split") {
    if (value != "val" && value != "test") throw ConfigError("eval_split must be val or test", full);
    t.eval_split = value;
  } else if (key == "eval_seed") t.eval_seed = parse_uint(full, value);
  else return false;
  return true;
}

// Consecutive sequences of `segment` tokens. For language-model style tasks
// `targets` has one entry per token (kIgnoreTarget where no loss applies);
// for classification it has one label per sequence.
struct Batch {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::size_t segment = 0;

  std::size_t sequences() const { return segment == 0 ? 0 : tokens.size() / segment; }

  void append(const Batch& other) {
    if (segment != 0 && other.segment != segment) throw DimensionError("cannot mix sequence lengths in one batch");
    segment = other.segment;
    tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    targets.insert(targets.end(), other.targets.begin(), other.targets.end());
  }
};

enum class MetricKind { accuracy, perplexity };

inline std::string to_string(MetricKind m) { return m == MetricKind::accuracy ? "accuracy" : "perplexity"; }

class Task {
 public:
  virtual ~Task() = default;
  virtual const TaskSpec& spec() const = 0;
  virtual std::size_t vocab() const = 0;
  virtual MetricKind metric() const = 0;
  virtual Batch sample(std::size_t sequences, std::mt19937_64& rng) const = 0;
  // Fixed held-out sequences.
  virtual const Batch& eval_set() const = 0;
};

// k1 v1 ... km vm <filler...> q  ->  value of q, predicted at the last position.
// The pairs open the sequence and filler runs up to the query, so every key
// sits at least L - 2m - 1 >= gap tokens before it.
//
// Token layout: [0, F) filler, [F, F+K) keys, [F+K, F+2K) values, with
// K = (vocab - F) / 2.
class RecallTask : public Task {
 public:
  explicit RecallTask(TaskSpec spec) : spec_(std::move(spec)) {
    if (spec_.gap + 2 * spec_.pairs + 1 > spec_.length) {
      throw ConfigError("recall needs gap + 2*pairs + 1 <= length (gap " + std::to_string(spec_.gap) + ", pairs " +
                            std::to_string(spec_.pairs) + ", length " + std::to_string(spec_.length) + ")",
                        "task.gap");
    }
    if (spec_.vocab < spec_.filler_tokens + 2 * spec_.pairs) {
      throw ConfigError("recall vocabulary too small for " + std::to_string(spec_.pairs) + " distinct keys",
                        "task.vocab");
    }
    keys_ = (spec_.vocab - spec_.filler_tokens) / 2;
    if (spec_.eval_samples == 0) throw ConfigError("recall needs a non-empty eval set", "task.eval_samples");
    std::mt19937_64 rng(spec_.eval_seed);
    eval_ = sample(spec_.eval_samples, rng);
  }

  const TaskSpec& spec() const override { return spec_; }
  std::size_t vocab() const override { return spec_.vocab; }
  MetricKind metric() const override { return MetricKind::accuracy; }
  const Batch& eval_set() const override { return eval_; }

  int key_token(std::size_t i) const { return static_cast<int>(spec_.filler_tokens + i); }
  int value_token(std::size_t i) const { return static_cast<int>(spec_.filler_tokens + keys_ + i); }
  bool is_key(int t) const { return t >= key_token(0) && t < key_token(keys_); }
  std::size_t key_count() const { return keys_; }

  // With `drop_pairs` the key-value pairs are replaced by filler, so the
  // target carries no information the model could see.
  Batch sample(std::size_t sequences, std::mt19937_64& rng) const override { return generate(sequences, rng, false); }
  Batch sample_without_pairs(std::size_t sequences, std::mt19937_64& rng) const {
    return generate(sequences, rng, true);
  }

 private:
  Batch generate(std::size_t sequences, std::mt19937_64& rng, bool drop_pairs) const {
    const std::size_t L = spec_.length, m = spec_.pairs;
    Batch b;
    b.segment = L;
    b.tokens.reserve(sequences * L);
    b.targets.assign(sequences * L, kIgnoreTarget);
    std::vector<int> keys(keys_);
    std::iota(keys.begin(), keys.end(), key_token(0));
    for (std::size_t s = 0; s < sequences; ++s) {
      std::vector<int> seq(L);
      for (auto& t : seq) t = static_cast<int>(draw(rng, spec_.filler_tokens));
      // Partial Fisher-Yates for m distinct keys.
      for (std::size_t i = 0; i < m; ++i) std::swap(keys[i], keys[i + draw(rng, keys_ - i)]);
      std::vector<int> values(m);
      for (std::size_t i = 0; i < m; ++i) {
        values[i] = value_token(draw(rng, keys_));
        if (!drop_pairs) {
          seq[2 * i] = keys[i];
          seq[2 * i + 1] = values[i];
        }
      }
      const std::size_t j = draw(rng, m);
      seq[L - 1] = keys[j];
      b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
      b.targets[s * L + L - 1] = values[j];
    }
    return b;
  }

  // Uniform integer in [0, n) from raw draws, independent of the library's
  // distribution implementations.
  static std::size_t draw(std::mt19937_64& rng, std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do v = rng();
    while (v >= limit);
    return static_cast<std::size_t>(v % n);
  }

  TaskSpec spec_;
  std::size_t keys_ = 0;
  Batch eval_;
};

// s1..sn <filler> SEP s1..s(n-1), trained to emit s1..sn after SEP.
// Tokens: 0 filler, 1 separator, [2, vocab) symbols.
class CopyTask : public Task {
 public:
  explicit CopyTask(TaskSpec spec) : spec_(std::move(spec)) {
    if (2 * spec_.copy_length > spec_.length) {
      throw ConfigError("copy needs 2*copy_length <= length", "task.copy_length");
    }
    if (spec_.vocab < 3) throw ConfigError("copy needs at least three tokens", "task.vocab");
    if (spec_.eval_samples == 0) throw ConfigError("copy needs a non-empty eval set", "task.eval_samples");
    std::mt19937_64 rng(spec_.eval_seed);
    eval_ = sample(spec_.eval_samples, rng);
  }

  const TaskSpec& spec() const override { return spec_; }
  std::size_t vocab() const override { return spec_.vocab; }
  MetricKind metric() const override { return MetricKind::accuracy; }
  const Batch& eval_set() const override { return eval_; }

  Batch sample(std::size_t sequences, std::mt19937_64& rng) const override {
    const std::size_t L = spec_.length, n = spec_.copy_length, sep = L - n;
    Batch b;
    b.segment = L;
    b.targets.assign(sequences * L, kIgnoreTarget);
    for (std::size_t s = 0; s < sequences; ++s) {
      std::vector<int> seq(L, 0), symbols(n);
      for (auto& v : symbols) v = 2 + static_cast<int>(rng() % (spec_.vocab - 2));
      std::copy(symbols.begin(), symbols.end(), seq.begin());
      seq[sep] = 1;
      for (std::size_t i = 0; i + 1 < n; ++i) seq[sep + 1 + i] = symbols[i];
      for (std::size_t i = 0; i < n; ++i) b.targets[s * L + sep + i] = symbols[i];
      b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
    }
    return b;
  }

 private:
  TaskSpec spec_;
  Batch eval_;
};

// Contiguous byte-level splits of a text file.
struct CharCorpus {
  std::vector<std::uint8_t> train, val, test;
  std::size_t length = 0;  // L; segments hold L + 1 bytes

  const std::vector<std::uint8_t>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'", "task.eval_split");
  }

  static std::size_t segment_count(const std::vector<std::uint8_t>& bytes, std::size_t L) { return bytes.size() / (L + 1); }

  // Segment i of a split as next-token pairs.
  static Batch segment(const std::vector<std::uint8_t>& bytes, std::size_t L, std::size_t i) {
    Batch b;
    b.segment = L;
    const auto* p = bytes.data() + i * (L + 1);
    b.tokens.assign(p, p + L);
    b.targets.assign(p + 1, p + L + 1);
    return b;
  }
};

inline CharCorpus split_char_corpus(const std::vector<std::uint8_t>& bytes, std::size_t L, double train_fraction = 0.9,
                                    double val_fraction = 0.05) {
  if (bytes.size() < 10 * L) {
    throw ConfigError("corpus has " + std::to_string(bytes.size()) + " bytes, need at least 10*L = " +
                          std::to_string(10 * L),
                      "task.corpus");
  }
  if (!(train_fraction > 0 && val_fraction > 0 && train_fraction + val_fraction < 1)) {
    throw ConfigError("split fractions must be positive and leave room for a test split", "task.splits");
  }
  CharCorpus c;
  c.length = L;
  const auto n_train = static_cast<std::size_t>(static_cast<double>(bytes.size()) * train_fraction);
  const auto n_val = static_cast<std::size_t>(static_cast<double>(bytes.size()) * val_fraction);
  c.train.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.val.assign(bytes.begin() + static_cast<std::ptrdiff_t>(n_train),
               bytes.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  c.test.assign(bytes.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), bytes.end());
  return c;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read corpus file '" + path.string() + "'", "task.corpus");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline CharCorpus load_char_corpus(const std::filesystem::path& path, std::size_t L, double train_fraction = 0.9,
                                   double val_fraction = 0.05) {
  return split_char_corpus(read_bytes(path), L, train_fraction, val_fraction);
}

class CharLmTask : public Task {
 public:
  explicit CharLmTask(TaskSpec spec) : spec_(std::move(spec)) {
    if (spec_.corpus.empty()) throw ConfigError("char_lm needs a corpus path", "task.corpus");
    corpus_ = load_char_corpus(spec_.corpus, spec_.length);
    build_eval();
  }
  CharLmTask(TaskSpec spec, CharCorpus corpus) : spec_(std::move(spec)), corpus_(std::move(corpus)) { build_eval(); }

  const TaskSpec& spec() const override { return spec_; }
  std::size_t vocab() const override { return 256; }
  MetricKind metric() const override { return MetricKind::perplexity; }
  const Batch& eval_set() const override { return eval_; }
  const CharCorpus& corpus() const { return corpus_; }

  // Random windows of L + 1 bytes from the training split.
  Batch sample(std::size_t sequences, std::mt19937_64& rng) const override {
    const std::size_t L = spec_.length, span = corpus_.train.size() - L;
    Batch b;
    b.segment = L;
    for (std::size_t s = 0; s < sequences; ++s) {
      const std::size_t start = static_cast<std::size_t>(rng() % span);
      const auto* p = corpus_.train.data() + start;
      b.tokens.insert(b.tokens.end(), p, p + L);
      b.targets.insert(b.targets.end(), p + 1, p + L + 1);
    }
    return b;
  }

 private:
  void build_eval() {
    const auto& bytes = corpus_.split(spec_.eval_split);
    std::size_t n = CharCorpus::segment_count(bytes, spec_.length);
    if (spec_.eval_samples > 0) n = std::min(n, spec_.eval_samples);
    if (n == 0) throw ConfigError("the " + spec_.eval_split + " split holds no complete segment", "task.length");
    for (std::size_t i = 0; i < n; ++i) eval_.append(CharCorpus::segment(bytes, spec_.length, i));
  }

  TaskSpec spec_;
  CharCorpus corpus_;
  Batch eval_;
};

inline std::unique_ptr<Task> make_task(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::recall: return std::make_unique<RecallTask>(spec);
    case TaskKind::copy: return std::make_unique<CopyTask>(spec);
    case TaskKind::char_lm: return std::make_unique<CharLmTask>(spec);
  }
  throw ConfigError("unknown task", "task.kind");
}

}  // namespace spade

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "spade/checkpoint.hpp"
#include "spade/model.hpp"

using namespace spade;
using oracle::random_tensor;

namespace {

ModelConfig small_config(std::size_t depth = 2) {
  ModelConfig c;
  c.vocab = 11;
  c.d = 8;
  c.depth = depth;
  c.heads = 2;
  c.pattern = LocalityPattern::windowed(2, true);
  c.ssm_state = 6;
  c.ffn_hidden = 12;
  c.dropout = 0.0;
  c.seed = 3;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = dist(rng);
  return t;
}

template <typename T>
void zero(Tensor<T>& t) {
  for (auto& v : t.data()) v = T(0);
}

template <typename T>
void zero_branches(Layer<T>& layer) {
  if (layer.W_combine.defined()) zero(layer.W_combine);
  if (layer.attn.Wo.defined()) zero(layer.attn.Wo);
  if (layer.W_out.defined()) zero(layer.W_out);
  zero(layer.ffn.W2);
  zero(layer.ffn.b2);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spade_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(GlobalLayer, ZeroedBranchesPassThrough) {
  SpadeModel<double> m(small_config());
  ASSERT_EQ(m.layers()[0].kind, LayerKind::global);
  zero_branches(m.layers()[0]);
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({16, 8}, rng);
  EXPECT_EQ(max_abs_diff(m.layer_forward(m.layers()[0], x, 16), x), 0.0);
}

TEST(GlobalLayer, ZeroedSsmBranchStaysFinite) {
  SpadeModel<double> m(small_config());
  auto& layer = m.layers()[0];
  zero(layer.ssm.C);
  layer.ssm.invalidate_kernels();
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({16, 8}, rng);
  auto y = m.layer_forward(layer, x, 16);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(all_finite(y));
}

// The fused layer written out with generic ops, independent of layer_forward.
TEST(GlobalLayer, MatchesHandComposition) {
  SpadeModel<double> m(small_config());
  const auto& L = m.layers()[0];
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({16, 8}, rng);
  auto h = layer_norm(x, L.ln_in.gain, L.ln_in.bias);
  auto local = masked_attention(h, L.attn, m.config().pattern);
  Tensor<double> global({16, 8});
  for (std::size_t ch = 0; ch < 8; ++ch) {
    std::vector<double> u(16);
    for (std::size_t t = 0; t < 16; ++t) u[t] = h(t, ch);
    auto y = scan(discretize(L.ssm, ch), u);
    for (std::size_t t = 0; t < 16; ++t) global(t, ch) = y[t];
  }
  auto cat = concat_cols(layer_norm(local, L.ln_local.gain, L.ln_local.bias),
                         layer_norm(global, L.ln_global.gain, L.ln_global.bias));
  auto xa = add(matmul_nt(cat, L.W_combine), x);
  auto f = L.ffn;
  auto hid = gelu(add_bias(matmul(layer_norm(xa, L.ln_ffn.gain, L.ln_ffn.bias), f.W1), f.b1));
  auto expected = add(add_bias(matmul(hid, f.W2), f.b2), xa);
  EXPECT_LE(max_abs_diff(m.layer_forward(L, x, 16), expected), 1e-10);
}

TEST(GlobalLayer, CombineInitScalesGlobalColumns) {
  auto cfg = small_config();
  cfg.d = 32;
  cfg.heads = 4;
  SpadeModel<double> m(cfg);
  const auto& W = m.layers()[0].W_combine;
  ASSERT_EQ(W.shape(), (Shape{32, 64}));
  double local = 0, global = 0;
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) local += W(r, c) * W(r, c);
    for (std::size_t c = 32; c < 64; ++c) global += W(r, c) * W(r, c);
  }
  EXPECT_NEAR(std::sqrt(global / local), 0.1, 0.02);
}

TEST(GlobalLayer, CombineGradient) {
  SpadeModel<double> m(small_config());
  auto& L = m.layers()[0];
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>({16, 8}, rng);
  auto w = random_tensor<double>({16, 8}, rng);
  auto r = oracle::check_gradients({&L.W_combine}, [&] { return sum(mul(m.layer_forward(L, x, 16), w)); });
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LocalLayer, ZeroedBranchesPassThrough) {
  SpadeModel<double> m(small_config());
  auto& layer = m.layers()[1];
  ASSERT_EQ(layer.kind, LayerKind::local);
  zero_branches(layer);
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({16, 8}, rng);
  EXPECT_EQ(max_abs_diff(m.layer_forward(layer, x, 16), x), 0.0);
}

TEST(LocalLayer, MatchesPreNormBlock) {
  SpadeModel<double> m(small_config());
  const auto& L = m.layers()[1];
  std::mt19937_64 rng(6);
  auto x = random_tensor<double>({16, 8}, rng);
  auto xa = add(masked_attention(layer_norm(x, L.ln_in.gain, L.ln_in.bias), L.attn, m.config().pattern), x);
  auto expected = add(m.feed_forward(L.ffn, layer_norm(xa, L.ln_ffn.gain, L.ln_ffn.bias)), xa);
  EXPECT_LE(max_abs_diff(m.layer_forward(L, x, 16), expected), 1e-12);
}

TEST(LocalLayer, Gradient) {
  SpadeModel<double> m(small_config());
  auto& L = m.layers()[1];
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({16, 8}, rng).set_requires_grad(true);
  auto w = random_tensor<double>({16, 8}, rng);
  auto r = oracle::check_gradients({&x, &L.attn.Wq, &L.attn.Wo, &L.ffn.W1, &L.ln_in.gain},
                                   [&] { return sum(mul(m.layer_forward(L, x, 16), w)); });
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Model, ResidualIntegrity) {
  for (auto arch : {Architecture::spade, Architecture::local, Architecture::ssm_only}) {
    auto cfg = small_config(3);
    cfg.architecture = arch;
    SpadeModel<double> m(cfg);
    std::mt19937_64 rng(8);
    auto x = random_tensor<double>({12, 8}, rng);
    for (auto& layer : m.layers()) {
      zero_branches(layer);
      EXPECT_EQ(max_abs_diff(m.layer_forward(layer, x, 12), x), 0.0) << to_string(layer.kind);
    }
  }
}

TEST(Model, SingleTokenLogits) {
  SpadeModel<float> m(small_config());
  auto logits = m.forward_lm({3}, 1);
  EXPECT_EQ(logits.shape(), (Shape{1, 11}));
  EXPECT_TRUE(all_finite(logits));
}

TEST(Model, OutOfVocabularyThrows) {
  SpadeModel<float> m(small_config());
  EXPECT_THROW(m.forward_lm({1, 11}, 2), DimensionError);
  EXPECT_THROW(m.forward_lm({1, -1}, 2), DimensionError);
}

TEST(Model, LmNeedsCausalPattern) {
  auto cfg = small_config();
  cfg.pattern.causal = false;
  try {
    SpadeModel<float> m(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.causal");
  }
}

TEST(Model, CausalPrefixConsistency) {
  auto cfg = small_config(3);
  cfg.d = 16;
  cfg.vocab = 32;
  for (auto pattern : {LocalityPattern::windowed(4, true), LocalityPattern::chunked(8, true), LocalityPattern::full(true)}) {
    cfg.pattern = pattern;
    SpadeModel<float> m(cfg);
    std::mt19937_64 rng(9);
    auto tokens = random_tokens(200, 32, rng);
    std::vector<int> prefix(tokens.begin(), tokens.begin() + 77);
    auto full = m.forward_lm(tokens, 200), part = m.forward_lm(prefix, 77);
    float worst = 0;
    for (std::size_t i = 0; i < part.size(); ++i) worst = std::max(worst, std::abs(full[i] - part[i]));
    EXPECT_LE(worst, 1e-4f) << to_string(pattern.kind);
  }
}

TEST(Model, RunsAtLongerLengthsWithoutChanges) {
  auto cfg = small_config();
  cfg.vocab = 32;
  SpadeModel<float> m(cfg);
  const auto before = serialize_checkpoint(m);
  std::mt19937_64 rng(10);
  auto l256 = m.forward_lm(random_tokens(256, 32, rng), 256);
  auto l1024 = m.forward_lm(random_tokens(1024, 32, rng), 1024);
  EXPECT_TRUE(all_finite(l256));
  EXPECT_TRUE(all_finite(l1024));
  EXPECT_EQ(l1024.shape(), (Shape{1024, 32}));
  EXPECT_EQ(serialize_checkpoint(m), before);
}

TEST(Model, BatchedSequencesAreIndependent) {
  SpadeModel<double> m(small_config());
  std::mt19937_64 rng(11);
  auto a = random_tokens(10, 11, rng), b = random_tokens(10, 11, rng);
  std::vector<int> both(a);
  both.insert(both.end(), b.begin(), b.end());
  auto y = m.forward_lm(both, 10), ya = m.forward_lm(a, 10), yb = m.forward_lm(b, 10);
  for (std::size_t i = 0; i < ya.size(); ++i) {
    EXPECT_NEAR(y[i], ya[i], 1e-12);
    EXPECT_NEAR(y[ya.size() + i], yb[i], 1e-12);
  }
}

TEST(Model, GlobalLayerInjectsOrder) {
  auto cfg = small_config();
  SpadeModel<double> m(cfg);
  std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 8};
  auto swapped = tokens;
  std::swap(swapped[2], swapped[5]);
  auto a = m.forward_lm(tokens, 8), b = m.forward_lm(swapped, 8);
  // Position 7 sees the same multiset of tokens either way, so only order can
  // change its logits.
  double diff = 0;
  for (std::size_t v = 0; v < 11; ++v) diff = std::max(diff, std::abs(a(7, v) - b(7, v)));
  EXPECT_GT(diff, 1e-6);
}

TEST(Model, NoGlobalLayerIsPermutationCovariant) {
  auto cfg = small_config();
  cfg.architecture = Architecture::local;
  cfg.mode = TaskMode::classify;
  cfg.pattern = LocalityPattern::full(false);
  SpadeModel<double> m(cfg);
  std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  std::vector<int> permuted(8);
  for (std::size_t i = 0; i < 8; ++i) permuted[i] = tokens[perm[i]];
  auto h = m.hidden(tokens, 8), hp = m.hidden(permuted, 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(hp(i, c), h(perm[i], c), 1e-12);
  auto y = m.forward_classify(tokens, 8), yp = m.forward_classify(permuted, 8);
  EXPECT_LE(max_abs_diff(y, yp), 1e-12);
}

TEST(Model, ClassifyShape) {
  auto cfg = small_config();
  cfg.mode = TaskMode::classify;
  cfg.classes = 3;
  SpadeModel<float> m(cfg);
  std::mt19937_64 rng(12);
  auto y = m.forward_classify(random_tokens(40, 11, rng), 10);
  EXPECT_EQ(y.shape(), (Shape{4, 3}));
  EXPECT_THROW(m.forward_lm({1}, 1), ConfigError);
}

TEST(Model, EndToEndGradient) {
  std::mt19937_64 rng(13);
  for (bool trainable_ssm : {false, true}) {
    auto cfg = small_config();
    cfg.ssm_trainable = trainable_ssm;
    SpadeModel<double> m(cfg);
    auto tokens = random_tokens(24, 11, rng);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    targets.push_back(kIgnoreTarget);
    targets[11] = kIgnoreTarget;
    std::vector<Tensor<double>> params = m.trainable_parameters();
    std::vector<Tensor<double>*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    auto r = oracle::check_gradients(ptrs, [&] { return cross_entropy(m.forward_lm(tokens, 12), targets); });
    EXPECT_LE(r.max_rel_error, 1e-3) << "trainable_ssm=" << trainable_ssm << " " << r.worst;
    EXPECT_EQ(r.checked, [&] {
      std::size_t n = 0;
      for (auto& p : params) n += p.size();
      return n;
    }());
  }
}

TEST(Model, SsmOnlyAndClassifierGradients) {
  std::mt19937_64 rng(14);
  auto cfg = small_config();
  cfg.architecture = Architecture::ssm_only;
  cfg.ssm_trainable = true;
  cfg.mode = TaskMode::classify;
  cfg.classes = 3;
  SpadeModel<double> m(cfg);
  auto tokens = random_tokens(24, 11, rng);
  auto params = m.trainable_parameters();
  std::vector<Tensor<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  auto r = oracle::check_gradients(ptrs, [&] { return cross_entropy(m.forward_classify(tokens, 12), {2, 0}); });
  EXPECT_LE(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Placement, LayerKinds) {
  using K = LayerKind;
  EXPECT_EQ(Placement::parse("b-1").layer_kinds(4), (std::vector<K>{K::global, K::local, K::local, K::local}));
  EXPECT_EQ(Placement::parse("bottom_2").layer_kinds(3), (std::vector<K>{K::global, K::global, K::local}));
  EXPECT_EQ(Placement::parse("all").layer_kinds(3), (std::vector<K>{K::global, K::global, K::global}));
  EXPECT_EQ(Placement::parse("top-1").layer_kinds(3), (std::vector<K>{K::local, K::local, K::global}));
  EXPECT_EQ(Placement::parse("none").layer_kinds(2), (std::vector<K>{K::local, K::local}));
  EXPECT_THROW(Placement::parse("b-5").layer_kinds(4), ConfigError);
  EXPECT_THROW(Placement::parse("middle"), ConfigError);
  EXPECT_EQ(Placement::parse("top_1").name(), "top-1");
}

TEST(Placement, ConfigureGlobals) {
  SpadeModel<float> m(small_config(3));
  EXPECT_EQ(m.layers()[0].kind, LayerKind::global);
  EXPECT_EQ(m.layers()[1].kind, LayerKind::local);
  auto all = configure_globals(m, Placement::all());
  for (auto& l : all.layers()) EXPECT_EQ(l.kind, LayerKind::global);
  auto top = configure_globals(m, Placement::top(1));
  EXPECT_EQ(top.layers()[0].kind, LayerKind::local);
  EXPECT_EQ(top.layers()[2].kind, LayerKind::global);
  EXPECT_THROW(configure_globals(m, Placement::bottom(4)), ConfigError);
}

TEST(Parameters, CountMatchesFormulaAndMatching) {
  for (auto arch : {Architecture::spade, Architecture::local, Architecture::ssm_only}) {
    for (auto mode : {TaskMode::lm, TaskMode::classify}) {
      auto cfg = small_config(3);
      cfg.architecture = arch;
      cfg.mode = mode;
      cfg.tie_embeddings = arch != Architecture::local;
      SpadeModel<float> m(cfg);
      EXPECT_EQ(m.parameter_count(), parameter_count(cfg));
    }
  }
  ModelConfig spade;
  spade.d = 32;
  spade.depth = 2;
  spade.ssm_state = 32;
  const auto target = parameter_count(spade);
  for (auto arch : {Architecture::local, Architecture::ssm_only}) {
    auto base = spade;
    base.architecture = arch;
    auto matched = match_parameter_count(base, target);
    const double ratio = static_cast<double>(parameter_count(matched)) / static_cast<double>(target);
    EXPECT_NEAR(ratio, 1.0, 0.05) << to_string(arch);
    EXPECT_GT(matched.hidden(), 0u);
  }
}

TEST(Parameters, FrozenSsmIsNotTrainable) {
  SpadeModel<float> m(small_config());
  for (const auto& p : m.parameters()) {
    if (p.name.find("ssm.") != std::string::npos) {
      EXPECT_FALSE(p.trainable) << p.name;
      EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
    }
  }
}

TEST(Config, EntriesRoundTrip) {
  auto cfg = small_config();
  cfg.placement = Placement::top(1);
  cfg.dropout = 0.125;
  cfg.architecture = Architecture::ssm_only;
  ModelConfig back;
  for (auto& [k, v] : model_config_entries(cfg)) EXPECT_TRUE(set_model_config_entry(back, k, v));
  EXPECT_EQ(back, cfg);
  EXPECT_FALSE(set_model_config_entry(back, "colour", "red"));
  try {
    set_model_config_entry(back, "depth", "two");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.depth");
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = small_config();
  cfg.vocab = 20;
  SpadeModel<float> m(cfg);
  // Move the weights off their initial values.
  std::mt19937_64 rng(15);
  for (auto& p : m.parameters())
    if (p.trainable)
      for (auto& v : p.tensor.data()) v += 0.01f * static_cast<float>(rng() % 100);
  const auto path = temp_path("round.spade");
  save_checkpoint(m, path, {{"step", "42"}});
  auto loaded = load_checkpoint<float>(path);
  EXPECT_EQ(loaded.config(), m.config());
  auto a = m.parameters(), b = loaded.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
  }
  EXPECT_EQ(serialize_checkpoint(loaded, {{"step", "42"}}), detail::read_file(path));
  EXPECT_EQ(read_checkpoint_metadata(path).at("step"), "42");
  auto tokens = random_tokens(30, 20, rng);
  auto y0 = m.forward_lm(tokens, 30), y1 = loaded.forward_lm(tokens, 30);
  EXPECT_TRUE(std::equal(y0.data().begin(), y0.data().end(), y1.data().begin()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  SpadeModel<float> m(small_config());
  const auto good = serialize_checkpoint(m);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[6] = 9;
  try {
    deserialize_checkpoint<float>(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  EXPECT_THROW(deserialize_checkpoint<float>(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint<float>(good.substr(0, 20)), FormatError);
  EXPECT_THROW(deserialize_checkpoint<float>(good + "x"), FormatError);

  // Metadata says depth 3 but the shape table describes two layers.
  auto two_layer = good;
  two_layer.replace(two_layer.find("depth=2"), 7, "depth=3");
  EXPECT_THROW(deserialize_checkpoint<float>(two_layer), FormatError);

  EXPECT_THROW(load_checkpoint<float>(temp_path("missing.spade")), ResourceError);
}

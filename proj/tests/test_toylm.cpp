#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <set>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/error.hpp"
#include "jumpkit/metrics.hpp"
#include "jumpkit/toylm.hpp"
#include "test_util.hpp"

using namespace jumpkit;
using namespace jumpkit::toylm;
using jumpkit::testing::TempDir;

namespace {

bool same_bytes(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_params(const ToyLM& a, const ToyLM& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].size() != pb[i].size() || std::memcmp(pa[i].data(), pb[i].data(), pa[i].size_bytes()) != 0) return false;
  }
  return true;
}

std::vector<std::vector<int>> small_corpus(int max_len) {
  return encode_sentences(bundled_corpus(), max_len);
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
  const auto cfg = profile("tiny");
  CHECK(same_params(init_toylm(cfg), init_toylm(cfg)));
  auto other = cfg;
  other.seed = 1;
  CHECK_FALSE(same_params(init_toylm(cfg), init_toylm(other)));
}

TEST_CASE("config validation") {
  ToyLMConfig c;
  c.hidden_dim = 130;
  c.num_heads = 4;
  CHECK_THROWS_AS(init_toylm(c), InvalidArgument);
  c.hidden_dim = 64;
  CHECK_THROWS_AS(init_toylm(c), InvalidArgument);
  CHECK_THROWS_AS(profile("huge"), InvalidArgument);
  CHECK(profile("wide").hidden_dim == 256);
}

TEST_CASE("parameter count matches the architecture") {
  const auto cfg = profile("default");
  const std::int64_t v = cfg.vocab_size, h = cfg.hidden_dim, l = cfg.num_blocks, m = cfg.mlp_ratio * h;
  const std::int64_t per_block = 4 * h * h + 2 * h * m + m + h + 4 * h;
  const std::int64_t expected = v * h + cfg.max_seq_len * h + l * per_block + 2 * h;
  CHECK(init_toylm(cfg).parameter_count() == expected);
}

TEST_CASE("forward shapes, causality and normalized outputs") {
  const auto model = init_toylm(profile("tiny"));
  const std::vector<int> one{3};
  const auto r1 = forward_with_states(model, one);
  CHECK(r1.states.size() == 3);
  CHECK(r1.states[0].rows() == 1);
  CHECK(r1.states[0].cols() == 100);
  CHECK(r1.logits.cols() == 32);

  std::vector<int> a = encode("abcdefgh"), b = a;
  b.back() = encode("z")[0];
  const auto fa = forward_with_states(model, a);
  const auto fb = forward_with_states(model, b);
  // Changing the last token leaves every earlier position untouched.
  for (std::size_t k = 0; k < fa.states.size(); ++k) {
    CHECK(same_bytes(fa.states[k].topRows(7), fb.states[k].topRows(7)));
  }
  CHECK_FALSE(same_bytes(fa.logits.bottomRows(1), fb.logits.bottomRows(1)));

  for (std::size_t t = 1; t < a.size(); ++t) {
    const auto prefix = forward_with_states(model, std::span<const int>(a.data(), t));
    for (std::size_t k = 0; k < fa.states.size(); ++k) {
      const auto rows = static_cast<Eigen::Index>(t);
      CHECK((prefix.states[k] - fa.states[k].topRows(rows)).cwiseAbs().maxCoeff() <= 1e-6f);
    }
  }

  for (Eigen::Index t = 0; t < fa.logits.rows(); ++t) {
    const VectorD p = metrics::softmax(fa.logits.row(t).transpose().cast<double>());
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(forward_with_states(model, std::vector<int>{}), InvalidArgument);
  CHECK_THROWS_AS(forward_with_states(model, std::vector<int>{40}), InvalidArgument);
}

TEST_CASE("manual backward agrees with finite differences") {
  auto cfg = profile("tiny");
  cfg.seed = 3;
  ToyLM model = init_toylm(cfg);
  // Larger weights give gradients well above float rounding noise.
  for (auto p : model.parameters()) {
    for (auto& x : p) x *= 5.0f;
  }
  const std::vector<std::vector<int>> windows{encode("the baker sang."), encode("a cold wind")};
  ToyLM grads = zeros_like(model);
  loss_and_gradients(model, windows, grads);

  auto loss_of = [&](const ToyLM& m) {
    ToyLM scratch = zeros_like(m);
    return loss_and_gradients(m, windows, scratch);
  };
  Rng rng(9);
  auto params = model.parameters();
  const auto gparams = grads.parameters();
  int checked = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    const auto g = gparams[t];
    std::vector<std::size_t> picks{static_cast<std::size_t>(
        std::max_element(g.begin(), g.end(), [](float x, float y) { return std::abs(x) < std::abs(y); }) - g.begin())};
    picks.push_back(rng.index(p.size()));
    for (auto i : picks) {
      const float orig = p[i];
      const float step = 1e-3f;
      p[i] = orig + step;
      const double up = loss_of(model);
      p[i] = orig - step;
      const double down = loss_of(model);
      p[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g[i];
      CHECK(std::abs(analytic - numeric) <= 1e-2 * std::max(std::abs(analytic), std::abs(numeric)) + 2e-3);
      ++checked;
    }
  }
  CHECK(checked == static_cast<int>(2 * params.size()));
}

TEST_CASE("training: zero steps is a no-op and training is deterministic") {
  const auto cfg = profile("tiny");
  const auto model = init_toylm(cfg);
  const auto tokens = encode(bundled_corpus());
  TrainOptions none;
  none.steps = 0;
  CHECK(same_params(train_toylm(model, tokens, none), model));

  TrainOptions few;
  few.steps = 5;
  few.seq_len = 16;
  const auto a = train_toylm(model, tokens, few);
  const auto b = train_toylm(model, tokens, few);
  CHECK(same_params(a, b));
  CHECK_FALSE(same_params(a, model));

  TrainOptions bad = few;
  bad.seq_len = 1;
  CHECK_THROWS_AS(train_toylm(model, tokens, bad), InvalidArgument);
}

TEST_CASE("light training lowers held-out cross-entropy below ln V") {
  auto cfg = profile("tiny");
  const auto tokens = encode(bundled_corpus());
  const auto split = tokens.size() * 9 / 10;
  const std::span<const int> train(tokens.data(), split);
  const std::span<const int> held(tokens.data() + split, tokens.size() - split);
  const auto model = init_toylm(cfg);
  TrainOptions opts;
  opts.steps = 150;
  opts.seq_len = 16;
  const auto trained = train_toylm(model, train, opts);
  const double before = cross_entropy(model, held, 16);
  const double after = cross_entropy(trained, held, 16);
  CHECK(before == doctest::Approx(std::log(32.0)).epsilon(0.05));
  CHECK(after < std::log(32.0));
  CHECK(after < before);
}

TEST_CASE("dumped rows equal the states of a direct forward pass") {
  const auto model = init_toylm(profile("tiny"));
  const auto sentences = small_corpus(16);
  DumpOptions opts;
  opts.per_sentence = 3;
  TempDir dir;
  dump_activations(model, sentences, opts, dir.path());
  const auto d = hsdata::load_dataset(dir.path());
  CHECK(d.num_blocks() == 2);
  CHECK(d.samples.size() == d.num_samples());
  CHECK(d.final_norm.has_value());
  REQUIRE(d.lm_head.has_value());
  CHECK(same_bytes(*d.lm_head, model.tok_emb));
  for (std::size_t i = 0; i < d.samples.size(); i += 17) {
    const auto& s = d.samples[i];
    const auto fwd = forward_with_states(model, sentences[static_cast<std::size_t>(s.sentence_id)]);
    for (int k = 0; k <= 2; ++k) {
      const auto row = static_cast<Eigen::Index>(i);
      CHECK(same_bytes(d.block(k).row(row), fwd.states[static_cast<std::size_t>(k)].row(s.token_position)));
    }
  }
  // Grouped split: no sentence straddles train and val.
  std::set<std::int64_t> train_sentences;
  for (auto i : d.split.train) train_sentences.insert(d.samples[i].sentence_id);
  for (auto i : d.split.val) CHECK(train_sentences.count(d.samples[i].sentence_id) == 0);
}

TEST_CASE("one position per sentence gives one row per sentence") {
  const auto model = init_toylm(profile("tiny"));
  auto sentences = small_corpus(16);
  sentences.resize(10);
  const auto d = build_dataset(model, sentences, {});
  CHECK(d.num_samples() == 10);
  CHECK_NOTHROW(hsdata::validate(d));
}

TEST_CASE("zeroed blocks leave the residual stream unchanged") {
  auto model = init_toylm(profile("tiny"));
  for (auto& b : model.blocks) {
    b.wo.setZero();
    b.w2.setZero();
  }
  const auto d = build_dataset(model, small_corpus(16), {});
  CHECK(same_bytes(d.block(0), d.block(2)));
  const MatrixD x = d.block(0).cast<double>();
  CHECK(metrics::coordinate_averaged_r2(x, x).value == 1.0);
}

TEST_CASE("model files round trip and reject corruption") {
  const auto model = init_toylm(profile("tiny"));
  TempDir dir;
  save_toylm(model, dir / "m.toylm");
  const auto back = load_toylm(dir / "m.toylm");
  CHECK(same_params(model, back));
  CHECK(back.config.seed == model.config.seed);

  auto bytes = io::read_file(dir / "m.toylm");
  bytes.pop_back();
  io::write_file_atomic(dir / "bad.toylm", bytes);
  CHECK_THROWS_AS(load_toylm(dir / "bad.toylm"), FormatError);
}

TEST_CASE("tokenizer") {
  CHECK(encode("Ab?") == std::vector<int>{0, 1, 31});
  CHECK(decode(encode("Hi, there!")) == "hi, there!");
  CHECK(decode(encode("x9y")) == "x y");
  const auto s = encode_sentences("One.  Two   words! Three?", 64);
  REQUIRE(s.size() == 3);
  CHECK(decode(s[1]) == "two words!");
  CHECK(encode_sentences("abcdefgh.", 4)[0].size() == 4);
  CHECK(bundled_corpus().size() > 4000);
}

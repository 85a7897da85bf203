#include "jumpkit/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/error.hpp"
#include "jumpkit/metrics.hpp"
#include "jumpkit/rng.hpp"

namespace jumpkit::toylm {

namespace {

constexpr std::uint32_t kMagic = 0x4D544B4A;  // "JKTM"
constexpr std::uint32_t kVersion = 1;

using RowVectorF = Eigen::Matrix<float, 1, Eigen::Dynamic>;

struct LnCache {
  MatrixF xhat;
  VectorF rstd;
};

struct BlockCache {
  MatrixF x_in;
  LnCache ln1;
  MatrixF a, q, k, v;
  std::vector<MatrixF> probs;  // per head, T x T (upper triangle zero)
  MatrixF att;
  MatrixF x_mid;
  LnCache ln2;
  MatrixF m, u, g;
};

struct Trace {
  std::vector<BlockCache> blocks;
  LnCache lnf;
  MatrixF normed;  // LNf output
};

MatrixF gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  MatrixF m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(0.02 * rng.normal());
  return m;
}

MatrixF layer_norm(const MatrixF& x, const VectorF& gain, const VectorF& bias, LnCache* cache) {
  const auto h = static_cast<float>(x.cols());
  MatrixF xhat(x.rows(), x.cols());
  VectorF rstd(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const float mean = x.row(i).sum() / h;
    const float var = (x.row(i).array() - mean).square().sum() / h;
    rstd[i] = 1.0f / std::sqrt(var + ToyLM::kNormEpsilon);
    xhat.row(i) = (x.row(i).array() - mean) * rstd[i];
  }
  MatrixF y = (xhat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

MatrixF layer_norm_backward(const MatrixF& dy, const LnCache& c, const VectorF& gain, VectorF& dgain,
                            VectorF& dbias) {
  dgain += (dy.array() * c.xhat.array()).colwise().sum().transpose().matrix();
  dbias += dy.colwise().sum().transpose();
  const MatrixF dxhat = dy.array().rowwise() * gain.transpose().array();
  const auto h = static_cast<float>(dy.cols());
  MatrixF dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const float m1 = dxhat.row(i).sum() / h;
    const float m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).sum() / h;
    dx.row(i) = c.rstd[i] * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2 / pi)

float gelu(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + 0.044715f * x * x * x))); }

float gelu_grad(float x) {
  const float t = std::tanh(kGeluC * (x + 0.044715f * x * x * x));
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
}

void check_tokens(const ToyLM& model, std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgument("toylm: empty token sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_seq_len) {
    throw InvalidArgument("toylm: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                          std::to_string(model.config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= model.config.vocab_size) throw InvalidArgument("toylm: token id " + std::to_string(t) + " out of vocabulary");
  }
}

// Runs the residual stream; fills `trace` when given. Returns num_blocks + 1 states.
std::vector<MatrixF> run(const ToyLM& model, std::span<const int> tokens, Trace* trace) {
  check_tokens(model, tokens);
  const auto& cfg = model.config;
  const auto t_len = static_cast<Eigen::Index>(tokens.size());
  const int d = cfg.hidden_dim / cfg.num_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));

  std::vector<MatrixF> states;
  MatrixF x(t_len, cfg.hidden_dim);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    x.row(t) = model.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + model.pos_emb.row(t);
  }
  states.push_back(x);
  if (trace) trace->blocks.resize(model.blocks.size());

  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const auto& b = model.blocks[bi];
    BlockCache local;
    BlockCache& c = trace ? trace->blocks[bi] : local;
    c.x_in = x;
    c.a = layer_norm(x, b.ln1_gain, b.ln1_bias, &c.ln1);
    c.q = c.a * b.wq;
    c.k = c.a * b.wk;
    c.v = c.a * b.wv;
    c.att.resize(t_len, cfg.hidden_dim);
    c.probs.assign(static_cast<std::size_t>(cfg.num_heads), MatrixF());
    for (int h = 0; h < cfg.num_heads; ++h) {
      const auto q = c.q.middleCols(h * d, d);
      const auto k = c.k.middleCols(h * d, d);
      MatrixF s = (q * k.transpose()) * scale;
      MatrixF p = MatrixF::Zero(t_len, t_len);
      for (Eigen::Index i = 0; i < t_len; ++i) {
        const auto row = s.row(i).head(i + 1);
        const float mx = row.maxCoeff();
        RowVectorF e = (row.array() - mx).exp();
        p.row(i).head(i + 1) = e / e.sum();
      }
      c.att.middleCols(h * d, d) = p * c.v.middleCols(h * d, d);
      c.probs[static_cast<std::size_t>(h)] = std::move(p);
    }
    x = x + c.att * b.wo;
    c.x_mid = x;
    c.m = layer_norm(x, b.ln2_gain, b.ln2_bias, &c.ln2);
    c.u = c.m * b.w1;
    c.u.rowwise() += b.b1.transpose();
    c.g = c.u.unaryExpr([](float v) { return gelu(v); });
    MatrixF mlp_out = c.g * b.w2;
    mlp_out.rowwise() += b.b2.transpose();
    x += mlp_out;
    states.push_back(x);
  }
  if (trace) trace->normed = layer_norm(x, model.lnf_gain, model.lnf_bias, &trace->lnf);
  return states;
}

template <typename M>
void add_views(std::vector<std::span<float>>& out, M& m) {
  out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
}

}  // namespace

void ToyLMConfig::validate() const {
  if (vocab_size < 2 || hidden_dim < 1 || num_blocks < 1 || num_heads < 1 || mlp_ratio < 1 || max_seq_len < 1) {
    throw InvalidArgument("toylm config: dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw InvalidArgument("toylm config: hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
  }
  if (hidden_dim < 100) throw InvalidArgument("toylm config: hidden_dim must be at least 100 for low-rank shortcuts");
}

ToyLMConfig profile(const std::string& name) {
  ToyLMConfig c;
  if (name == "default") return c;
  if (name == "wide") {
    c.hidden_dim = 256;
    return c;
  }
  if (name == "tiny") {
    c.hidden_dim = 100;
    c.num_blocks = 2;
    c.max_seq_len = 16;
    return c;
  }
  throw InvalidArgument("unknown toy profile '" + name + "' (expected default, wide, tiny)");
}

std::vector<std::span<float>> ToyLM::parameters() {
  std::vector<std::span<float>> out;
  add_views(out, tok_emb);
  add_views(out, pos_emb);
  for (auto& b : blocks) {
    add_views(out, b.ln1_gain);
    add_views(out, b.ln1_bias);
    add_views(out, b.wq);
    add_views(out, b.wk);
    add_views(out, b.wv);
    add_views(out, b.wo);
    add_views(out, b.ln2_gain);
    add_views(out, b.ln2_bias);
    add_views(out, b.w1);
    add_views(out, b.b1);
    add_views(out, b.w2);
    add_views(out, b.b2);
  }
  add_views(out, lnf_gain);
  add_views(out, lnf_bias);
  return out;
}

std::vector<std::span<const float>> ToyLM::parameters() const {
  auto views = const_cast<ToyLM*>(this)->parameters();
  return {views.begin(), views.end()};
}

std::int64_t ToyLM::parameter_count() const {
  std::int64_t n = 0;
  for (auto v : parameters()) n += static_cast<std::int64_t>(v.size());
  return n;
}

hsdata::FinalNorm ToyLM::final_norm() const {
  hsdata::FinalNorm fn;
  fn.scale = lnf_gain;
  fn.bias = lnf_bias;
  fn.epsilon = kNormEpsilon;
  fn.kind = hsdata::NormKind::LayerNorm;
  return fn;
}

ToyLM init_toylm(const ToyLMConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int h = config.hidden_dim;
  const int hidden_mlp = h * config.mlp_ratio;
  ToyLM m;
  m.config = config;
  m.tok_emb = gaussian(config.vocab_size, h, rng);
  m.pos_emb = gaussian(config.max_seq_len, h, rng);
  for (int i = 0; i < config.num_blocks; ++i) {
    Block b;
    b.ln1_gain = VectorF::Ones(h);
    b.ln1_bias = VectorF::Zero(h);
    b.wq = gaussian(h, h, rng);
    b.wk = gaussian(h, h, rng);
    b.wv = gaussian(h, h, rng);
    b.wo = gaussian(h, h, rng);
    b.ln2_gain = VectorF::Ones(h);
    b.ln2_bias = VectorF::Zero(h);
    b.w1 = gaussian(h, hidden_mlp, rng);
    b.b1 = VectorF::Zero(hidden_mlp);
    b.w2 = gaussian(hidden_mlp, h, rng);
    b.b2 = VectorF::Zero(h);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = VectorF::Ones(h);
  m.lnf_bias = VectorF::Zero(h);
  return m;
}

ToyLM zeros_like(const ToyLM& model) {
  ToyLM z = model;
  for (auto v : z.parameters()) std::fill(v.begin(), v.end(), 0.0f);
  return z;
}

ForwardResult forward_with_states(const ToyLM& model, std::span<const int> tokens) {
  ForwardResult r;
  r.states = run(model, tokens, nullptr);
  const auto fn = model.final_norm();
  const metrics::Unembedding unembedding(model.tok_emb, &fn);
  const MatrixF& last = r.states.back();
  r.logits.resize(last.rows(), model.config.vocab_size);
  for (Eigen::Index t = 0; t < last.rows(); ++t) {
    r.logits.row(t) = unembedding.logits(last.row(t).transpose().cast<double>()).transpose().cast<float>();
  }
  return r;
}

double cross_entropy(const ToyLM& model, std::span<const int> tokens, int window) {
  if (tokens.size() < 2) throw InvalidArgument("cross_entropy: need at least two tokens");
  window = std::min(window, model.config.max_seq_len);
  double total = 0.0;
  long long count = 0;
  // Windows overlap by one token so every next-token pair is scored once.
  for (std::size_t start = 0; start + 1 < tokens.size(); start += static_cast<std::size_t>(window - 1)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(window), tokens.size() - start);
    if (len < 2) break;
    const auto seq = tokens.subspan(start, len);
    const auto logits = forward_with_states(model, seq).logits;
    for (std::size_t t = 0; t + 1 < len; ++t) {
      total += metrics::negative_log_prob(logits.row(static_cast<Eigen::Index>(t)).transpose().cast<double>(), seq[t + 1]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double loss_and_gradients(const ToyLM& model, const std::vector<std::vector<int>>& windows, ToyLM& grads) {
  const auto& cfg = model.config;
  const int d = cfg.hidden_dim / cfg.num_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  long long total_targets = 0;
  for (const auto& w : windows) {
    if (w.size() < 2) throw InvalidArgument("toylm training window needs at least two tokens");
    total_targets += static_cast<long long>(w.size()) - 1;
  }
  const float inv_targets = 1.0f / static_cast<float>(total_targets);
  double loss = 0.0;

  for (const auto& window : windows) {
    const std::span<const int> inputs(window.data(), window.size() - 1);
    const auto t_len = static_cast<Eigen::Index>(inputs.size());
    Trace tr;
    run(model, inputs, &tr);

    // Tied LM head: logits = normed * tok_emb^T.
    MatrixF logits = tr.normed * model.tok_emb.transpose();
    MatrixF dlogits(t_len, cfg.vocab_size);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      const int target = window[static_cast<std::size_t>(t) + 1];
      const float mx = logits.row(t).maxCoeff();
      RowVectorF e = (logits.row(t).array() - mx).exp();
      const float sum = e.sum();
      loss += static_cast<double>(std::log(sum) + mx - logits(t, target));
      dlogits.row(t) = e / sum;
      dlogits(t, target) -= 1.0f;
    }
    dlogits *= inv_targets;
    grads.tok_emb += dlogits.transpose() * tr.normed;
    MatrixF dx = layer_norm_backward(dlogits * model.tok_emb, tr.lnf, model.lnf_gain, grads.lnf_gain, grads.lnf_bias);

    for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
      const auto& b = model.blocks[bi];
      auto& gb = grads.blocks[bi];
      const auto& c = tr.blocks[bi];

      // MLP branch.
      gb.w2 += c.g.transpose() * dx;
      gb.b2 += dx.colwise().sum().transpose();
      MatrixF du = (dx * b.w2.transpose()).array() * c.u.unaryExpr([](float v) { return gelu_grad(v); }).array();
      gb.w1 += c.m.transpose() * du;
      gb.b1 += du.colwise().sum().transpose();
      dx += layer_norm_backward(du * b.w1.transpose(), c.ln2, b.ln2_gain, gb.ln2_gain, gb.ln2_bias);

      // Attention branch.
      gb.wo += c.att.transpose() * dx;
      const MatrixF datt = dx * b.wo.transpose();
      MatrixF dq(t_len, cfg.hidden_dim), dk(t_len, cfg.hidden_dim), dv(t_len, cfg.hidden_dim);
      for (int h = 0; h < cfg.num_heads; ++h) {
        const auto& p = c.probs[static_cast<std::size_t>(h)];
        const auto dout = datt.middleCols(h * d, d);
        dv.middleCols(h * d, d) = p.transpose() * dout;
        const MatrixF dp = dout * c.v.middleCols(h * d, d).transpose();
        MatrixF ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
        ds *= scale;
        dq.middleCols(h * d, d) = ds * c.k.middleCols(h * d, d);
        dk.middleCols(h * d, d) = ds.transpose() * c.q.middleCols(h * d, d);
      }
      gb.wq += c.a.transpose() * dq;
      gb.wk += c.a.transpose() * dk;
      gb.wv += c.a.transpose() * dv;
      const MatrixF da = dq * b.wq.transpose() + dk * b.wk.transpose() + dv * b.wv.transpose();
      dx += layer_norm_backward(da, c.ln1, b.ln1_gain, gb.ln1_gain, gb.ln1_bias);
    }

    for (Eigen::Index t = 0; t < t_len; ++t) {
      grads.tok_emb.row(inputs[static_cast<std::size_t>(t)]) += dx.row(t);
      grads.pos_emb.row(t) += dx.row(t);
    }
  }
  return loss / static_cast<double>(total_targets);
}

ToyLM train_toylm(ToyLM model, std::span<const int> tokens, const TrainOptions& options) {
  if (options.steps < 0) throw InvalidArgument("train steps must be non-negative");
  if (options.steps == 0) return model;
  if (options.batch_size < 1 || options.seq_len < 2 || !(options.learning_rate > 0.0)) {
    throw InvalidArgument("toylm training options out of range");
  }
  const int window = std::min(options.seq_len, model.config.max_seq_len) + 1;
  if (tokens.size() < static_cast<std::size_t>(window)) throw InvalidArgument("training corpus is shorter than one window");
  for (int t : tokens) {
    if (t < 0 || t >= model.config.vocab_size) throw InvalidArgument("training corpus has out-of-vocabulary tokens");
  }

  Rng rng(options.seed);
  auto params = model.parameters();
  ToyLM m1 = zeros_like(model), m2 = zeros_like(model);
  auto mv = m1.parameters();
  auto vv = m2.parameters();
  const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  const auto lr = static_cast<float>(options.learning_rate);
  const auto span_count = tokens.size() - static_cast<std::size_t>(window) + 1;

  for (int step = 1; step <= options.steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < options.batch_size; ++i) {
      const auto start = static_cast<std::size_t>(rng.index(span_count));
      batch.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                         tokens.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(window)));
    }
    ToyLM grads = zeros_like(model);
    const double loss = loss_and_gradients(model, batch, grads);
    if (!std::isfinite(loss)) throw DivergenceError("toylm training diverged at step " + std::to_string(step), step);
    auto gv = grads.parameters();
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(step));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(step));
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        const float g = gv[k][i];
        mv[k][i] = b1 * mv[k][i] + (1.0f - b1) * g;
        vv[k][i] = b2 * vv[k][i] + (1.0f - b2) * g * g;
        params[k][i] -= lr * (mv[k][i] / c1) / (std::sqrt(vv[k][i] / c2) + eps);
      }
    }
  }
  return model;
}

hsdata::HiddenPairDataset build_dataset(const ToyLM& model, const std::vector<std::vector<int>>& sentences,
                                        const DumpOptions& options) {
  if (sentences.empty()) throw InvalidArgument("dump: empty corpus");
  std::vector<std::int64_t> lengths;
  for (const auto& s : sentences) lengths.push_back(static_cast<std::int64_t>(s.size()));
  const auto specs = hsdata::sample_token_positions(lengths, options.per_sentence, options.seed);

  const auto n = static_cast<Eigen::Index>(specs.size());
  const int h = model.config.hidden_dim;
  std::vector<MatrixF> blocks(static_cast<std::size_t>(model.config.num_blocks) + 1, MatrixF(n, h));
  Eigen::Index row = 0;
  std::size_t next = 0;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto result = forward_with_states(model, sentences[s]);
    for (; next < specs.size() && specs[next].sentence_id == static_cast<std::int64_t>(s); ++next, ++row) {
      for (std::size_t k = 0; k < blocks.size(); ++k) blocks[k].row(row) = result.states[k].row(specs[next].token_position);
    }
  }

  hsdata::HiddenPairDataset d;
  d.lm_head = model.tok_emb;
  d.final_norm = model.final_norm();
  d.manifest = hsdata::make_manifest(blocks, d.lm_head, d.final_norm, options.model_name);
  d.blocks = std::move(blocks);
  d.samples = specs;
  hsdata::assign_split(d, {});
  return d;
}

hsdata::ActivationManifest dump_activations(const ToyLM& model, const std::vector<std::vector<int>>& sentences,
                                            const DumpOptions& options, const std::filesystem::path& dir) {
  const auto d = build_dataset(model, sentences, options);
  hsdata::save_dataset(d, dir);
  return d.manifest;
}

void save_toylm(const ToyLM& model, const std::filesystem::path& path) {
  io::Bytes out;
  const auto& c = model.config;
  io::put_u32(out, kMagic);
  io::put_u32(out, kVersion);
  for (int v : {c.vocab_size, c.hidden_dim, c.num_blocks, c.num_heads, c.mlp_ratio, c.max_seq_len}) {
    io::put_u32(out, static_cast<std::uint32_t>(v));
  }
  io::put_u32(out, static_cast<std::uint32_t>(c.seed & 0xffffffffu));
  io::put_u32(out, static_cast<std::uint32_t>(c.seed >> 32));
  for (auto v : model.parameters()) io::put_f32_array(out, v);
  io::write_file_atomic(path, out);
}

ToyLM load_toylm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const auto name = path.filename().string();
  io::Reader r(bytes, name);
  if (r.u32() != kMagic) throw FormatError(name + ": not a toy model file");
  if (r.u32() != kVersion) throw FormatError(name + ": unsupported toy model version");
  ToyLMConfig c;
  c.vocab_size = static_cast<int>(r.u32());
  c.hidden_dim = static_cast<int>(r.u32());
  c.num_blocks = static_cast<int>(r.u32());
  c.num_heads = static_cast<int>(r.u32());
  c.mlp_ratio = static_cast<int>(r.u32());
  c.max_seq_len = static_cast<int>(r.u32());
  c.seed = r.u32();
  c.seed |= static_cast<std::uint64_t>(r.u32()) << 32;
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(name + ": " + e.what());
  }
  ToyLM model = init_toylm(c);
  for (auto v : model.parameters()) r.f32_array(v);
  r.expect_end();
  return model;
}

std::vector<int> encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) {
    const char lower = (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch;
    const auto pos = kAlphabet.find(lower);
    out.push_back(pos == std::string_view::npos ? static_cast<int>(kAlphabet.find(' ')) : static_cast<int>(pos));
  }
  return out;
}

std::string decode(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) out.push_back(t >= 0 && t < static_cast<int>(kAlphabet.size()) ? kAlphabet[static_cast<std::size_t>(t)] : '?');
  return out;
}

std::vector<std::vector<int>> encode_sentences(std::string_view text, int max_len) {
  if (max_len < 1) throw InvalidArgument("encode_sentences: max_len must be positive");
  std::vector<std::vector<int>> out;
  std::string current;
  auto flush = [&] {
    const auto b = current.find_first_not_of(' ');
    if (b != std::string::npos) {
      auto sentence = current.substr(b);
      if (static_cast<int>(sentence.size()) > max_len) sentence.resize(static_cast<std::size_t>(max_len));
      out.push_back(encode(sentence));
    }
    current.clear();
  };
  for (char ch : text) {
    const bool space = ch == ' ' || ch == '\n' || ch == '\t' || ch == '\r';
    if (space) {
      if (!current.empty() && current.back() != ' ') current.push_back(' ');
      continue;
    }
    current.push_back(ch);
    if (ch == '.' || ch == '!' || ch == '?') flush();
  }
  flush();
  return out;
}

}  // namespace jumpkit::toylm

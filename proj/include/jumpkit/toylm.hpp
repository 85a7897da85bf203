#pragma once

// A small deterministic character-level decoder-only transformer. It stands in
// for a real checkpoint so the whole dump -> fit -> evaluate pipeline runs
// hermetically.
//
// Architecture (pre-norm, GPT-2 style):
//   x_0 = tok_emb[id] + pos_emb[t]
//   x   = x + Attn(LN1(x)) Wo          causal multi-head attention, no biases
//   x   = x + GELU(LN2(x) W1 + b1) W2 + b2
//   logits = LNf(x_L) tok_emb^T         LM head tied to the token embedding

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jumpkit/hsdata.hpp"
#include "jumpkit/types.hpp"

namespace jumpkit::toylm {

struct ToyLMConfig {
  int vocab_size = 32;
  int hidden_dim = 128;
  int num_blocks = 8;
  int num_heads = 4;
  int mlp_ratio = 4;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

// Named presets: "default" (H=128, r=1), "wide" (H=256, r=2), "tiny" (H=100, 2 blocks).
ToyLMConfig profile(const std::string& name);

struct Block {
  VectorF ln1_gain, ln1_bias;
  MatrixF wq, wk, wv, wo;  // H x H
  VectorF ln2_gain, ln2_bias;
  MatrixF w1;  // H x mH
  VectorF b1;
  MatrixF w2;  // mH x H
  VectorF b2;
};

struct ToyLM {
  ToyLMConfig config;
  MatrixF tok_emb;  // V x H, also the LM head
  MatrixF pos_emb;  // max_seq_len x H
  std::vector<Block> blocks;
  VectorF lnf_gain, lnf_bias;

  static constexpr float kNormEpsilon = 1e-5f;

  // Flat views of every parameter tensor in a fixed order.
  std::vector<std::span<float>> parameters();
  std::vector<std::span<const float>> parameters() const;
  std::int64_t parameter_count() const;

  hsdata::FinalNorm final_norm() const;
};

// Seeded N(0, 0.02^2) weights, unit norm gains, zero biases.
ToyLM init_toylm(const ToyLMConfig& config);

// Same architecture with every weight zeroed (used for gradient buffers).
ToyLM zeros_like(const ToyLM& model);

struct ForwardResult {
  std::vector<MatrixF> states;  // num_blocks + 1 matrices of T x H; states[0] is the embedding output
  MatrixF logits;               // T x V
};

ForwardResult forward_with_states(const ToyLM& model, std::span<const int> tokens);

// Mean next-token cross-entropy (nats) over all positions of `tokens`
// evaluated in consecutive windows of at most `window` tokens.
double cross_entropy(const ToyLM& model, std::span<const int> tokens, int window);

// Loss and parameter gradients for one batch of token windows; each window
// predicts tokens[1..] from tokens[..-1].
double loss_and_gradients(const ToyLM& model, const std::vector<std::vector<int>>& windows, ToyLM& grads);

struct TrainOptions {
  int steps = 500;
  double learning_rate = 3e-3;
  int batch_size = 4;
  int seq_len = 32;
  std::uint64_t seed = 0;
};

// Adam on next-token cross-entropy over random windows of `tokens`.
// Throws DivergenceError on a non-finite loss.
ToyLM train_toylm(ToyLM model, std::span<const int> tokens, const TrainOptions& options);

struct DumpOptions {
  int per_sentence = 1;
  std::uint64_t seed = 0;
  std::string model_name = "toylm";
};

// Runs every sentence through the model, samples token positions and writes a
// complete dataset directory (blocks, tied LM head, final norm, provenance).
hsdata::ActivationManifest dump_activations(const ToyLM& model, const std::vector<std::vector<int>>& sentences,
                                            const DumpOptions& options, const std::filesystem::path& dir);
hsdata::HiddenPairDataset build_dataset(const ToyLM& model, const std::vector<std::vector<int>>& sentences,
                                        const DumpOptions& options);

void save_toylm(const ToyLM& model, const std::filesystem::path& path);
ToyLM load_toylm(const std::filesystem::path& path);

// Character tokenizer over "abcdefghijklmnopqrstuvwxyz .,'!?". Letters are
// lower-cased; every other character maps to the space token.
constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz .,'!?";
std::vector<int> encode(std::string_view text);
std::string decode(std::span<const int> tokens);

// Splits text into sentences at '.', '!' and '?' and encodes them, truncating
// each to max_len tokens.
std::vector<std::vector<int>> encode_sentences(std::string_view text, int max_len);

// A few KB of plain English prose shipped with the library.
std::string_view bundled_corpus();

}  // namespace jumpkit::toylm

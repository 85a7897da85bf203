#pragma once

// Paired hidden-state datasets and their on-disk activation-dump format.
//
// A dump directory holds:
//   manifest.json      shape metadata and the block file list
//   block_{k}.bin      k = 0..num_blocks, row-major N x H float32 LE, no header
//   lm_head.bin        row-major V x H (when has_lm_head)
//   final_norm.bin     H scale floats then H bias floats (when has_final_norm)
//   samples.json       optional (sentence_id, token_position) per row
//
// Block 0 is the embedding output; block k is the output of transformer block k.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jumpkit/types.hpp"

namespace jumpkit::hsdata {

enum class NormKind { LayerNorm, RmsNorm };

std::string to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& name);

struct ActivationManifest {
  int hidden_dim = 0;
  int num_blocks = 0;
  int vocab_size = 0;
  int num_samples = 0;
  std::string dtype = "f32le";
  bool has_lm_head = false;
  bool has_final_norm = false;
  std::string model_name;
  std::vector<std::string> block_files;
  double final_norm_epsilon = 1e-5;
  NormKind final_norm_kind = NormKind::LayerNorm;
};

// The model's last normalization before the LM head.
struct FinalNorm {
  VectorF scale;
  VectorF bias;
  double epsilon = 1e-5;
  NormKind kind = NormKind::LayerNorm;
};

struct SampleSpec {
  std::int64_t sentence_id = 0;
  std::int64_t token_position = 0;

  friend bool operator==(const SampleSpec&, const SampleSpec&) = default;
};

// Sorted, disjoint sample indices (0-based) covering 0..n-1.
struct SplitAssignment {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

struct SplitOptions {
  double train_fraction = 0.75;
  std::uint64_t seed = 0;
};

struct HiddenPairDataset {
  ActivationManifest manifest;
  std::vector<MatrixF> blocks;  // blocks[k] is N x H
  std::optional<MatrixF> lm_head;  // V x H
  std::optional<FinalNorm> final_norm;
  std::vector<SampleSpec> samples;  // empty when provenance is unknown
  SplitAssignment split;

  int hidden_dim() const { return manifest.hidden_dim; }
  int num_blocks() const { return manifest.num_blocks; }
  std::size_t num_samples() const { return static_cast<std::size_t>(manifest.num_samples); }

  const MatrixF& block(int k) const;
};

// Builds a consistent manifest for in-memory tensors and validates them.
ActivationManifest make_manifest(const std::vector<MatrixF>& blocks, const std::optional<MatrixF>& lm_head,
                                 const std::optional<FinalNorm>& final_norm, std::string model_name);

// Checks every in-memory invariant (shapes, finiteness, split partition).
void validate(const HiddenPairDataset& dataset);

// Assigns dataset.split, grouping by sentence when provenance is recorded.
void assign_split(HiddenPairDataset& dataset, const SplitOptions& options);

HiddenPairDataset load_dataset(const std::filesystem::path& dir, const SplitOptions& split = {});
void save_dataset(const HiddenPairDataset& dataset, const std::filesystem::path& dir);

// Draws min(per_sentence, length) distinct positions per sentence, uniformly
// without replacement. Output is ordered by sentence then ascending position.
std::vector<SampleSpec> sample_token_positions(const std::vector<std::int64_t>& sentence_lengths,
                                               int per_sentence, std::uint64_t seed);

// floor(train_fraction * n) indices become train, chosen uniformly.
SplitAssignment split_train_val(std::size_t n, double train_fraction, std::uint64_t seed);

// Group-level split: floor(train_fraction * groups) whole groups become train,
// so samples from one sentence never straddle train and val.
SplitAssignment split_train_val_grouped(const std::vector<std::int64_t>& group_of_sample,
                                        double train_fraction, std::uint64_t seed);

// Gathers rows of `m` into a new matrix.
MatrixF gather_rows(const MatrixF& m, const std::vector<std::size_t>& rows);

}  // namespace jumpkit::hsdata

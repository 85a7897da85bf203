#pragma once

// Shortcut heads: cheap maps from a block-l hidden state to an approximation
// of the block-m output.
//
//   Identity            h
//   FullLinear          h W                 W: H x H
//   LowRank             (h A) B             A: H x r, B: r x H, r = floor(H / 100)
//   NormalizedLowRank   (bn(h) A) B         bn: per-feature batch normalization
//
// None of the linear maps carry a bias; for the normalized head the batch-norm
// shift supplies the affine offset.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/types.hpp"

namespace jumpkit::shortcut {

enum class Variant : std::uint32_t { Identity = 0, FullLinear = 1, LowRank = 2, NormalizedLowRank = 3 };

// Short names used on the command line and in file names: id, jtc, njtc, nnjtc.
std::string_view short_name(Variant v);
Variant variant_from_name(std::string_view name);
bool is_trainable(Variant v);

enum class Mode { Train, Eval };

struct BatchNormState {
  VectorD gamma;
  VectorD beta;
  VectorD running_mean;
  VectorD running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormState identity(int hidden_dim, double epsilon = 1e-5, double momentum = 0.1);
};

struct ShortcutHead {
  Variant variant = Variant::Identity;
  int from_block = 0;
  int to_block = 1;
  int hidden_dim = 0;
  int rank = 0;  // 0 unless low-rank
  MatrixD w;     // FullLinear
  MatrixD a;     // LowRank, NormalizedLowRank
  MatrixD b;
  BatchNormState bn;  // NormalizedLowRank

  std::int64_t parameter_count() const;
};

// floor(H / 100); throws InvalidArgument when H < 100.
int rank_for_hidden_dim(int hidden_dim);

// Identity 0, FullLinear H^2, LowRank 2 H r, NormalizedLowRank 2 H r + 4 H with r = floor(H / 100).
std::int64_t param_count(Variant v, int hidden_dim);

ShortcutHead make_identity(int from_block, int to_block, int hidden_dim);
ShortcutHead make_full_linear(int from_block, int to_block, MatrixD w);
ShortcutHead make_low_rank(int from_block, int to_block, MatrixD a, MatrixD b);
ShortcutHead make_normalized_low_rank(int from_block, int to_block, MatrixD a, MatrixD b, BatchNormState bn);

// Throws InvalidArgument on any broken invariant (block order, shapes, finiteness).
void validate(const ShortcutHead& head);

// Per-feature statistics over the batch axis and the normalized input.
struct BatchStats {
  VectorD mean;
  VectorD var;  // biased (divides by batch size)
  MatrixD xhat;
};
BatchStats batch_statistics(const MatrixD& h, double epsilon);

// Eval-mode forward. Pure: uses running statistics and mutates nothing.
MatrixD forward(const ShortcutHead& head, const MatrixD& h);

// Train mode normalizes with batch statistics and folds them into the running
// statistics with the configured momentum. Requires batch >= 2 for the
// normalized head.
MatrixD forward(ShortcutHead& head, const MatrixD& h, Mode mode);

// Train-mode output without touching running statistics.
MatrixD forward_batch_stats(const ShortcutHead& head, const MatrixD& h);

// Binary record: magic "JKSH", u32 version, u32 variant, i32 from, i32 to,
// u32 H, u32 r, then (normalized only) f64 epsilon, f64 momentum, gamma, beta,
// running_mean, running_var, then W or A, B. Tensors are row-major float32 LE.
io::Bytes serialize_head(const ShortcutHead& head);
ShortcutHead deserialize_head(std::span<const std::uint8_t> bytes, const std::string& source = "head");

void save_head(const ShortcutHead& head, const std::filesystem::path& path);
ShortcutHead load_head(const std::filesystem::path& path);

// Rounds every tensor to float32 so the in-memory head equals its serialized form.
void round_to_storage(ShortcutHead& head);

}  // namespace jumpkit::shortcut

#pragma once

// Evaluation of shortcut approximations: coordinate-averaged r2 in hidden
// space, and precision / surprisal of the decoded next-token distribution.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "jumpkit/hsdata.hpp"
#include "jumpkit/shortcut.hpp"
#include "jumpkit/types.hpp"

namespace jumpkit::metrics {

struct R2Result {
  double value = 0.0;
  int skipped_coordinates = 0;  // zero-variance coordinates left out of the average
};

// Mean over coordinates j of 1 - SSR_j / SST_j, with SST_j about the mean of
// the true batch. Values below zero are legal. Needs N >= 2.
R2Result coordinate_averaged_r2(const MatrixD& truth, const MatrixD& pred);

// Final normalization followed by the LM head.
class Unembedding {
 public:
  Unembedding(const MatrixF& lm_head, const hsdata::FinalNorm* final_norm);
  // Uses the dataset's final norm when present and apply_final_norm is set.
  static Unembedding from_dataset(const hsdata::HiddenPairDataset& dataset, bool apply_final_norm = true);

  int vocab_size() const { return static_cast<int>(lm_head_.rows()); }
  int hidden_dim() const { return static_cast<int>(lm_head_.cols()); }

  // Logits for one hidden state. Every caller goes through this routine, so
  // logits for a given state are bit-identical wherever they are computed.
  VectorD logits(const Eigen::Ref<const VectorD>& h) const;
  MatrixD logits_batch(const MatrixD& h) const;

 private:
  MatrixD lm_head_;  // V x H, widened once
  std::optional<hsdata::FinalNorm> final_norm_;
};

VectorD unembed(const VectorD& h, const hsdata::HiddenPairDataset& dataset, bool apply_final_norm = true);

// Index of the largest entry; ties go to the lowest index.
int argmax(const Eigen::Ref<const VectorD>& logits);
VectorD softmax(const Eigen::Ref<const VectorD>& logits);
// -log softmax(logits)[token], natural log, max-subtracted.
double negative_log_prob(const Eigen::Ref<const VectorD>& logits, int token);

// Fraction of samples whose decoded argmax agrees with the true final state's argmax.
double precision(const MatrixD& true_final, const MatrixD& approx_final, const Unembedding& unembedding);
// Mean NLL (nats) of the true argmax token under the approximate distribution.
double surprisal(const MatrixD& true_final, const MatrixD& approx_final, const Unembedding& unembedding);

enum class Metric { R2, Precision, Surprisal };
std::string to_string(Metric m);
Metric metric_from_name(const std::string& name);

struct GridCell {
  double value = 0.0;
  long long n = 0;

  friend bool operator==(const GridCell&, const GridCell&) = default;
};

struct JumpEvalGrid {
  Metric metric = Metric::R2;
  std::string variant;
  std::string split = "val";
  std::map<std::pair<int, int>, GridCell> cells;  // (from_block, to_block), from < to

  bool has(int from_block, int to_block) const { return cells.count({from_block, to_block}) > 0; }
  const GridCell& at(int from_block, int to_block) const;
};

using HeadSet = std::map<std::pair<int, int>, shortcut::ShortcutHead>;

struct GridOptions {
  bool apply_final_norm = true;
};

// Evaluates every requested (from, to) cell on the validation split. r2 is
// measured against block-`to` states; precision and surprisal need to_block to
// be the final block. Throws InvalidArgument listing every missing head.
JumpEvalGrid build_jump_grid(const hsdata::HiddenPairDataset& dataset, const HeadSet& heads, Metric metric,
                             const std::vector<std::pair<int, int>>& requested, const GridOptions& options = {});

// Long CSV: from_block,to_block,value,n with values printed round-trip exact.
std::string to_csv(const JumpEvalGrid& grid);
JumpEvalGrid grid_from_csv(const std::string& text, Metric metric, const std::string& variant);
nlohmann::json to_json(const JumpEvalGrid& grid);

}  // namespace jumpkit::metrics

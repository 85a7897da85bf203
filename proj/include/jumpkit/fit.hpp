#pragma once

// Fitting shortcut heads by mini-batch gradient descent on
//   L = (1/N) * sum_i || pred_i - target_i ||^2
// (squared norm per sample, averaged over samples only, not over coordinates).

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jumpkit/hsdata.hpp"
#include "jumpkit/rng.hpp"
#include "jumpkit/shortcut.hpp"
#include "jumpkit/types.hpp"

namespace jumpkit::fit {

enum class OptimizerKind { Sgd, Adam };

struct FitConfig {
  double learning_rate = 1e-3;
  int epochs = 20;
  int batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::optional<double> init_scale;  // default 1 / sqrt(H)
  bool shuffle = true;
  std::optional<int> rank;  // default floor(H / 100)
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  void validate() const;
};

// Applies one `key=value` setting; throws InvalidArgument for unknown keys or bad values.
void set_config_value(FitConfig& config, const std::string& key, const std::string& value);

// Reads `key=value` lines; blank lines and lines starting with '#' are ignored.
FitConfig parse_fit_config(std::istream& in, FitConfig base = {});
FitConfig load_fit_config(const std::filesystem::path& path, FitConfig base = {});
nlohmann::json to_json(const FitConfig& config);

struct FitReport {
  shortcut::Variant variant = shortcut::Variant::Identity;
  std::vector<double> train_loss;  // one entry per epoch
  std::optional<double> val_loss;
  int epochs_run = 0;
  long long steps = 0;
  double wall_time_s = 0.0;
  // Normalized heads only: the momentum-accumulated running statistics, kept
  // for comparison with the full-pass statistics stored in the head.
  VectorD ema_running_mean;
  VectorD ema_running_var;
};
nlohmann::json to_json(const FitReport& report);

struct FitResult {
  shortcut::ShortcutHead head;
  FitReport report;
};

// Training and validation pairs for one (from, to) jump.
struct PairSet {
  MatrixD train_x;
  MatrixD train_y;
  MatrixD val_x;  // may have zero rows
  MatrixD val_y;
};
PairSet make_pairs(const hsdata::HiddenPairDataset& dataset, int from_block, int to_block);

double mse_loss(const MatrixD& pred, const MatrixD& target);

struct Gradients {
  double loss = 0.0;
  MatrixD dw;
  MatrixD da;
  MatrixD db;
  VectorD dgamma;
  VectorD dbeta;
};

// Exact gradients of mse_loss(forward(head, h), target). The normalized head is
// differentiated through its train-mode graph (batch statistics).
Gradients loss_gradients(const shortcut::ShortcutHead& head, const MatrixD& h, const MatrixD& target);

// Seeded random head of the given variant (uniform in [-scale, scale]).
shortcut::ShortcutHead init_head(shortcut::Variant variant, int from_block, int to_block, int hidden_dim,
                                 const FitConfig& config, Rng& rng);

FitResult fit_pairs(const PairSet& pairs, int from_block, int to_block, shortcut::Variant variant,
                    const FitConfig& config);
FitResult fit_shortcut(const hsdata::HiddenPairDataset& dataset, int from_block, int to_block,
                       shortcut::Variant variant, const FitConfig& config);

constexpr double kRidgeLambda = 1e-6;

// Closed-form argmin_W sum ||x W - y||^2 via the normal equations. Falls back
// to ridge regularization with kRidgeLambda when x is rank deficient, unless
// allow_ridge is false, in which case that throws.
MatrixD least_squares_oracle(const MatrixD& x, const MatrixD& y, bool allow_ridge = true);
MatrixD least_squares_oracle(const hsdata::HiddenPairDataset& dataset, int from_block, int to_block,
                             bool allow_ridge = true);

}  // namespace jumpkit::fit

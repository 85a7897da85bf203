#pragma once

// Confidence-threshold early exit. For each token the eligible blocks are
// scanned in order; at block l the shortcut head l -> final is decoded and the
// token exits as soon as the top softmax probability reaches lambda. Tokens
// that never reach it fall through to the full model's own output.

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jumpkit/hsdata.hpp"
#include "jumpkit/metrics.hpp"
#include "jumpkit/shortcut.hpp"
#include "jumpkit/toylm.hpp"

namespace jumpkit::exitsim {

struct ExitPolicy {
  double lambda = 0.9;
  std::vector<int> eligible_blocks;  // strictly increasing, each < num_blocks
  shortcut::Variant variant = shortcut::Variant::NormalizedLowRank;
};

struct ExitRecord {
  long long sample = 0;
  int exit_block = 0;
  double confidence = 0.0;
  int predicted_token = 0;
  int full_token = 0;
  int blocks_skipped = 0;
};

struct ExitTrace {
  double lambda = 0.0;
  int num_blocks = 0;
  std::string variant;
  std::vector<ExitRecord> records;
  double mean_exit_block = 0.0;
  double agreement = 0.0;
  double skipped_fraction = 0.0;
  long long early_exits = 0;
};

struct ExitOptions {
  bool validation_only = true;  // dataset mode: replay the validation split only
  bool apply_final_norm = true;
};

// Throws InvalidArgument when lambda is outside (0, 1], the eligible blocks are
// not strictly increasing, or any eligible block lacks a head to the final block.
void check_policy(const ExitPolicy& policy, const metrics::HeadSet& heads, int num_blocks);

// Offline replay against dumped states.
ExitTrace run_early_exit(const hsdata::HiddenPairDataset& dataset, const metrics::HeadSet& heads,
                         const ExitPolicy& policy, const ExitOptions& options = {});

// Live mode: every position of every sentence is run through the toy model.
ExitTrace run_early_exit(const toylm::ToyLM& model, const std::vector<std::vector<int>>& sentences,
                         const metrics::HeadSet& heads, const ExitPolicy& policy);

// Mean over tokens of (num_blocks - exit_block) / num_blocks.
double compute_savings(const ExitTrace& trace, int num_blocks);

nlohmann::json to_json(const ExitTrace& trace);
std::string to_csv(const ExitTrace& trace);

}  // namespace jumpkit::exitsim

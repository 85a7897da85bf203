#pragma once

// Subcommands of the jumpkit tool, callable in-process. Each returns normally
// on success and throws a jumpkit::Error subtype on failure; the binary maps
// those onto exit codes (see exit_code_for).

#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jumpkit/fit.hpp"
#include "jumpkit/metrics.hpp"

namespace jumpkit::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 2, kDataFormat = 3, kDivergence = 4 };
int exit_code_for(const std::exception& e);

struct ToyDumpOptions {
  std::string profile = "default";
  std::filesystem::path out;
  std::uint64_t seed = 0;         // model initialization
  int train_steps = 500;
  double train_lr = 3e-3;
  int train_batch = 4;
  int train_seq_len = 32;
  std::uint64_t train_seed = 0;
  int positions_per_sentence = 1;
  std::uint64_t sample_seed = 0;
  std::optional<std::filesystem::path> corpus;  // bundled corpus when unset
};

struct DataOptions {
  std::filesystem::path data;
  double train_fraction = 0.75;
  std::uint64_t split_seed = 0;
};

struct FitOptions {
  DataOptions data;
  int from_block = -1;
  int to_block = -1;
  std::string variant = "nnjtc";
  std::filesystem::path out;                   // .head file
  std::optional<std::filesystem::path> report;  // defaults to <out>.report.json
  fit::FitConfig config;
};

struct GridOptions {
  DataOptions data;
  std::optional<std::filesystem::path> heads;
  std::vector<std::string> variants = {"id", "jtc", "njtc", "nnjtc"};
  std::vector<std::string> metrics = {"r2"};
  std::string cells = "all";  // all | final
  std::filesystem::path out;
  bool fit_missing = false;
  bool apply_final_norm = true;
  int jobs = 1;
  fit::FitConfig config;
};

struct SimulateOptions {
  DataOptions data;
  std::optional<std::filesystem::path> heads;
  std::string variant = "nnjtc";
  std::vector<double> lambdas = {0.9};
  std::vector<int> eligible;  // empty: blocks 1 .. num_blocks-1
  std::filesystem::path out;
  bool all_samples = false;
  bool apply_final_norm = true;
};

struct ReportOptions {
  DataOptions data;
  std::optional<std::filesystem::path> heads;
  std::vector<std::string> variants = {"id", "jtc", "njtc", "nnjtc"};
  std::filesystem::path out;
  bool fit_missing = false;
  bool apply_final_norm = true;
  int jobs = 1;
  fit::FitConfig config;
};

nlohmann::json cmd_toy_dump(const ToyDumpOptions& options);
nlohmann::json cmd_fit(const FitOptions& options);
nlohmann::json cmd_grid(const GridOptions& options);
nlohmann::json cmd_simulate(const SimulateOptions& options);
nlohmann::json cmd_report(const ReportOptions& options);

// File name of the head for one jump, e.g. "nnjtc_3_8.head".
std::string head_file_name(shortcut::Variant variant, int from_block, int to_block);

}  // namespace jumpkit::cli

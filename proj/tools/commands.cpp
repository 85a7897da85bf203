#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/error.hpp"
#include "jumpkit/exitsim.hpp"
#include "jumpkit/hsdata.hpp"
#include "jumpkit/shortcut.hpp"
#include "jumpkit/toylm.hpp"

namespace jumpkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using shortcut::Variant;

namespace {

using Clock = std::chrono::steady_clock;
using Cell = std::pair<int, int>;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

json data_json(const DataOptions& d) {
  return {{"path", d.data.string()}, {"train_fraction", d.train_fraction}, {"split_seed", d.split_seed}};
}

hsdata::HiddenPairDataset load(const DataOptions& d) {
  if (d.data.empty()) throw InvalidArgument("--data is required");
  return hsdata::load_dataset(d.data, {d.train_fraction, d.split_seed});
}

// Records what a command did; every artifact listed must exist.
void write_run_manifest(const fs::path& path, const std::string& command, const json& config,
                        const std::vector<fs::path>& artifacts, Clock::time_point start) {
  json j;
  j["command"] = command;
  j["tool_version"] = kToolVersion;
  j["config"] = config;
  j["artifacts"] = json::array();
  for (const auto& a : artifacts) {
    if (!fs::exists(a)) throw IoError("artifact " + a.string() + " was not written");
    j["artifacts"].push_back(a.string());
  }
  j["wall_time_s"] = std::chrono::duration<double>(Clock::now() - start).count();
  io::write_text_atomic(path, j.dump(2) + "\n");
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are rethrown
// in index order once every job has finished.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::clamp(jobs, 1, 64));
  if (threads == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Identity heads are built on the fly. Trainable heads are read from
// heads_dir, or fitted and saved there when fit_missing is set.
metrics::HeadSet obtain_heads(const hsdata::HiddenPairDataset& d, Variant variant, const std::vector<Cell>& cells,
                              const std::optional<fs::path>& heads_dir, bool fit_missing, const fit::FitConfig& config,
                              int jobs, std::vector<fs::path>* written, bool allow_missing = false) {
  metrics::HeadSet heads;
  if (variant == Variant::Identity) {
    for (auto [l, m] : cells) heads.emplace(Cell{l, m}, shortcut::make_identity(l, m, d.hidden_dim()));
    return heads;
  }
  std::vector<Cell> to_fit;
  std::vector<std::string> missing;
  for (auto [l, m] : cells) {
    const auto path = heads_dir ? *heads_dir / head_file_name(variant, l, m) : fs::path();
    if (heads_dir && fs::exists(path)) {
      auto head = shortcut::load_head(path);
      if (head.variant != variant || head.from_block != l || head.to_block != m || head.hidden_dim != d.hidden_dim()) {
        throw FormatError(path.string() + ": head does not match the requested jump or dataset");
      }
      heads.emplace(Cell{l, m}, std::move(head));
    } else if (fit_missing) {
      to_fit.push_back({l, m});
    } else {
      missing.push_back(heads_dir ? path.string() : head_file_name(variant, l, m));
    }
  }
  if (!missing.empty() && !allow_missing) {
    std::string msg = std::to_string(missing.size()) + " missing head file(s):";
    for (const auto& p : missing) msg += "\n  " + p;
    throw InvalidArgument(msg);
  }
  if (to_fit.empty()) return heads;
  if (!heads_dir) throw InvalidArgument("--fit-missing needs a heads directory");
  ensure_dir(*heads_dir);
  std::vector<std::optional<shortcut::ShortcutHead>> fitted(to_fit.size());
  parallel_for(to_fit.size(), jobs, [&](std::size_t i) {
    const auto [l, m] = to_fit[i];
    auto result = fit::fit_shortcut(d, l, m, variant, config);
    shortcut::save_head(result.head, *heads_dir / head_file_name(variant, l, m));
    fitted[i] = std::move(result.head);
  });
  for (std::size_t i = 0; i < to_fit.size(); ++i) {
    heads.emplace(to_fit[i], std::move(*fitted[i]));
    if (written) written->push_back(*heads_dir / head_file_name(variant, to_fit[i].first, to_fit[i].second));
  }
  return heads;
}

std::vector<Cell> cells_to_final(int num_blocks) {
  std::vector<Cell> cells;
  for (int l = 0; l < num_blocks; ++l) cells.push_back({l, num_blocks});
  return cells;
}

std::vector<Cell> all_cells(int num_blocks) {
  std::vector<Cell> cells;
  for (int l = 0; l < num_blocks; ++l) {
    for (int m = l + 1; m <= num_blocks; ++m) cells.push_back({l, m});
  }
  return cells;
}

std::string lambda_tag(double lambda) {
  std::ostringstream s;
  s << lambda;
  return s.str();
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return kDivergence;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IoError*>(&e)) return kDataFormat;
  if (dynamic_cast<const InvalidArgument*>(&e)) return kUsage;
  return 1;
}

std::string head_file_name(Variant variant, int from_block, int to_block) {
  return std::string(shortcut::short_name(variant)) + "_" + std::to_string(from_block) + "_" +
         std::to_string(to_block) + ".head";
}

json cmd_toy_dump(const ToyDumpOptions& o) {
  const auto start = Clock::now();
  if (o.out.empty()) throw InvalidArgument("--out is required");
  auto config = toylm::profile(o.profile);
  config.seed = o.seed;
  auto model = toylm::init_toylm(config);

  std::string text;
  if (o.corpus) {
    std::ifstream in(*o.corpus);
    if (!in) throw IoError("cannot open corpus " + o.corpus->string());
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  } else {
    text = std::string(toylm::bundled_corpus());
  }
  const auto tokens = toylm::encode(text);
  // The last tenth of the token stream is held out from training.
  const auto cut = tokens.size() - tokens.size() / 10;
  const std::span<const int> train_tokens(tokens.data(), cut);
  const std::span<const int> heldout(tokens.data() + cut, tokens.size() - cut);

  const double ce_before = toylm::cross_entropy(model, heldout, config.max_seq_len);
  toylm::TrainOptions train{o.train_steps, o.train_lr, o.train_batch, o.train_seq_len, o.train_seed};
  model = toylm::train_toylm(std::move(model), train_tokens, train);
  const double ce_after = toylm::cross_entropy(model, heldout, config.max_seq_len);

  toylm::DumpOptions dump;
  dump.per_sentence = o.positions_per_sentence;
  dump.seed = o.sample_seed;
  dump.model_name = "toylm:" + o.profile + ":seed=" + std::to_string(o.seed) +
                    ":train_steps=" + std::to_string(o.train_steps);
  const auto sentences = toylm::encode_sentences(text, config.max_seq_len);
  const auto manifest = toylm::dump_activations(model, sentences, dump, o.out);
  const auto model_path = o.out / "model.toylm";
  toylm::save_toylm(model, model_path);

  json out;
  out["hidden_dim"] = manifest.hidden_dim;
  out["num_blocks"] = manifest.num_blocks;
  out["vocab_size"] = manifest.vocab_size;
  out["num_samples"] = manifest.num_samples;
  out["model_name"] = manifest.model_name;
  out["sentences"] = sentences.size();
  out["heldout_cross_entropy_before"] = ce_before;
  out["heldout_cross_entropy_after"] = ce_after;

  json cfg = {{"profile", o.profile},       {"seed", o.seed},
              {"train_steps", o.train_steps}, {"train_lr", o.train_lr},
              {"train_batch", o.train_batch}, {"train_seq_len", o.train_seq_len},
              {"train_seed", o.train_seed},   {"positions_per_sentence", o.positions_per_sentence},
              {"sample_seed", o.sample_seed}, {"corpus", o.corpus ? o.corpus->string() : "bundled"},
              {"result", out}};
  std::vector<fs::path> artifacts = {o.out / "manifest.json", model_path};
  for (const auto& f : manifest.block_files) artifacts.push_back(o.out / f);
  write_run_manifest(o.out / "toy-dump.run.json", "toy-dump", cfg, artifacts, start);
  return out;
}

json cmd_fit(const FitOptions& o) {
  const auto start = Clock::now();
  if (o.out.empty()) throw InvalidArgument("--out is required");
  if (o.from_block >= o.to_block) {
    throw InvalidArgument("--from must be smaller than --to (got " + std::to_string(o.from_block) + " and " +
                          std::to_string(o.to_block) + ")");
  }
  const auto variant = shortcut::variant_from_name(o.variant);
  o.config.validate();
  const auto d = load(o.data);
  if (o.to_block > d.num_blocks() || o.from_block < 0) {
    throw InvalidArgument("--from/--to must lie in 0.." + std::to_string(d.num_blocks()));
  }
  auto result = fit::fit_shortcut(d, o.from_block, o.to_block, variant, o.config);
  if (!o.out.parent_path().empty()) ensure_dir(o.out.parent_path());
  shortcut::save_head(result.head, o.out);

  json report;
  report["head"] = {{"variant", std::string(shortcut::short_name(variant))},
                    {"from_block", o.from_block},
                    {"to_block", o.to_block},
                    {"hidden_dim", result.head.hidden_dim},
                    {"rank", result.head.rank},
                    {"parameter_count", result.head.parameter_count()}};
  report["fit"] = fit::to_json(result.report);
  report["config"] = fit::to_json(o.config);
  report["dataset"] = data_json(o.data);
  const auto report_path = o.report.value_or(fs::path(o.out.string() + ".report.json"));
  io::write_text_atomic(report_path, report.dump(2) + "\n");

  json cfg = {{"data", data_json(o.data)}, {"from", o.from_block},     {"to", o.to_block},
              {"variant", o.variant},      {"fit", fit::to_json(o.config)}};
  write_run_manifest(fs::path(o.out.string() + ".run.json"), "fit", cfg, {o.out, report_path}, start);
  return report;
}

json cmd_grid(const GridOptions& o) {
  const auto start = Clock::now();
  if (o.out.empty()) throw InvalidArgument("--out is required");
  if (o.cells != "all" && o.cells != "final") throw InvalidArgument("--cells must be 'all' or 'final'");
  std::vector<metrics::Metric> metric_list;
  for (const auto& m : o.metrics) metric_list.push_back(metrics::metric_from_name(m));
  std::vector<Variant> variants;
  for (const auto& v : o.variants) variants.push_back(shortcut::variant_from_name(v));
  o.config.validate();
  const auto d = load(o.data);
  ensure_dir(o.out);
  const int final_block = d.num_blocks();
  const auto heads_dir = o.heads ? o.heads : (o.fit_missing ? std::optional<fs::path>(o.out / "heads") : std::nullopt);

  // Fail before any work if a head is missing anywhere.
  std::vector<std::vector<Cell>> cells_for(variants.size());
  std::vector<std::string> missing;
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<Cell> cells;
    for (auto metric : metric_list) {
      const auto c = (metric == metrics::Metric::R2 && o.cells == "all") ? all_cells(final_block) : cells_to_final(final_block);
      cells.insert(cells.end(), c.begin(), c.end());
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    cells_for[vi] = cells;
    if (variants[vi] == Variant::Identity || o.fit_missing) continue;
    for (auto [l, m] : cells) {
      const auto name = head_file_name(variants[vi], l, m);
      if (!heads_dir || !fs::exists(*heads_dir / name)) missing.push_back(heads_dir ? (*heads_dir / name).string() : name);
    }
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " missing head file(s):";
    for (const auto& p : missing) msg += "\n  " + p;
    throw InvalidArgument(msg);
  }

  std::vector<fs::path> artifacts;
  json summary = json::array();
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    const auto heads = obtain_heads(d, variants[vi], cells_for[vi], heads_dir, o.fit_missing, o.config, o.jobs, &artifacts);
    for (auto metric : metric_list) {
      const auto requested =
          (metric == metrics::Metric::R2 && o.cells == "all") ? all_cells(final_block) : cells_to_final(final_block);
      auto grid = metrics::build_jump_grid(d, heads, metric, requested, {o.apply_final_norm});
      grid.variant = std::string(shortcut::short_name(variants[vi]));
      const auto stem = "grid_" + grid.variant + "_" + metrics::to_string(metric);
      io::write_text_atomic(o.out / (stem + ".csv"), metrics::to_csv(grid));
      auto j = metrics::to_json(grid);
      j["final_norm_applied"] = o.apply_final_norm && d.final_norm.has_value();
      j["dataset"] = data_json(o.data);
      io::write_text_atomic(o.out / (stem + ".json"), j.dump(2) + "\n");
      artifacts.push_back(o.out / (stem + ".csv"));
      artifacts.push_back(o.out / (stem + ".json"));
      summary.push_back({{"variant", grid.variant}, {"metric", metrics::to_string(metric)}, {"cells", grid.cells.size()}});
    }
  }
  json cfg = {{"data", data_json(o.data)},
              {"heads", heads_dir ? heads_dir->string() : ""},
              {"variants", o.variants},
              {"metrics", o.metrics},
              {"cells", o.cells},
              {"fit_missing", o.fit_missing},
              {"apply_final_norm", o.apply_final_norm},
              {"jobs", o.jobs},
              {"fit", fit::to_json(o.config)}};
  write_run_manifest(o.out / "grid.run.json", "grid", cfg, artifacts, start);
  return {{"grids", summary}};
}

json cmd_simulate(const SimulateOptions& o) {
  const auto start = Clock::now();
  if (o.out.empty()) throw InvalidArgument("--out is required");
  if (o.lambdas.empty()) throw InvalidArgument("--lambda needs at least one value");
  for (double l : o.lambdas) {
    if (!(l > 0.0 && l <= 1.0)) throw InvalidArgument("--lambda values must lie in (0, 1]");
  }
  const auto variant = shortcut::variant_from_name(o.variant);
  const auto d = load(o.data);
  const int final_block = d.num_blocks();

  exitsim::ExitPolicy policy;
  policy.variant = variant;
  policy.eligible_blocks = o.eligible;
  if (policy.eligible_blocks.empty()) {
    for (int l = 1; l < final_block; ++l) policy.eligible_blocks.push_back(l);
  }
  std::vector<Cell> cells;
  for (int l : policy.eligible_blocks) {
    if (l >= 0 && l < final_block) cells.push_back({l, final_block});
  }
  const auto heads = obtain_heads(d, variant, cells, o.heads, false, {}, 1, nullptr, /*allow_missing=*/true);
  policy.lambda = o.lambdas.front();
  exitsim::check_policy(policy, heads, final_block);

  ensure_dir(o.out);
  std::vector<fs::path> artifacts;
  json traces = json::array();
  for (double lambda : o.lambdas) {
    policy.lambda = lambda;
    const auto trace = exitsim::run_early_exit(d, heads, policy, {!o.all_samples, o.apply_final_norm});
    const auto stem = "trace_" + std::string(shortcut::short_name(variant)) + "_lambda" + lambda_tag(lambda);
    auto j = exitsim::to_json(trace);
    j["eligible_blocks"] = policy.eligible_blocks;
    io::write_text_atomic(o.out / (stem + ".json"), j.dump(2) + "\n");
    io::write_text_atomic(o.out / (stem + ".csv"), exitsim::to_csv(trace));
    artifacts.push_back(o.out / (stem + ".json"));
    artifacts.push_back(o.out / (stem + ".csv"));
    traces.push_back(j);
  }
  json cfg = {{"data", data_json(o.data)},       {"heads", o.heads ? o.heads->string() : ""},
              {"variant", o.variant},            {"lambdas", o.lambdas},
              {"eligible", policy.eligible_blocks}, {"all_samples", o.all_samples},
              {"apply_final_norm", o.apply_final_norm}};
  write_run_manifest(o.out / "simulate.run.json", "simulate", cfg, artifacts, start);
  return {{"traces", traces}};
}

json cmd_report(const ReportOptions& o) {
  const auto start = Clock::now();
  if (o.out.empty()) throw InvalidArgument("--out is required");
  std::vector<Variant> variants;
  for (const auto& v : o.variants) variants.push_back(shortcut::variant_from_name(v));
  o.config.validate();
  const auto d = load(o.data);
  ensure_dir(o.out);
  const int final_block = d.num_blocks();
  const auto heads_dir = o.heads ? o.heads : (o.fit_missing ? std::optional<fs::path>(o.out / "heads") : std::nullopt);
  const auto cells = cells_to_final(final_block);

  std::vector<fs::path> artifacts;
  std::map<Variant, metrics::JumpEvalGrid> precision, surprisal, r2;
  std::map<Variant, std::int64_t> params;
  for (auto v : variants) {
    const auto heads = obtain_heads(d, v, cells, heads_dir, o.fit_missing, o.config, o.jobs, &artifacts);
    precision[v] = metrics::build_jump_grid(d, heads, metrics::Metric::Precision, cells, {o.apply_final_norm});
    surprisal[v] = metrics::build_jump_grid(d, heads, metrics::Metric::Surprisal, cells, {o.apply_final_norm});
    r2[v] = metrics::build_jump_grid(d, heads, metrics::Metric::R2, cells, {o.apply_final_norm});
    params[v] = heads.begin()->second.parameter_count();
  }

  std::string csv = "variant,from_block,to_block,precision,surprisal,r2,parameters\n";
  json curves = json::array();
  for (auto v : variants) {
    const std::string name(shortcut::short_name(v));
    json c = {{"variant", name}, {"parameters", params[v]}, {"from_block", json::array()},
              {"precision", json::array()}, {"surprisal", json::array()}, {"r2", json::array()}};
    for (auto [l, m] : cells) {
      const double p = precision[v].at(l, m).value, s = surprisal[v].at(l, m).value, q = r2[v].at(l, m).value;
      csv += csv_field(name) + "," + std::to_string(l) + "," + std::to_string(m) + "," + format_number(p) + "," +
             format_number(s) + "," + format_number(q) + "," + std::to_string(params[v]) + "\n";
      c["from_block"].push_back(l);
      c["precision"].push_back(p);
      c["surprisal"].push_back(s);
      c["r2"].push_back(q);
    }
    curves.push_back(c);
  }

  // Ordering claim: normalized low-rank precision above identity precision for
  // every exit block up to half the model depth.
  json claim = {{"description", "nnjtc precision > id precision for from_block 1..floor(num_blocks/2)"}};
  if (precision.count(Variant::NormalizedLowRank) && precision.count(Variant::Identity)) {
    bool holds = true;
    json detail = json::array();
    for (int l = 1; l <= final_block / 2; ++l) {
      const double a = precision[Variant::NormalizedLowRank].at(l, final_block).value;
      const double b = precision[Variant::Identity].at(l, final_block).value;
      holds = holds && a > b;
      detail.push_back({{"from_block", l}, {"nnjtc", a}, {"id", b}, {"holds", a > b}});
    }
    claim["status"] = holds ? "pass" : "fail";
    claim["cells"] = detail;
  } else {
    claim["status"] = "not evaluated (needs id and nnjtc)";
  }

  json report = {{"num_blocks", final_block},
                 {"hidden_dim", d.hidden_dim()},
                 {"validation_samples", d.split.val.size()},
                 {"final_norm_applied", o.apply_final_norm && d.final_norm.has_value()},
                 {"curves", curves},
                 {"ordering_claim", claim}};
  io::write_text_atomic(o.out / "report_curves.csv", csv);
  io::write_text_atomic(o.out / "report.json", report.dump(2) + "\n");
  artifacts.push_back(o.out / "report_curves.csv");
  artifacts.push_back(o.out / "report.json");
  json cfg = {{"data", data_json(o.data)}, {"heads", heads_dir ? heads_dir->string() : ""},
              {"variants", o.variants},    {"fit_missing", o.fit_missing},
              {"jobs", o.jobs},            {"fit", fit::to_json(o.config)}};
  write_run_manifest(o.out / "report.run.json", "report", cfg, artifacts, start);
  return report;
}

}  // namespace jumpkit::cli

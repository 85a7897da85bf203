// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "commands.hpp"
#include "jumpkit/binary_io.hpp"
#include "jumpkit/exitsim.hpp"
#include "jumpkit/fit.hpp"
#include "jumpkit/hsdata.hpp"
#include "jumpkit/metrics.hpp"
#include "jumpkit/shortcut.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace jumpkit;
using shortcut::Variant;
using jumpkit::testing::random_matrix;
using jumpkit::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run_criterion(const std::string& name, double budget_s, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (secs >= budget_s) {
    o.pass = false;
    o.detail += "; over time budget";
  }
  if (!o.pass) ++failures;
  std::printf("%s %s (%.1fs / %.0fs) %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, budget_s, o.detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome parameter_accounting() {
  using shortcut::param_count;
  using shortcut::rank_for_hidden_dim;
  bool ok = param_count(Variant::FullLinear, 3072) == 9'437'184;
  for (int h = 100; h <= 10'000; h += 100) {
    const auto full = param_count(Variant::FullLinear, h);
    ok = ok && param_count(Variant::LowRank, h) * 50 == full;  // exactly 0.02
  }
  for (int h = 401; h <= 10'000; ++h) {
    ok = ok && static_cast<double>(param_count(Variant::NormalizedLowRank, h)) <
                   0.03 * static_cast<double>(param_count(Variant::FullLinear, h));
  }
  ok = ok && rank_for_hidden_dim(1600) == 16 && rank_for_hidden_dim(3072) == 30 && rank_for_hidden_dim(4096) == 40;
  ok = ok && param_count(Variant::Identity, 3072) == 0;
  return {ok, "jtc(3072)=" + std::to_string(param_count(Variant::FullLinear, 3072))};
}

Outcome gradient_check() {
  using oracles::numeric_grad;
  using oracles::tensor_rel_error;
  Rng rng(7001);
  int instances = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const Variant v = trial % 3 == 0 ? Variant::FullLinear : trial % 3 == 1 ? Variant::LowRank : Variant::NormalizedLowRank;
    const int h = 2 + static_cast<int>(rng.index(11));  // 2..12
    const int n = 2 + static_cast<int>(rng.index(7));   // 2..8
    fit::FitConfig cfg;
    cfg.rank = 1 + static_cast<int>(rng.index(2));
    cfg.init_scale = 1.0;
    auto head = fit::init_head(v, 0, 1, h, cfg, rng);
    if (v == Variant::NormalizedLowRank) {
      for (int j = 0; j < h; ++j) {
        head.bn.gamma[j] = 0.5 + rng.uniform();
        head.bn.beta[j] = rng.normal();
      }
    }
    const MatrixD x = random_matrix(n, h, rng), y = random_matrix(n, h, rng);
    const auto g = fit::loss_gradients(head, x, y);
    if (v == Variant::FullLinear) {
      worst = std::max(worst, tensor_rel_error(g.dw, numeric_grad(head, head.w, x, y)));
    } else {
      worst = std::max(worst, tensor_rel_error(g.da, numeric_grad(head, head.a, x, y)));
      worst = std::max(worst, tensor_rel_error(g.db, numeric_grad(head, head.b, x, y)));
    }
    if (v == Variant::NormalizedLowRank) {
      worst = std::max(worst, tensor_rel_error(g.dgamma, numeric_grad(head, head.bn.gamma, x, y)));
      worst = std::max(worst, tensor_rel_error(g.dbeta, numeric_grad(head, head.bn.beta, x, y)));
    }
    ++instances;
  }
  return {instances >= 100 && worst < 1e-4,
          std::to_string(instances) + " instances, worst relative error " + fmt("%.2e", worst)};
}

Outcome convex_optimum() {
  double worst = 0.0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    const int h = 16, n = 256;
    fit::PairSet p;
    p.train_x = random_matrix(n, h, rng);
    const MatrixD w = random_matrix(h, h, rng, 1.0 / std::sqrt(h));
    p.train_y = p.train_x * w + 0.1 * random_matrix(n, h, rng);

    const MatrixD w_star = fit::least_squares_oracle(p.train_x, p.train_y, false);
    const double oracle = fit::mse_loss(p.train_x * w_star, p.train_y);

    fit::FitConfig cfg;
    cfg.optimizer = fit::OptimizerKind::Sgd;
    cfg.learning_rate = 0.2;
    cfg.batch_size = n;
    cfg.epochs = 300;
    cfg.seed = seed;
    const auto r = fit::fit_pairs(p, 0, 1, Variant::FullLinear, cfg);
    const double trained = fit::mse_loss(shortcut::forward(r.head, p.train_x), p.train_y);
    const double gap = (trained - oracle) / oracle;
    worst = std::max(worst, gap);
    ok = ok && gap <= 0.02;
  }
  return {ok, "10 problems, worst excess over normal equations " + fmt("%.3e", worst)};
}

Outcome low_rank_recovery() {
  double worst = 0.0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    const int h = 12, r = 2, n_train = 256, n_val = 64;
    const int true_rank = 1 + static_cast<int>(seed % 2);
    const MatrixD map = random_matrix(h, true_rank, rng) * random_matrix(true_rank, h, rng) / std::sqrt(h);
    fit::PairSet p;
    p.train_x = random_matrix(n_train, h, rng);
    p.val_x = random_matrix(n_val, h, rng);
    p.train_y = p.train_x * map;
    p.val_y = p.val_x * map;

    fit::FitConfig cfg;
    cfg.rank = r;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 32;
    cfg.epochs = 300;
    cfg.seed = seed;
    const auto res = fit::fit_pairs(p, 0, 1, Variant::LowRank, cfg);
    const double zero = fit::mse_loss(MatrixD::Zero(n_val, h), p.val_y);
    const double ratio = *res.report.val_loss / zero;
    worst = std::max(worst, ratio);
    ok = ok && ratio < 1e-3;
  }
  return {ok, "10 seeds, worst val/zero-predictor loss " + fmt("%.2e", worst)};
}

Outcome metric_oracles() {
  Rng rng(300);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 2 + static_cast<int>(rng.index(15));
    const int n = 2 + static_cast<int>(rng.index(30));
    const int v = 2 + static_cast<int>(rng.index(40));
    const MatrixD t = random_matrix(n, h, rng), a = t + random_matrix(n, h, rng, 0.5);
    const MatrixF lm = random_matrix(v, h, rng).cast<float>();
    hsdata::FinalNorm fn;
    fn.scale = (VectorD::Ones(h) + 0.3 * random_matrix(h, 1, rng).col(0)).cast<float>();
    fn.bias = (0.1 * random_matrix(h, 1, rng).col(0)).cast<float>();
    fn.kind = trial % 2 == 0 ? hsdata::NormKind::LayerNorm : hsdata::NormKind::RmsNorm;
    const hsdata::FinalNorm* norm = trial % 4 == 3 ? nullptr : &fn;
    const metrics::Unembedding u(lm, norm);

    worst = std::max(worst, std::abs(metrics::coordinate_averaged_r2(t, a).value - oracles::naive_r2(t, a)));
    worst = std::max(worst, std::abs(metrics::precision(t, a, u) - oracles::naive_precision(t, a, lm, norm)));
    worst = std::max(worst, std::abs(metrics::surprisal(t, a, u) - oracles::naive_surprisal(t, a, lm, norm)));
  }
  double uniform_worst = 0.0;
  for (int v : {2, 10, 1000}) {
    // All-zero states give all-zero logits: a uniform predictor.
    const MatrixF lm = random_matrix(v, 4, rng).cast<float>();
    const metrics::Unembedding u(lm, nullptr);
    const MatrixD zeros = MatrixD::Zero(5, 4);
    uniform_worst = std::max(uniform_worst, std::abs(metrics::surprisal(zeros, zeros, u) - std::log(v)));
  }
  return {worst <= 1e-5 && uniform_worst <= 1e-6,
          "100 inputs, worst |lib - loop| " + fmt("%.2e", worst) + ", uniform vs ln V " + fmt("%.2e", uniform_worst)};
}

// ---------------------------------------------------------------------------
// Toy pipeline: toy-dump -> fit -> grid, shared by the remaining criteria.

const std::vector<std::string> kVariants = {"id", "jtc", "njtc", "nnjtc"};

void toy_pipeline(const fs::path& root) {
  cli::ToyDumpOptions dump;
  dump.profile = "default";
  dump.positions_per_sentence = 12;
  dump.out = root / "data";
  cli::cmd_toy_dump(dump);

  cli::FitOptions f;
  f.data.data = dump.out;
  f.from_block = 4;
  f.to_block = 8;
  f.variant = "nnjtc";
  f.out = root / "fit" / "nnjtc_4_8.head";
  cli::cmd_fit(f);

  cli::GridOptions g;
  g.data.data = dump.out;
  g.heads = root / "heads";
  g.variants = kVariants;
  g.metrics = {"r2", "precision", "surprisal"};
  g.cells = "final";
  g.fit_missing = true;
  g.out = root / "grid";
  cli::cmd_grid(g);
}

metrics::JumpEvalGrid read_grid(const fs::path& root, const std::string& variant, metrics::Metric m) {
  const auto path = root / "grid" / ("grid_" + variant + "_" + metrics::to_string(m) + ".csv");
  return metrics::grid_from_csv(slurp(path), m, variant);
}

Outcome end_to_end(const fs::path& root) {
  toy_pipeline(root);
  const auto d = hsdata::load_dataset(root / "data");
  const int last = d.num_blocks();
  bool ok = d.hidden_dim() == 128 && last == 8;

  // (a) the full linear map contains the identity
  const auto id_r2 = read_grid(root, "id", metrics::Metric::R2);
  const auto jtc_r2 = read_grid(root, "jtc", metrics::Metric::R2);
  bool superset = true;
  double min_margin = INFINITY;
  for (int l = 0; l < last; ++l) {
    const double margin = jtc_r2.at(l, last).value - id_r2.at(l, last).value;
    min_margin = std::min(min_margin, margin);
    superset = superset && margin >= -0.01;
  }

  // (b) true vs true
  const MatrixD truth = hsdata::gather_rows(d.block(last), d.split.val).cast<double>();
  const auto u = metrics::Unembedding::from_dataset(d);
  const hsdata::FinalNorm* norm = d.final_norm ? &*d.final_norm : nullptr;
  const double self_precision = metrics::precision(truth, truth, u);
  const double self_surprisal = metrics::surprisal(truth, truth, u);
  const double oracle_surprisal = oracles::naive_surprisal(truth, truth, *d.lm_head, norm);
  const bool self_ok = self_precision == 1.0 && std::abs(self_surprisal - oracle_surprisal) <= 1e-9 * oracle_surprisal;

  // (c) every cell finite and in range
  bool legal = true;
  int cells = 0;
  for (const auto& v : kVariants) {
    for (auto m : {metrics::Metric::R2, metrics::Metric::Precision, metrics::Metric::Surprisal}) {
      const auto grid = read_grid(root, v, m);
      legal = legal && static_cast<int>(grid.cells.size()) == last;
      for (const auto& [key, cell] : grid.cells) {
        const double x = cell.value;
        bool in_range = std::isfinite(x);
        if (m == metrics::Metric::R2) in_range = in_range && x <= 1.0;
        if (m == metrics::Metric::Precision) in_range = in_range && x >= 0.0 && x <= 1.0;
        if (m == metrics::Metric::Surprisal) in_range = in_range && x >= 0.0;
        legal = legal && in_range && key.second == last;
        ++cells;
      }
    }
  }

  cli::ReportOptions rep;
  rep.data.data = root / "data";
  rep.heads = root / "heads";
  rep.out = root / "report";
  const auto report = cli::cmd_report(rep);
  const auto claim = report["ordering_claim"]["status"].get<std::string>();

  ok = ok && superset && self_ok && legal;
  std::string detail = "(a) " + std::string(superset ? "ok" : "violated") + " min jtc-id r2 margin " +
                       fmt("%.4g", min_margin) + "; (b) precision " + fmt("%.1f", self_precision) +
                       " surprisal " + fmt("%.6f", self_surprisal) + " oracle " + fmt("%.6f", oracle_surprisal) +
                       "; (c) " + std::to_string(cells) + " cells " + (legal ? "legal" : "ILLEGAL") +
                       "; ordering claim (report only): " + claim;
  return {ok, detail};
}

Outcome early_exit(const fs::path& root) {
  const auto d = hsdata::load_dataset(root / "data");
  const int last = d.num_blocks();
  metrics::HeadSet heads;
  exitsim::ExitPolicy policy;
  policy.variant = Variant::NormalizedLowRank;
  for (int l = 1; l < last; ++l) {
    heads.emplace(std::pair{l, last}, shortcut::load_head(root / "heads" /
                                                          cli::head_file_name(Variant::NormalizedLowRank, l, last)));
    policy.eligible_blocks.push_back(l);
  }
  bool monotone = true;
  std::vector<int> previous;
  std::string depths;
  for (int k = 1; k <= 9; ++k) {
    policy.lambda = k / 10.0;
    const auto t = exitsim::run_early_exit(d, heads, policy);
    if (previous.empty()) previous.assign(t.records.size(), 0);
    for (std::size_t i = 0; i < t.records.size(); ++i) {
      monotone = monotone && t.records[i].exit_block >= previous[i];
      previous[i] = t.records[i].exit_block;
    }
    depths += (depths.empty() ? "" : " ") + fmt("%.2f", t.mean_exit_block);
  }

  exitsim::ExitTrace forced;
  forced.records.push_back(exitsim::ExitRecord{0, 4, 1.0, 0, 0, 28});
  const double savings = exitsim::compute_savings(forced, 32);
  return {monotone && savings == 0.875,
          "mean exit block over lambda 0.1..0.9: " + depths + "; savings(4 of 32) = " + fmt("%.3f", savings)};
}

Outcome determinism(const fs::path& first, const fs::path& second) {
  toy_pipeline(second);
  int compared = 0;
  std::string mismatch;
  for (const auto& entry : fs::recursive_directory_iterator(first)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext != ".head" && ext != ".csv") continue;
    const auto rel = fs::relative(entry.path(), first);
    if (rel.begin()->string() == "report") continue;  // only in the first run
    if (!fs::exists(second / rel) || io::read_file(entry.path()) != io::read_file(second / rel)) {
      mismatch += " " + rel.string();
    }
    ++compared;
  }
  // Block files of the dump, too.
  for (int k = 0; k <= 8; ++k) {
    const auto rel = fs::path("data") / ("block_" + std::to_string(k) + ".bin");
    if (io::read_file(first / rel) != io::read_file(second / rel)) mismatch += " " + rel.string();
    ++compared;
  }
  return {mismatch.empty() && compared > 9,
          std::to_string(compared) + " files compared" + (mismatch.empty() ? ", all identical" : "; differ:" + mismatch)};
}

}  // namespace

int main() {
  TempDir first("jk_accept_a"), second("jk_accept_b");

  run_criterion("[1] parameter accounting", 1, parameter_accounting);
  run_criterion("[2] gradients vs central differences", 30, gradient_check);
  run_criterion("[3] full linear reaches the normal-equations optimum", 60, convex_optimum);
  run_criterion("[4] exact low-rank recovery", 60, low_rank_recovery);
  run_criterion("[5] metric oracles", 30, metric_oracles);
  run_criterion("[6] end-to-end toy grid", 600, [&] { return end_to_end(first.path()); });
  run_criterion("[7] early exit monotonicity and savings", 60, [&] { return early_exit(first.path()); });
  run_criterion("[8] determinism of toy-dump, fit and grid", 600,
                [&] { return determinism(first.path(), second.path()); });

  std::printf("%s: %d failing criteria\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}

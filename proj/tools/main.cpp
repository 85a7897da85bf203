#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "jumpkit/error.hpp"

namespace {

using namespace jumpkit;

// Wires every FitConfig field onto flags. Explicit flags override a --config file.
struct FitFlags {
  std::string config_file;
  fit::FitConfig config;
  std::string optimizer = "adam";
  double init_scale = 0.0;
  int rank = 0;
  bool no_shuffle = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value fit config file (flags given explicitly win)");
    app->add_option("--lr", config.learning_rate, "learning rate")->capture_default_str();
    app->add_option("--epochs", config.epochs, "training epochs")->capture_default_str();
    app->add_option("--batch-size", config.batch_size, "mini-batch size (>= 2)")->capture_default_str();
    app->add_option("--optimizer", optimizer, "sgd or adam")->capture_default_str()->check(CLI::IsMember({"sgd", "adam"}));
    app->add_option("--adam-beta1", config.adam_beta1, "Adam beta1")->capture_default_str();
    app->add_option("--adam-beta2", config.adam_beta2, "Adam beta2")->capture_default_str();
    app->add_option("--adam-eps", config.adam_eps, "Adam epsilon")->capture_default_str();
    app->add_option("--fit-seed", config.seed, "seed for initialization and shuffling")->capture_default_str();
    app->add_option("--init-scale", init_scale, "uniform init half-width (0 means 1/sqrt(H))")->capture_default_str();
    app->add_option("--rank", rank, "low-rank dimension (0 means floor(H/100))")->capture_default_str();
    app->add_flag("--no-shuffle", no_shuffle, "keep sample order fixed across epochs");
    app->add_option("--bn-epsilon", config.bn_epsilon, "batch-norm epsilon")->capture_default_str();
    app->add_option("--bn-momentum", config.bn_momentum, "batch-norm running-stat momentum")->capture_default_str();
  }

  fit::FitConfig resolve(const CLI::App* app) const {
    fit::FitConfig c;
    if (!config_file.empty()) c = fit::load_fit_config(config_file);
    auto given = [&](const char* name) { return app->count(name) > 0; };
    if (given("--lr")) c.learning_rate = config.learning_rate;
    if (given("--epochs")) c.epochs = config.epochs;
    if (given("--batch-size")) c.batch_size = config.batch_size;
    if (given("--optimizer")) c.optimizer = optimizer == "sgd" ? fit::OptimizerKind::Sgd : fit::OptimizerKind::Adam;
    if (given("--adam-beta1")) c.adam_beta1 = config.adam_beta1;
    if (given("--adam-beta2")) c.adam_beta2 = config.adam_beta2;
    if (given("--adam-eps")) c.adam_eps = config.adam_eps;
    if (given("--fit-seed")) c.seed = config.seed;
    if (given("--init-scale") && init_scale > 0.0) c.init_scale = init_scale;
    if (given("--rank") && rank > 0) c.rank = rank;
    if (no_shuffle) c.shuffle = false;
    if (given("--bn-epsilon")) c.bn_epsilon = config.bn_epsilon;
    if (given("--bn-momentum")) c.bn_momentum = config.bn_momentum;
    c.validate();
    return c;
  }
};

void attach_data(CLI::App* app, cli::DataOptions& d) {
  app->add_option("--data", d.data, "activation dump directory")->required();
  app->add_option("--train-fraction", d.train_fraction, "fraction of samples (or sentences) used for training")
      ->capture_default_str();
  app->add_option("--split-seed", d.split_seed, "seed of the train/val split")->capture_default_str();
}

std::vector<std::string> split_list(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& item : raw) {
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!part.empty()) out.push_back(part);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jumpkit: fit and evaluate low-rank shortcut heads between transformer blocks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cli::kToolVersion);

  cli::ToyDumpOptions toy;
  std::string toy_corpus;
  auto* toy_cmd = app.add_subcommand("toy-dump", "build (and lightly train) a toy model and write an activation dump");
  toy_cmd->add_option("--profile", toy.profile, "model preset: default, wide, tiny")->capture_default_str();
  toy_cmd->add_option("--out", toy.out, "output dataset directory")->required();
  toy_cmd->add_option("--seed", toy.seed, "model initialization seed")->capture_default_str();
  toy_cmd->add_option("--train-steps", toy.train_steps, "training steps (0 keeps the random model)")->capture_default_str();
  toy_cmd->add_option("--train-lr", toy.train_lr, "training learning rate")->capture_default_str();
  toy_cmd->add_option("--train-batch", toy.train_batch, "training windows per step")->capture_default_str();
  toy_cmd->add_option("--train-seq-len", toy.train_seq_len, "training window length")->capture_default_str();
  toy_cmd->add_option("--train-seed", toy.train_seed, "seed of training window sampling")->capture_default_str();
  toy_cmd->add_option("--positions-per-sentence", toy.positions_per_sentence, "token positions sampled per sentence")
      ->capture_default_str();
  toy_cmd->add_option("--sample-seed", toy.sample_seed, "seed of token-position sampling")->capture_default_str();
  toy_cmd->add_option("--corpus", toy_corpus, "text corpus (default: bundled corpus)");

  cli::FitOptions fit_opts;
  FitFlags fit_flags;
  std::string report_path;
  auto* fit_cmd = app.add_subcommand("fit", "fit one shortcut head between two blocks");
  attach_data(fit_cmd, fit_opts.data);
  fit_cmd->add_option("--from", fit_opts.from_block, "source block l")->required();
  fit_cmd->add_option("--to", fit_opts.to_block, "target block m (> l)")->required();
  fit_cmd->add_option("--variant", fit_opts.variant, "id, jtc, njtc or nnjtc")->capture_default_str();
  fit_cmd->add_option("--out", fit_opts.out, "output .head file")->required();
  fit_cmd->add_option("--report", report_path, "fit report JSON (default: <out>.report.json)");
  fit_flags.attach(fit_cmd);

  cli::GridOptions grid;
  FitFlags grid_flags;
  std::vector<std::string> grid_variants{"id,jtc,njtc,nnjtc"}, grid_metrics{"r2"};
  std::string grid_heads;
  bool grid_no_norm = false;
  auto* grid_cmd = app.add_subcommand("grid", "evaluate jump grids (r2, precision, surprisal) on the validation split");
  attach_data(grid_cmd, grid.data);
  grid_cmd->add_option("--heads", grid_heads, "directory of .head files");
  grid_cmd->add_option("--variant", grid_variants, "comma-separated variants")->capture_default_str();
  grid_cmd->add_option("--metric", grid_metrics, "comma-separated metrics: r2, precision, surprisal")->capture_default_str();
  grid_cmd->add_option("--cells", grid.cells, "r2 cells: all pairs or only jumps to the final block")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "final"}));
  grid_cmd->add_option("--out", grid.out, "output directory")->required();
  grid_cmd->add_flag("--fit-missing", grid.fit_missing, "fit and save heads that are not on disk");
  grid_cmd->add_flag("--no-final-norm", grid_no_norm, "decode without the model's final normalization");
  grid_cmd->add_option("--jobs", grid.jobs, "parallel fits")->capture_default_str();
  grid_flags.attach(grid_cmd);

  cli::SimulateOptions sim;
  std::vector<std::string> sim_lambdas{"0.9"};
  std::string sim_heads;
  bool sim_no_norm = false;
  auto* sim_cmd = app.add_subcommand("simulate", "replay confidence-threshold early exit over a dump");
  attach_data(sim_cmd, sim.data);
  sim_cmd->add_option("--heads", sim_heads, "directory of .head files");
  sim_cmd->add_option("--variant", sim.variant, "shortcut variant used for exits")->capture_default_str();
  sim_cmd->add_option("--lambda", sim_lambdas, "confidence threshold(s), comma-separated, each in (0, 1]")
      ->capture_default_str();
  sim_cmd->add_option("--eligible", sim.eligible, "exit-eligible blocks (default 1..num_blocks-1)")->delimiter(',');
  sim_cmd->add_option("--out", sim.out, "output directory")->required();
  sim_cmd->add_flag("--all-samples", sim.all_samples, "replay every sample instead of the validation split");
  sim_cmd->add_flag("--no-final-norm", sim_no_norm, "decode without the model's final normalization");

  cli::ReportOptions rep;
  FitFlags rep_flags;
  std::vector<std::string> rep_variants{"id,jtc,njtc,nnjtc"};
  std::string rep_heads;
  bool rep_no_norm = false;
  auto* rep_cmd = app.add_subcommand("report", "precision/surprisal/r2 curves for exits to the final block");
  attach_data(rep_cmd, rep.data);
  rep_cmd->add_option("--heads", rep_heads, "directory of .head files");
  rep_cmd->add_option("--variant", rep_variants, "comma-separated variants")->capture_default_str();
  rep_cmd->add_option("--out", rep.out, "output directory")->required();
  rep_cmd->add_flag("--fit-missing", rep.fit_missing, "fit and save heads that are not on disk");
  rep_cmd->add_flag("--no-final-norm", rep_no_norm, "decode without the model's final normalization");
  rep_cmd->add_option("--jobs", rep.jobs, "parallel fits")->capture_default_str();
  rep_flags.attach(rep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kUsage;
  }

  try {
    nlohmann::json out;
    if (toy_cmd->parsed()) {
      if (!toy_corpus.empty()) toy.corpus = toy_corpus;
      out = cli::cmd_toy_dump(toy);
    } else if (fit_cmd->parsed()) {
      fit_opts.config = fit_flags.resolve(fit_cmd);
      if (!report_path.empty()) fit_opts.report = report_path;
      out = cli::cmd_fit(fit_opts);
    } else if (grid_cmd->parsed()) {
      grid.config = grid_flags.resolve(grid_cmd);
      grid.variants = split_list(grid_variants);
      grid.metrics = split_list(grid_metrics);
      if (!grid_heads.empty()) grid.heads = grid_heads;
      grid.apply_final_norm = !grid_no_norm;
      out = cli::cmd_grid(grid);
    } else if (sim_cmd->parsed()) {
      sim.lambdas.clear();
      for (const auto& s : split_list(sim_lambdas)) {
        try {
          sim.lambdas.push_back(std::stod(s));
        } catch (const std::exception&) {
          throw InvalidArgument("--lambda: '" + s + "' is not a number");
        }
      }
      if (!sim_heads.empty()) sim.heads = sim_heads;
      sim.apply_final_norm = !sim_no_norm;
      out = cli::cmd_simulate(sim);
    } else if (rep_cmd->parsed()) {
      rep.config = rep_flags.resolve(rep_cmd);
      rep.variants = split_list(rep_variants);
      if (!rep_heads.empty()) rep.heads = rep_heads;
      rep.apply_final_norm = !rep_no_norm;
      out = cli::cmd_report(rep);
    }
    std::cout << out.dump(2) << "\n";
    return cli::kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_code_for(e);
  }
}

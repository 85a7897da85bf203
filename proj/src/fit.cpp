#include "jumpkit/fit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "jumpkit/error.hpp"
#include "jumpkit/rng.hpp"

namespace jumpkit::fit {

using shortcut::ShortcutHead;
using shortcut::Variant;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument("fit config: '" + key + "' expects a number, got '" + value + "'");
  }
}

long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument("fit config: '" + key + "' expects an integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw InvalidArgument("fit config: '" + key + "' expects a boolean, got '" + value + "'");
}

// One trainable tensor and its gradient, viewed as flat arrays.
struct Slot {
  double* param;
  const double* grad;
  Eigen::Index size;
};

class Optimizer {
 public:
  explicit Optimizer(const FitConfig& c) : config_(c) {}

  void step(const std::vector<Slot>& slots) {
    ++t_;
    if (m_.empty()) {
      for (const auto& s : slots) {
        m_.emplace_back(VectorD::Zero(s.size));
        v_.emplace_back(VectorD::Zero(s.size));
      }
    }
    const double lr = config_.learning_rate;
    for (std::size_t k = 0; k < slots.size(); ++k) {
      Eigen::Map<VectorD> p(slots[k].param, slots[k].size);
      Eigen::Map<const VectorD> g(slots[k].grad, slots[k].size);
      if (config_.optimizer == OptimizerKind::Sgd) {
        p -= lr * g;
        continue;
      }
      const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
      m_[k] = b1 * m_[k] + (1.0 - b1) * g;
      v_[k] = b2 * v_[k] + (1.0 - b2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      p.array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + config_.adam_eps);
    }
  }

 private:
  FitConfig config_;
  long long t_ = 0;
  std::vector<VectorD> m_, v_;
};

std::vector<Slot> slots_for(ShortcutHead& head, const Gradients& g) {
  switch (head.variant) {
    case Variant::FullLinear: return {{head.w.data(), g.dw.data(), head.w.size()}};
    case Variant::LowRank:
      return {{head.a.data(), g.da.data(), head.a.size()}, {head.b.data(), g.db.data(), head.b.size()}};
    case Variant::NormalizedLowRank:
      return {{head.a.data(), g.da.data(), head.a.size()},
              {head.b.data(), g.db.data(), head.b.size()},
              {head.bn.gamma.data(), g.dgamma.data(), head.bn.gamma.size()},
              {head.bn.beta.data(), g.dbeta.data(), head.bn.beta.size()}};
    case Variant::Identity: break;
  }
  return {};
}

MatrixD gather(const MatrixD& m, std::span<const std::size_t> rows) {
  MatrixD out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

MatrixD to_double(const MatrixF& m) { return m.cast<double>(); }

MatrixD uniform_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

}  // namespace

void FitConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning_rate must be positive");
  if (epochs < 1) throw InvalidArgument("epochs must be positive");
  if (batch_size < 2) throw InvalidArgument("batch_size must be at least 2");
  if (init_scale && !(*init_scale > 0.0)) throw InvalidArgument("init_scale must be positive");
  if (rank && *rank < 1) throw InvalidArgument("rank must be at least 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw InvalidArgument("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw InvalidArgument("adam_eps must be positive");
  if (!(bn_epsilon > 0.0)) throw InvalidArgument("bn_epsilon must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) throw InvalidArgument("bn_momentum must lie in (0, 1]");
}

void set_config_value(FitConfig& c, const std::string& key, const std::string& value) {
  if (key == "learning_rate" || key == "lr") {
    c.learning_rate = parse_double(key, value);
  } else if (key == "epochs") {
    c.epochs = static_cast<int>(parse_int(key, value));
  } else if (key == "batch_size") {
    c.batch_size = static_cast<int>(parse_int(key, value));
  } else if (key == "optimizer") {
    if (value == "sgd") {
      c.optimizer = OptimizerKind::Sgd;
    } else if (value == "adam") {
      c.optimizer = OptimizerKind::Adam;
    } else {
      throw InvalidArgument("fit config: optimizer must be sgd or adam");
    }
  } else if (key == "adam_beta1") {
    c.adam_beta1 = parse_double(key, value);
  } else if (key == "adam_beta2") {
    c.adam_beta2 = parse_double(key, value);
  } else if (key == "adam_eps") {
    c.adam_eps = parse_double(key, value);
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_int(key, value));
  } else if (key == "init_scale") {
    c.init_scale = parse_double(key, value);
  } else if (key == "shuffle") {
    c.shuffle = parse_bool(key, value);
  } else if (key == "rank") {
    c.rank = static_cast<int>(parse_int(key, value));
  } else if (key == "bn_epsilon") {
    c.bn_epsilon = parse_double(key, value);
  } else if (key == "bn_momentum") {
    c.bn_momentum = parse_double(key, value);
  } else {
    throw InvalidArgument("fit config: unknown key '" + key + "'");
  }
}

FitConfig parse_fit_config(std::istream& in, FitConfig base) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("fit config line " + std::to_string(lineno) + ": expected key=value");
    }
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

FitConfig load_fit_config(const std::filesystem::path& path, FitConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fit config " + path.string());
  return parse_fit_config(in, std::move(base));
}

nlohmann::json to_json(const FitConfig& c) {
  nlohmann::json j;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = c.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["init_scale"] = c.init_scale ? nlohmann::json(*c.init_scale) : nlohmann::json("1/sqrt(H)");
  j["shuffle"] = c.shuffle;
  j["rank"] = c.rank ? nlohmann::json(*c.rank) : nlohmann::json("floor(H/100)");
  j["bn_epsilon"] = c.bn_epsilon;
  j["bn_momentum"] = c.bn_momentum;
  return j;
}

nlohmann::json to_json(const FitReport& r) {
  nlohmann::json j;
  j["variant"] = std::string(shortcut::short_name(r.variant));
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr);
  j["epochs_run"] = r.epochs_run;
  j["steps"] = r.steps;
  j["wall_time_s"] = r.wall_time_s;
  if (r.ema_running_mean.size() > 0) {
    j["ema_running_mean"] = std::vector<double>(r.ema_running_mean.begin(), r.ema_running_mean.end());
    j["ema_running_var"] = std::vector<double>(r.ema_running_var.begin(), r.ema_running_var.end());
  }
  return j;
}

PairSet make_pairs(const hsdata::HiddenPairDataset& d, int from_block, int to_block) {
  if (from_block >= to_block) {
    throw InvalidArgument("from_block must be smaller than to_block (got " + std::to_string(from_block) + " -> " +
                          std::to_string(to_block) + ")");
  }
  const auto& x = d.block(from_block);
  const auto& y = d.block(to_block);
  PairSet p;
  p.train_x = to_double(hsdata::gather_rows(x, d.split.train));
  p.train_y = to_double(hsdata::gather_rows(y, d.split.train));
  p.val_x = to_double(hsdata::gather_rows(x, d.split.val));
  p.val_y = to_double(hsdata::gather_rows(y, d.split.val));
  return p;
}

double mse_loss(const MatrixD& pred, const MatrixD& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw InvalidArgument("mse_loss: shape mismatch");
  }
  if (pred.rows() < 1) throw InvalidArgument("mse_loss: empty batch");
  if (!pred.allFinite() || !target.allFinite()) throw InvalidArgument("mse_loss: non-finite input");
  return (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

Gradients loss_gradients(const ShortcutHead& head, const MatrixD& h, const MatrixD& target) {
  if (!shortcut::is_trainable(head.variant)) throw InvalidArgument("identity shortcut has no trainable parameters");
  if (h.cols() != head.hidden_dim || target.cols() != head.hidden_dim || h.rows() != target.rows()) {
    throw InvalidArgument("loss_gradients: shape mismatch");
  }
  const double n = static_cast<double>(h.rows());
  Gradients g;
  switch (head.variant) {
    case Variant::FullLinear: {
      const MatrixD pred = h * head.w;
      const MatrixD dpred = (2.0 / n) * (pred - target);
      g.loss = (pred - target).squaredNorm() / n;
      g.dw = h.transpose() * dpred;
      break;
    }
    case Variant::LowRank: {
      const MatrixD z = h * head.a;
      const MatrixD pred = z * head.b;
      const MatrixD dpred = (2.0 / n) * (pred - target);
      g.loss = (pred - target).squaredNorm() / n;
      g.db = z.transpose() * dpred;
      g.da = h.transpose() * (dpred * head.b.transpose());
      break;
    }
    case Variant::NormalizedLowRank: {
      if (h.rows() < 2) throw InvalidArgument("normalized shortcut: gradients need a batch of at least 2");
      const auto stats = shortcut::batch_statistics(h, head.bn.epsilon);
      MatrixD y = stats.xhat * head.bn.gamma.asDiagonal();
      y.rowwise() += head.bn.beta.transpose();
      const MatrixD z = y * head.a;
      const MatrixD pred = z * head.b;
      const MatrixD dpred = (2.0 / n) * (pred - target);
      g.loss = (pred - target).squaredNorm() / n;
      g.db = z.transpose() * dpred;
      const MatrixD dz = dpred * head.b.transpose();
      g.da = y.transpose() * dz;
      const MatrixD dy = dz * head.a.transpose();
      g.dgamma = (dy.array() * stats.xhat.array()).colwise().sum().transpose();
      g.dbeta = dy.colwise().sum().transpose();
      break;
    }
    case Variant::Identity: break;
  }
  return g;
}

ShortcutHead init_head(Variant variant, int from_block, int to_block, int hidden_dim, const FitConfig& config,
                       Rng& rng) {
  const double scale = config.init_scale.value_or(1.0 / std::sqrt(static_cast<double>(hidden_dim)));
  switch (variant) {
    case Variant::Identity: return shortcut::make_identity(from_block, to_block, hidden_dim);
    case Variant::FullLinear:
      return shortcut::make_full_linear(from_block, to_block, uniform_matrix(hidden_dim, hidden_dim, scale, rng));
    case Variant::LowRank:
    case Variant::NormalizedLowRank: {
      const int r = config.rank ? *config.rank : shortcut::rank_for_hidden_dim(hidden_dim);
      if (r < 1 || r > hidden_dim) throw InvalidArgument("rank must lie in 1..hidden_dim");
      MatrixD a = uniform_matrix(hidden_dim, r, scale, rng);
      MatrixD b = uniform_matrix(r, hidden_dim, scale, rng);
      if (variant == Variant::LowRank) return shortcut::make_low_rank(from_block, to_block, std::move(a), std::move(b));
      return shortcut::make_normalized_low_rank(
          from_block, to_block, std::move(a), std::move(b),
          shortcut::BatchNormState::identity(hidden_dim, config.bn_epsilon, config.bn_momentum));
    }
  }
  throw InvalidArgument("unknown variant");
}

FitResult fit_pairs(const PairSet& pairs, int from_block, int to_block, Variant variant, const FitConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto n_train = static_cast<std::size_t>(pairs.train_x.rows());
  const int hidden_dim = static_cast<int>(pairs.train_x.cols());
  if (pairs.train_y.rows() != pairs.train_x.rows() || pairs.train_y.cols() != hidden_dim ||
      pairs.val_x.rows() != pairs.val_y.rows()) {
    throw InvalidArgument("fit: inconsistent pair shapes");
  }

  Rng rng(config.seed);
  FitResult result{init_head(variant, from_block, to_block, hidden_dim, config, rng), {}};
  auto& head = result.head;
  auto& report = result.report;
  report.variant = variant;

  if (shortcut::is_trainable(variant)) {
    if (n_train < static_cast<std::size_t>(config.batch_size)) {
      throw InvalidArgument("batch_size " + std::to_string(config.batch_size) + " exceeds the " +
                            std::to_string(n_train) + " training samples");
    }
    Optimizer optimizer(config);
    std::vector<std::size_t> order(n_train);
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (config.shuffle) rng.shuffle(std::span<std::size_t>(order));
      double loss_sum = 0.0;
      for (std::size_t begin = 0; begin < n_train; begin += bs) {
        std::size_t end = std::min(begin + bs, n_train);
        // A trailing batch of one has no batch variance; widen it backwards by one sample.
        if (end - begin == 1 && variant == Variant::NormalizedLowRank) begin = end - 2;
        const std::span<const std::size_t> rows(order.data() + begin, end - begin);
        const MatrixD x = gather(pairs.train_x, rows);
        const MatrixD y = gather(pairs.train_y, rows);
        const auto grads = loss_gradients(head, x, y);
        if (variant == Variant::NormalizedLowRank) {
          const auto stats = shortcut::batch_statistics(x, head.bn.epsilon);
          auto& bn = head.bn;
          bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * stats.mean;
          bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * stats.var;
        }
        optimizer.step(slots_for(head, grads));
        loss_sum += grads.loss * static_cast<double>(rows.size());
        ++report.steps;
        if (end == n_train) break;
      }
      const double epoch_loss = loss_sum / static_cast<double>(n_train);
      if (!std::isfinite(epoch_loss) || !head.a.allFinite() || !head.b.allFinite() || !head.w.allFinite()) {
        throw DivergenceError("training diverged: non-finite loss in epoch " + std::to_string(epoch), epoch);
      }
      report.train_loss.push_back(epoch_loss);
      report.epochs_run = epoch;
    }
    if (variant == Variant::NormalizedLowRank) {
      report.ema_running_mean = head.bn.running_mean;
      report.ema_running_var = head.bn.running_var;
      const auto full = shortcut::batch_statistics(pairs.train_x, head.bn.epsilon);
      head.bn.running_mean = full.mean;
      head.bn.running_var = full.var;
    }
    shortcut::round_to_storage(head);
    shortcut::validate(head);
  }

  if (pairs.val_x.rows() > 0) report.val_loss = mse_loss(shortcut::forward(head, pairs.val_x), pairs.val_y);
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

FitResult fit_shortcut(const hsdata::HiddenPairDataset& dataset, int from_block, int to_block, Variant variant,
                       const FitConfig& config) {
  if (to_block > dataset.num_blocks()) {
    throw InvalidArgument("to_block " + std::to_string(to_block) + " exceeds num_blocks " +
                          std::to_string(dataset.num_blocks()));
  }
  return fit_pairs(make_pairs(dataset, from_block, to_block), from_block, to_block, variant, config);
}

MatrixD least_squares_oracle(const MatrixD& x, const MatrixD& y, bool allow_ridge) {
  if (x.rows() != y.rows()) throw InvalidArgument("least_squares_oracle: row mismatch");
  const Eigen::Index h = x.cols();
  const MatrixD gram = x.transpose() * x;
  const MatrixD rhs = x.transpose() * y;
  Eigen::ColPivHouseholderQR<MatrixD> qr(x);
  const bool full_rank = x.rows() >= h && qr.rank() == h;
  if (full_rank) return gram.ldlt().solve(rhs);
  if (!allow_ridge) throw InvalidArgument("least_squares_oracle: design matrix is rank deficient");
  const MatrixD ridge = gram + kRidgeLambda * MatrixD::Identity(h, h);
  return ridge.ldlt().solve(rhs);
}

MatrixD least_squares_oracle(const hsdata::HiddenPairDataset& dataset, int from_block, int to_block,
                             bool allow_ridge) {
  const auto pairs = make_pairs(dataset, from_block, to_block);
  return least_squares_oracle(pairs.train_x, pairs.train_y, allow_ridge);
}

}  // namespace jumpkit::fit

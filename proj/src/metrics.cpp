#include "jumpkit/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "jumpkit/error.hpp"

namespace jumpkit::metrics {

using hsdata::HiddenPairDataset;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

MatrixD states_for(const HiddenPairDataset& d, int block, const std::vector<std::size_t>& rows) {
  return hsdata::gather_rows(d.block(block), rows).cast<double>();
}

}  // namespace

R2Result coordinate_averaged_r2(const MatrixD& truth, const MatrixD& pred) {
  if (truth.rows() != pred.rows() || truth.cols() != pred.cols()) throw InvalidArgument("r2: shape mismatch");
  if (truth.rows() < 2) throw InvalidArgument("r2: need at least 2 samples");
  R2Result out;
  double total = 0.0;
  int used = 0;
  for (Eigen::Index j = 0; j < truth.cols(); ++j) {
    const auto t = truth.col(j).array();
    const double mean = t.mean();
    const double sst = (t - mean).square().sum();
    // Constant coordinates (up to rounding in the mean) have no defined r2.
    if (sst <= 1e-24 * std::max(1.0, t.square().sum())) {
      ++out.skipped_coordinates;
      continue;
    }
    const double ssr = (t - pred.col(j).array()).square().sum();
    total += 1.0 - ssr / sst;
    ++used;
  }
  if (used == 0) throw InvalidArgument("r2: every coordinate of the true batch is constant");
  out.value = total / used;
  return out;
}

Unembedding::Unembedding(const MatrixF& lm_head, const hsdata::FinalNorm* final_norm)
    : lm_head_(lm_head.cast<double>()) {
  if (final_norm) {
    if (final_norm->scale.size() != lm_head.cols() || final_norm->bias.size() != lm_head.cols()) {
      throw InvalidArgument("final norm width does not match lm_head");
    }
    final_norm_ = *final_norm;
  }
}

Unembedding Unembedding::from_dataset(const HiddenPairDataset& d, bool apply_final_norm) {
  if (!d.lm_head) throw InvalidArgument("dataset has no lm_head; cannot decode hidden states");
  const hsdata::FinalNorm* fn = (apply_final_norm && d.final_norm) ? &*d.final_norm : nullptr;
  return Unembedding(*d.lm_head, fn);
}

VectorD Unembedding::logits(const Eigen::Ref<const VectorD>& h) const {
  if (h.size() != lm_head_.cols()) throw InvalidArgument("unembed: hidden width mismatch");
  if (!final_norm_) return lm_head_ * h;
  const auto& fn = *final_norm_;
  const double n = static_cast<double>(h.size());
  VectorD x;
  if (fn.kind == hsdata::NormKind::LayerNorm) {
    const double mu = h.sum() / n;
    const double var = (h.array() - mu).square().sum() / n;
    x = (h.array() - mu) / std::sqrt(var + fn.epsilon);
  } else {
    const double ms = h.squaredNorm() / n;
    x = h / std::sqrt(ms + fn.epsilon);
  }
  x = x.array() * fn.scale.cast<double>().array() + fn.bias.cast<double>().array();
  return lm_head_ * x;
}

MatrixD Unembedding::logits_batch(const MatrixD& h) const {
  MatrixD out(h.rows(), lm_head_.rows());
  for (Eigen::Index i = 0; i < h.rows(); ++i) out.row(i) = logits(VectorD(h.row(i).transpose())).transpose();
  return out;
}

VectorD unembed(const VectorD& h, const HiddenPairDataset& dataset, bool apply_final_norm) {
  return Unembedding::from_dataset(dataset, apply_final_norm).logits(h);
}

int argmax(const Eigen::Ref<const VectorD>& logits) {
  if (logits.size() == 0) throw InvalidArgument("argmax of an empty vector");
  int best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  }
  return best;
}

VectorD softmax(const Eigen::Ref<const VectorD>& logits) {
  const double mx = logits.maxCoeff();
  VectorD e = (logits.array() - mx).exp();
  return e / e.sum();
}

double negative_log_prob(const Eigen::Ref<const VectorD>& logits, int token) {
  if (token < 0 || token >= logits.size()) throw InvalidArgument("token index out of range");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits[token];
}

double precision(const MatrixD& true_final, const MatrixD& approx_final, const Unembedding& u) {
  if (true_final.rows() != approx_final.rows() || true_final.cols() != approx_final.cols()) {
    throw InvalidArgument("precision: shape mismatch");
  }
  if (true_final.rows() == 0) throw InvalidArgument("precision: empty batch");
  long long hits = 0;
  for (Eigen::Index i = 0; i < true_final.rows(); ++i) {
    const int want = argmax(u.logits(VectorD(true_final.row(i).transpose())));
    const int got = argmax(u.logits(VectorD(approx_final.row(i).transpose())));
    hits += (want == got);
  }
  return static_cast<double>(hits) / static_cast<double>(true_final.rows());
}

double surprisal(const MatrixD& true_final, const MatrixD& approx_final, const Unembedding& u) {
  if (true_final.rows() != approx_final.rows() || true_final.cols() != approx_final.cols()) {
    throw InvalidArgument("surprisal: shape mismatch");
  }
  if (true_final.rows() == 0) throw InvalidArgument("surprisal: empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < true_final.rows(); ++i) {
    const int want = argmax(u.logits(VectorD(true_final.row(i).transpose())));
    total += negative_log_prob(u.logits(VectorD(approx_final.row(i).transpose())), want);
  }
  return total / static_cast<double>(true_final.rows());
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::R2: return "r2";
    case Metric::Precision: return "precision";
    case Metric::Surprisal: return "surprisal";
  }
  return "?";
}

Metric metric_from_name(const std::string& name) {
  if (name == "r2") return Metric::R2;
  if (name == "precision") return Metric::Precision;
  if (name == "surprisal") return Metric::Surprisal;
  throw InvalidArgument("unknown metric '" + name + "' (expected r2, precision, surprisal)");
}

const GridCell& JumpEvalGrid::at(int from_block, int to_block) const {
  auto it = cells.find({from_block, to_block});
  if (it == cells.end()) {
    throw InvalidArgument("grid has no cell (" + std::to_string(from_block) + ", " + std::to_string(to_block) + ")");
  }
  return it->second;
}

JumpEvalGrid build_jump_grid(const HiddenPairDataset& d, const HeadSet& heads, Metric metric,
                             const std::vector<std::pair<int, int>>& requested, const GridOptions& options) {
  JumpEvalGrid grid;
  grid.metric = metric;
  if (d.split.val.empty()) throw InvalidArgument("grid: validation split is empty");
  const int final_block = d.num_blocks();

  std::vector<std::string> problems;
  for (auto [l, m] : requested) {
    const std::string cell = "(" + std::to_string(l) + ", " + std::to_string(m) + ")";
    if (l < 0 || l >= m || m > final_block) {
      problems.push_back("invalid cell " + cell);
    } else if (metric != Metric::R2 && m != final_block) {
      problems.push_back("cell " + cell + ": " + to_string(metric) + " is defined only for jumps to block " +
                         std::to_string(final_block));
    } else if (!heads.count({l, m})) {
      problems.push_back("missing head for cell " + cell);
    }
  }
  if (!problems.empty()) {
    std::string msg = "grid: " + std::to_string(problems.size()) + " problem(s):";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InvalidArgument(msg);
  }

  std::optional<Unembedding> unembedding;
  if (metric != Metric::R2) unembedding = Unembedding::from_dataset(d, options.apply_final_norm);

  for (auto [l, m] : requested) {
    const auto& head = heads.at({l, m});
    if (head.from_block != l || head.to_block != m) {
      throw InvalidArgument("head registered for (" + std::to_string(l) + ", " + std::to_string(m) +
                            ") was fitted for a different jump");
    }
    if (grid.variant.empty()) grid.variant = std::string(shortcut::short_name(head.variant));
    const MatrixD approx = shortcut::forward(head, states_for(d, l, d.split.val));
    const MatrixD truth = states_for(d, m, d.split.val);
    GridCell cell;
    cell.n = static_cast<long long>(truth.rows());
    switch (metric) {
      case Metric::R2: cell.value = coordinate_averaged_r2(truth, approx).value; break;
      case Metric::Precision: cell.value = precision(truth, approx, *unembedding); break;
      case Metric::Surprisal: cell.value = surprisal(truth, approx, *unembedding); break;
    }
    grid.cells[{l, m}] = cell;
  }
  return grid;
}

std::string to_csv(const JumpEvalGrid& grid) {
  std::string out = "from_block,to_block,value,n\n";
  for (const auto& [key, cell] : grid.cells) {
    out += std::to_string(key.first) + "," + std::to_string(key.second) + "," + format_double(cell.value) + "," +
           std::to_string(cell.n) + "\n";
  }
  return out;
}

JumpEvalGrid grid_from_csv(const std::string& text, Metric metric, const std::string& variant) {
  JumpEvalGrid grid;
  grid.metric = metric;
  grid.variant = variant;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "from_block,to_block,value,n") {
    throw FormatError("grid csv: unexpected header");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 4) throw FormatError("grid csv line " + std::to_string(lineno) + ": expected 4 fields");
    try {
      GridCell cell;
      cell.value = std::stod(fields[2]);
      cell.n = std::stoll(fields[3]);
      grid.cells[{std::stoi(fields[0]), std::stoi(fields[1])}] = cell;
    } catch (const std::exception&) {
      throw FormatError("grid csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return grid;
}

nlohmann::json to_json(const JumpEvalGrid& grid) {
  nlohmann::json j;
  j["metric"] = to_string(grid.metric);
  j["variant"] = grid.variant;
  j["split"] = grid.split;
  j["cells"] = nlohmann::json::array();
  for (const auto& [key, cell] : grid.cells) {
    j["cells"].push_back({{"from_block", key.first}, {"to_block", key.second}, {"value", cell.value}, {"n", cell.n}});
  }
  return j;
}

}  // namespace jumpkit::metrics

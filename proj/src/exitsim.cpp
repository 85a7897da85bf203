#include "jumpkit/exitsim.hpp"

#include <cmath>
#include <cstdio>

#include "jumpkit/error.hpp"

namespace jumpkit::exitsim {

namespace {

using StateFn = std::function<VectorD(long long sample, int block)>;

ExitTrace simulate(long long num_samples, const StateFn& state, int num_blocks, const metrics::HeadSet& heads,
                   const ExitPolicy& policy, const metrics::Unembedding& unembedding,
                   const std::vector<long long>& sample_ids) {
  check_policy(policy, heads, num_blocks);
  ExitTrace trace;
  trace.lambda = policy.lambda;
  trace.num_blocks = num_blocks;
  trace.variant = std::string(shortcut::short_name(policy.variant));
  long long agree = 0;
  for (long long i = 0; i < num_samples; ++i) {
    const VectorD full_logits = unembedding.logits(state(i, num_blocks));
    ExitRecord rec;
    rec.sample = sample_ids.empty() ? i : sample_ids[static_cast<std::size_t>(i)];
    rec.full_token = metrics::argmax(full_logits);
    rec.exit_block = num_blocks;
    rec.predicted_token = rec.full_token;
    rec.confidence = metrics::softmax(full_logits).maxCoeff();
    for (int l : policy.eligible_blocks) {
      const auto& head = heads.at({l, num_blocks});
      const MatrixD approx = shortcut::forward(head, MatrixD(state(i, l).transpose()));
      const VectorD logits = unembedding.logits(VectorD(approx.row(0).transpose()));
      const double confidence = metrics::softmax(logits).maxCoeff();
      if (confidence >= policy.lambda) {
        rec.exit_block = l;
        rec.confidence = confidence;
        rec.predicted_token = metrics::argmax(logits);
        ++trace.early_exits;
        break;
      }
    }
    rec.blocks_skipped = num_blocks - rec.exit_block;
    agree += rec.predicted_token == rec.full_token;
    trace.mean_exit_block += rec.exit_block;
    trace.records.push_back(rec);
  }
  if (num_samples > 0) {
    trace.mean_exit_block /= static_cast<double>(num_samples);
    trace.agreement = static_cast<double>(agree) / static_cast<double>(num_samples);
  }
  trace.skipped_fraction = compute_savings(trace, num_blocks);
  return trace;
}

}  // namespace

void check_policy(const ExitPolicy& policy, const metrics::HeadSet& heads, int num_blocks) {
  if (!(policy.lambda > 0.0 && policy.lambda <= 1.0)) throw InvalidArgument("lambda must lie in (0, 1]");
  std::string missing;
  for (std::size_t i = 0; i < policy.eligible_blocks.size(); ++i) {
    const int l = policy.eligible_blocks[i];
    if (l < 0 || l >= num_blocks) {
      throw InvalidArgument("eligible block " + std::to_string(l) + " must lie in 0.." + std::to_string(num_blocks - 1));
    }
    if (i > 0 && l <= policy.eligible_blocks[i - 1]) throw InvalidArgument("eligible blocks must be strictly increasing");
    auto it = heads.find({l, num_blocks});
    if (it == heads.end()) {
      missing += (missing.empty() ? "" : ", ") + std::to_string(l);
    } else if (it->second.from_block != l || it->second.to_block != num_blocks) {
      throw InvalidArgument("head registered for block " + std::to_string(l) + " was fitted for another jump");
    }
  }
  if (!missing.empty()) {
    throw InvalidArgument("missing shortcut head to block " + std::to_string(num_blocks) + " for eligible block(s) " + missing);
  }
}

ExitTrace run_early_exit(const hsdata::HiddenPairDataset& d, const metrics::HeadSet& heads, const ExitPolicy& policy,
                         const ExitOptions& options) {
  const auto unembedding = metrics::Unembedding::from_dataset(d, options.apply_final_norm);
  std::vector<long long> ids;
  if (options.validation_only) {
    for (auto i : d.split.val) ids.push_back(static_cast<long long>(i));
  } else {
    for (std::size_t i = 0; i < d.num_samples(); ++i) ids.push_back(static_cast<long long>(i));
  }
  const StateFn state = [&](long long i, int block) -> VectorD {
    return d.block(block).row(ids[static_cast<std::size_t>(i)]).transpose().cast<double>();
  };
  return simulate(static_cast<long long>(ids.size()), state, d.num_blocks(), heads, policy, unembedding, ids);
}

ExitTrace run_early_exit(const toylm::ToyLM& model, const std::vector<std::vector<int>>& sentences,
                         const metrics::HeadSet& heads, const ExitPolicy& policy) {
  std::vector<std::vector<MatrixF>> per_sentence;
  long long total = 0;
  for (const auto& s : sentences) {
    per_sentence.push_back(toylm::forward_with_states(model, s).states);
    total += static_cast<long long>(s.size());
  }
  std::vector<std::pair<std::size_t, Eigen::Index>> where;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    for (std::size_t t = 0; t < sentences[s].size(); ++t) where.emplace_back(s, static_cast<Eigen::Index>(t));
  }
  const auto fn = model.final_norm();
  const metrics::Unembedding unembedding(model.tok_emb, &fn);
  const StateFn state = [&](long long i, int block) -> VectorD {
    const auto [s, t] = where[static_cast<std::size_t>(i)];
    return per_sentence[s][static_cast<std::size_t>(block)].row(t).transpose().cast<double>();
  };
  return simulate(total, state, model.config.num_blocks, heads, policy, unembedding, {});
}

double compute_savings(const ExitTrace& trace, int num_blocks) {
  if (trace.records.empty() || num_blocks <= 0) return 0.0;
  double total = 0.0;
  for (const auto& r : trace.records) total += static_cast<double>(num_blocks - r.exit_block) / num_blocks;
  return total / static_cast<double>(trace.records.size());
}

nlohmann::json to_json(const ExitTrace& t) {
  nlohmann::json j;
  j["lambda"] = t.lambda;
  j["num_blocks"] = t.num_blocks;
  j["variant"] = t.variant;
  j["num_tokens"] = t.records.size();
  j["early_exits"] = t.early_exits;
  j["mean_exit_block"] = t.mean_exit_block;
  j["agreement"] = t.agreement;
  j["skipped_fraction"] = t.skipped_fraction;
  return j;
}

std::string to_csv(const ExitTrace& t) {
  std::string out = "sample,exit_block,confidence,predicted_token,full_token,blocks_skipped\n";
  char buf[64];
  for (const auto& r : t.records) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.confidence);
    out += std::to_string(r.sample) + "," + std::to_string(r.exit_block) + "," + buf + "," +
           std::to_string(r.predicted_token) + "," + std::to_string(r.full_token) + "," +
           std::to_string(r.blocks_skipped) + "\n";
  }
  return out;
}

}  // namespace jumpkit::exitsim

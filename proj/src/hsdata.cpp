#include "jumpkit/hsdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "jumpkit/binary_io.hpp"
#include "jumpkit/error.hpp"
#include "jumpkit/rng.hpp"

namespace jumpkit::hsdata {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kLmHead = "lm_head.bin";
constexpr const char* kFinalNorm = "final_norm.bin";
constexpr const char* kSamples = "samples.json";

std::size_t train_count(std::size_t n, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw InvalidArgument("train_fraction must lie in (0, 1]");
  }
  // Tolerate representation error such as 0.57 * 100 = 56.999...
  return static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
}

template <typename T>
T required(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string(kManifest) + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string(kManifest) + ": bad value for '" + key + "': " + e.what());
  }
}

void check_finite(const float* data, std::size_t n, const std::string& what) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) {
      std::ostringstream msg;
      msg << what << ": non-finite value at element " << i;
      throw InvalidArgument(msg.str());
    }
  }
}

std::string block_file_name(int k) { return "block_" + std::to_string(k) + ".bin"; }

}  // namespace

std::string to_string(NormKind kind) { return kind == NormKind::LayerNorm ? "layernorm" : "rmsnorm"; }

NormKind norm_kind_from_string(const std::string& name) {
  if (name == "layernorm") return NormKind::LayerNorm;
  if (name == "rmsnorm") return NormKind::RmsNorm;
  throw FormatError("unknown final_norm_kind '" + name + "'");
}

const MatrixF& HiddenPairDataset::block(int k) const {
  if (k < 0 || k >= static_cast<int>(blocks.size())) {
    throw InvalidArgument("block index " + std::to_string(k) + " outside 0.." +
                          std::to_string(static_cast<int>(blocks.size()) - 1));
  }
  return blocks[static_cast<std::size_t>(k)];
}

ActivationManifest make_manifest(const std::vector<MatrixF>& blocks, const std::optional<MatrixF>& lm_head,
                                 const std::optional<FinalNorm>& final_norm, std::string model_name) {
  if (blocks.size() < 2) throw InvalidArgument("a dataset needs block 0 and at least one transformer block");
  ActivationManifest m;
  m.hidden_dim = static_cast<int>(blocks[0].cols());
  m.num_samples = static_cast<int>(blocks[0].rows());
  m.num_blocks = static_cast<int>(blocks.size()) - 1;
  m.has_lm_head = lm_head.has_value();
  m.vocab_size = lm_head ? static_cast<int>(lm_head->rows()) : 1;
  m.has_final_norm = final_norm.has_value();
  if (final_norm) {
    m.final_norm_epsilon = final_norm->epsilon;
    m.final_norm_kind = final_norm->kind;
  }
  m.model_name = std::move(model_name);
  for (int k = 0; k <= m.num_blocks; ++k) m.block_files.push_back(block_file_name(k));
  return m;
}

void validate(const HiddenPairDataset& d) {
  const auto& m = d.manifest;
  if (m.hidden_dim <= 0 || m.num_blocks <= 0 || m.vocab_size <= 0 || m.num_samples <= 0) {
    throw InvalidArgument("manifest dimensions must be positive");
  }
  if (m.dtype != "f32le") throw InvalidArgument("unsupported dtype '" + m.dtype + "'");
  if (d.blocks.size() != static_cast<std::size_t>(m.num_blocks) + 1) {
    throw InvalidArgument("expected " + std::to_string(m.num_blocks + 1) + " block matrices");
  }
  for (std::size_t k = 0; k < d.blocks.size(); ++k) {
    const auto& b = d.blocks[k];
    if (b.rows() != m.num_samples || b.cols() != m.hidden_dim) {
      throw InvalidArgument("block " + std::to_string(k) + " has shape " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
    }
    check_finite(b.data(), static_cast<std::size_t>(b.size()), "block " + std::to_string(k));
  }
  if (m.has_lm_head != d.lm_head.has_value()) throw InvalidArgument("has_lm_head disagrees with data");
  if (d.lm_head) {
    if (d.lm_head->rows() != m.vocab_size || d.lm_head->cols() != m.hidden_dim) {
      throw InvalidArgument("lm_head must be vocab_size x hidden_dim");
    }
    check_finite(d.lm_head->data(), static_cast<std::size_t>(d.lm_head->size()), "lm_head");
  }
  if (m.has_final_norm != d.final_norm.has_value()) throw InvalidArgument("has_final_norm disagrees with data");
  if (d.final_norm) {
    if (d.final_norm->scale.size() != m.hidden_dim || d.final_norm->bias.size() != m.hidden_dim) {
      throw InvalidArgument("final norm vectors must have hidden_dim entries");
    }
    if (!(d.final_norm->epsilon > 0.0)) throw InvalidArgument("final norm epsilon must be positive");
    check_finite(d.final_norm->scale.data(), d.final_norm->scale.size(), "final_norm scale");
    check_finite(d.final_norm->bias.data(), d.final_norm->bias.size(), "final_norm bias");
  }
  if (!d.samples.empty() && d.samples.size() != static_cast<std::size_t>(m.num_samples)) {
    throw InvalidArgument("sample provenance must list one entry per row");
  }
  std::vector<char> seen(static_cast<std::size_t>(m.num_samples), 0);
  for (const auto* part : {&d.split.train, &d.split.val}) {
    for (auto i : *part) {
      if (i >= seen.size() || seen[i]) throw InvalidArgument("split is not a partition of the samples");
      seen[i] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw InvalidArgument("split does not cover every sample");
  }
}

void assign_split(HiddenPairDataset& d, const SplitOptions& options) {
  if (!d.samples.empty()) {
    std::vector<std::int64_t> groups;
    groups.reserve(d.samples.size());
    for (const auto& s : d.samples) groups.push_back(s.sentence_id);
    d.split = split_train_val_grouped(groups, options.train_fraction, options.seed);
  } else {
    d.split = split_train_val(d.num_samples(), options.train_fraction, options.seed);
  }
}

HiddenPairDataset load_dataset(const fs::path& dir, const SplitOptions& split) {
  const auto manifest_path = dir / kManifest;
  if (!fs::exists(manifest_path)) throw FormatError("missing file " + manifest_path.string());
  json j;
  try {
    std::ifstream in(manifest_path);
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string(kManifest) + ": " + e.what());
  }

  HiddenPairDataset d;
  auto& m = d.manifest;
  m.hidden_dim = required<int>(j, "hidden_dim");
  m.num_blocks = required<int>(j, "num_blocks");
  m.vocab_size = required<int>(j, "vocab_size");
  m.num_samples = required<int>(j, "num_samples");
  m.dtype = required<std::string>(j, "dtype");
  m.has_lm_head = required<bool>(j, "has_lm_head");
  m.has_final_norm = required<bool>(j, "has_final_norm");
  m.model_name = required<std::string>(j, "model_name");
  m.block_files = required<std::vector<std::string>>(j, "block_files");
  if (m.dtype != "f32le") throw FormatError(std::string(kManifest) + ": unsupported dtype '" + m.dtype + "'");
  if (m.hidden_dim <= 0 || m.num_blocks <= 0 || m.vocab_size <= 0 || m.num_samples <= 0) {
    throw FormatError(std::string(kManifest) + ": dimensions must be positive");
  }
  if (m.block_files.size() != static_cast<std::size_t>(m.num_blocks) + 1) {
    throw FormatError(std::string(kManifest) + ": block_files must list num_blocks + 1 files");
  }
  if (m.has_final_norm) {
    m.final_norm_epsilon = required<double>(j, "final_norm_epsilon");
    if (j.contains("final_norm_kind")) m.final_norm_kind = norm_kind_from_string(j.at("final_norm_kind").get<std::string>());
  }

  const auto n = static_cast<Eigen::Index>(m.num_samples);
  const auto h = static_cast<Eigen::Index>(m.hidden_dim);
  for (const auto& name : m.block_files) {
    MatrixF b(n, h);
    io::read_f32_file(dir / name, {b.data(), static_cast<std::size_t>(b.size())});
    d.blocks.push_back(std::move(b));
  }
  if (m.has_lm_head) {
    MatrixF w(m.vocab_size, h);
    io::read_f32_file(dir / kLmHead, {w.data(), static_cast<std::size_t>(w.size())});
    d.lm_head = std::move(w);
  }
  if (m.has_final_norm) {
    std::vector<float> raw(static_cast<std::size_t>(2 * h));
    io::read_f32_file(dir / kFinalNorm, raw);
    FinalNorm fn;
    fn.scale = Eigen::Map<VectorF>(raw.data(), h);
    fn.bias = Eigen::Map<VectorF>(raw.data() + h, h);
    fn.epsilon = m.final_norm_epsilon;
    fn.kind = m.final_norm_kind;
    if (!(fn.epsilon > 0.0)) throw FormatError(std::string(kManifest) + ": final_norm_epsilon must be positive");
    d.final_norm = std::move(fn);
  }
  if (fs::exists(dir / kSamples)) {
    try {
      std::ifstream in(dir / kSamples);
      auto s = json::parse(in);
      auto ids = s.at("sentence_id").get<std::vector<std::int64_t>>();
      auto pos = s.at("token_position").get<std::vector<std::int64_t>>();
      if (ids.size() != pos.size() || ids.size() != static_cast<std::size_t>(n)) {
        throw FormatError(std::string(kSamples) + ": expected one entry per sample");
      }
      for (std::size_t i = 0; i < ids.size(); ++i) d.samples.push_back({ids[i], pos[i]});
    } catch (const json::exception& e) {
      throw FormatError(std::string(kSamples) + ": " + e.what());
    }
  }
  assign_split(d, split);
  validate(d);
  return d;
}

void save_dataset(const HiddenPairDataset& d, const fs::path& dir) {
  validate(d);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const auto& m = d.manifest;
  json j;
  j["hidden_dim"] = m.hidden_dim;
  j["num_blocks"] = m.num_blocks;
  j["vocab_size"] = m.vocab_size;
  j["num_samples"] = m.num_samples;
  j["dtype"] = m.dtype;
  j["has_lm_head"] = m.has_lm_head;
  j["has_final_norm"] = m.has_final_norm;
  j["model_name"] = m.model_name;
  j["block_files"] = m.block_files;
  if (m.has_final_norm) {
    j["final_norm_epsilon"] = m.final_norm_epsilon;
    j["final_norm_kind"] = to_string(m.final_norm_kind);
  }

  for (std::size_t k = 0; k < d.blocks.size(); ++k) {
    io::Bytes out;
    io::put_f32_array(out, {d.blocks[k].data(), static_cast<std::size_t>(d.blocks[k].size())});
    io::write_file_atomic(dir / m.block_files[k], out);
  }
  if (d.lm_head) {
    io::Bytes out;
    io::put_f32_array(out, {d.lm_head->data(), static_cast<std::size_t>(d.lm_head->size())});
    io::write_file_atomic(dir / kLmHead, out);
  } else {
    fs::remove(dir / kLmHead, ec);
  }
  if (d.final_norm) {
    io::Bytes out;
    io::put_f32_array(out, {d.final_norm->scale.data(), static_cast<std::size_t>(d.final_norm->scale.size())});
    io::put_f32_array(out, {d.final_norm->bias.data(), static_cast<std::size_t>(d.final_norm->bias.size())});
    io::write_file_atomic(dir / kFinalNorm, out);
  } else {
    fs::remove(dir / kFinalNorm, ec);
  }
  if (!d.samples.empty()) {
    json s;
    std::vector<std::int64_t> ids, pos;
    for (const auto& spec : d.samples) {
      ids.push_back(spec.sentence_id);
      pos.push_back(spec.token_position);
    }
    s["sentence_id"] = ids;
    s["token_position"] = pos;
    io::write_text_atomic(dir / kSamples, s.dump() + "\n");
  } else {
    fs::remove(dir / kSamples, ec);
  }
  // Manifest last: a directory with a manifest is complete.
  io::write_text_atomic(dir / kManifest, j.dump(2) + "\n");
}

std::vector<SampleSpec> sample_token_positions(const std::vector<std::int64_t>& lengths, int per_sentence,
                                               std::uint64_t seed) {
  if (lengths.empty()) throw InvalidArgument("sample_token_positions: empty sentence list");
  if (per_sentence < 1) throw InvalidArgument("sample_token_positions: per_sentence must be positive");
  Rng rng(seed);
  std::vector<SampleSpec> out;
  std::vector<std::int64_t> pool;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    const auto len = lengths[s];
    if (len < 1) throw InvalidArgument("sample_token_positions: sentence " + std::to_string(s) + " is empty");
    const auto k = std::min<std::int64_t>(per_sentence, len);
    pool.resize(static_cast<std::size_t>(len));
    std::iota(pool.begin(), pool.end(), 0);
    // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
    for (std::int64_t i = 0; i < k; ++i) {
      const auto j = i + static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(len - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    std::sort(pool.begin(), pool.begin() + k);
    for (std::int64_t i = 0; i < k; ++i) out.push_back({static_cast<std::int64_t>(s), pool[static_cast<std::size_t>(i)]});
  }
  return out;
}

SplitAssignment split_train_val(std::size_t n, double train_fraction, std::uint64_t seed) {
  const auto n_train = train_count(n, train_fraction);
  if (n_train == 0) throw InvalidArgument("split_train_val: train split would be empty");
  if (train_fraction < 1.0 && n < 2) throw InvalidArgument("split_train_val: need n >= 2 for a partial split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  SplitAssignment split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

SplitAssignment split_train_val_grouped(const std::vector<std::int64_t>& group_of_sample, double train_fraction,
                                        std::uint64_t seed) {
  std::vector<std::int64_t> groups = group_of_sample;
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
  const auto group_split = split_train_val(groups.size(), train_fraction, seed);
  std::vector<char> is_train(groups.size(), 0);
  for (auto g : group_split.train) is_train[g] = 1;
  SplitAssignment split;
  for (std::size_t i = 0; i < group_of_sample.size(); ++i) {
    const auto g = static_cast<std::size_t>(
        std::lower_bound(groups.begin(), groups.end(), group_of_sample[i]) - groups.begin());
    (is_train[g] ? split.train : split.val).push_back(i);
  }
  return split;
}

MatrixF gather_rows(const MatrixF& m, const std::vector<std::size_t>& rows) {
  MatrixF out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace jumpkit::hsdata

#include "jumpkit/shortcut.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include "jumpkit/error.hpp"

namespace jumpkit::shortcut {

namespace {

constexpr std::uint32_t kMagic = 0x48534B4A;  // "JKSH" read as little-endian u32
constexpr std::uint32_t kVersion = 1;

void require_finite(const MatrixD& m, const char* what) {
  if (!m.allFinite()) throw InvalidArgument(std::string("shortcut head: non-finite entries in ") + what);
}

void put_matrix(io::Bytes& out, const MatrixD& m) {
  std::vector<float> tmp(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) tmp[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  io::put_f32_array(out, tmp);
}

void put_vector(io::Bytes& out, const VectorD& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) io::put_f32(out, static_cast<float>(v[i]));
}

MatrixD get_matrix(io::Reader& r, Eigen::Index rows, Eigen::Index cols) {
  std::vector<float> tmp(static_cast<std::size_t>(rows * cols));
  r.f32_array(tmp);
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = tmp[static_cast<std::size_t>(i)];
  return m;
}

VectorD get_vector(io::Reader& r, Eigen::Index n) {
  MatrixD m = get_matrix(r, n, 1);
  return Eigen::Map<VectorD>(m.data(), n);
}

void check_width(const ShortcutHead& head, const MatrixD& h) {
  if (h.cols() != head.hidden_dim) {
    std::ostringstream msg;
    msg << "shortcut forward: input width " << h.cols() << " does not match hidden_dim " << head.hidden_dim;
    throw InvalidArgument(msg.str());
  }
}

MatrixD normalize_with(const MatrixD& h, const VectorD& mean, const VectorD& var, const BatchNormState& bn) {
  MatrixD y(h.rows(), h.cols());
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    const double inv = 1.0 / std::sqrt(var[j] + bn.epsilon);
    y.col(j) = ((h.col(j).array() - mean[j]) * (inv * bn.gamma[j]) + bn.beta[j]).matrix();
  }
  return y;
}

}  // namespace

std::string_view short_name(Variant v) {
  switch (v) {
    case Variant::Identity: return "id";
    case Variant::FullLinear: return "jtc";
    case Variant::LowRank: return "njtc";
    case Variant::NormalizedLowRank: return "nnjtc";
  }
  return "?";
}

Variant variant_from_name(std::string_view name) {
  if (name == "id" || name == "identity") return Variant::Identity;
  if (name == "jtc" || name == "full") return Variant::FullLinear;
  if (name == "njtc" || name == "lowrank") return Variant::LowRank;
  if (name == "nnjtc" || name == "n-njtc") return Variant::NormalizedLowRank;
  throw InvalidArgument("unknown shortcut variant '" + std::string(name) + "' (expected id, jtc, njtc, nnjtc)");
}

bool is_trainable(Variant v) { return v != Variant::Identity; }

BatchNormState BatchNormState::identity(int hidden_dim, double epsilon, double momentum) {
  BatchNormState bn;
  bn.gamma = VectorD::Ones(hidden_dim);
  bn.beta = VectorD::Zero(hidden_dim);
  bn.running_mean = VectorD::Zero(hidden_dim);
  bn.running_var = VectorD::Ones(hidden_dim);
  bn.epsilon = epsilon;
  bn.momentum = momentum;
  return bn;
}

std::int64_t ShortcutHead::parameter_count() const {
  switch (variant) {
    case Variant::Identity: return 0;
    case Variant::FullLinear: return w.size();
    case Variant::LowRank: return a.size() + b.size();
    case Variant::NormalizedLowRank: return a.size() + b.size() + 4 * static_cast<std::int64_t>(hidden_dim);
  }
  return 0;
}

int rank_for_hidden_dim(int hidden_dim) {
  if (hidden_dim < 100) {
    throw InvalidArgument("hidden_dim " + std::to_string(hidden_dim) + " < 100 gives low-rank dimension 0");
  }
  return hidden_dim / 100;
}

std::int64_t param_count(Variant v, int hidden_dim) {
  if (hidden_dim <= 0) throw InvalidArgument("hidden_dim must be positive");
  const auto h = static_cast<std::int64_t>(hidden_dim);
  switch (v) {
    case Variant::Identity: return 0;
    case Variant::FullLinear: return h * h;
    case Variant::LowRank: return 2 * h * rank_for_hidden_dim(hidden_dim);
    case Variant::NormalizedLowRank: return 2 * h * rank_for_hidden_dim(hidden_dim) + 4 * h;
  }
  return 0;
}

ShortcutHead make_identity(int from_block, int to_block, int hidden_dim) {
  ShortcutHead head;
  head.variant = Variant::Identity;
  head.from_block = from_block;
  head.to_block = to_block;
  head.hidden_dim = hidden_dim;
  validate(head);
  return head;
}

ShortcutHead make_full_linear(int from_block, int to_block, MatrixD w) {
  ShortcutHead head;
  head.variant = Variant::FullLinear;
  head.from_block = from_block;
  head.to_block = to_block;
  head.hidden_dim = static_cast<int>(w.rows());
  head.w = std::move(w);
  validate(head);
  return head;
}

ShortcutHead make_low_rank(int from_block, int to_block, MatrixD a, MatrixD b) {
  ShortcutHead head;
  head.variant = Variant::LowRank;
  head.from_block = from_block;
  head.to_block = to_block;
  head.hidden_dim = static_cast<int>(a.rows());
  head.rank = static_cast<int>(a.cols());
  head.a = std::move(a);
  head.b = std::move(b);
  validate(head);
  return head;
}

ShortcutHead make_normalized_low_rank(int from_block, int to_block, MatrixD a, MatrixD b, BatchNormState bn) {
  ShortcutHead head;
  head.variant = Variant::NormalizedLowRank;
  head.from_block = from_block;
  head.to_block = to_block;
  head.hidden_dim = static_cast<int>(a.rows());
  head.rank = static_cast<int>(a.cols());
  head.a = std::move(a);
  head.b = std::move(b);
  head.bn = std::move(bn);
  validate(head);
  return head;
}

void validate(const ShortcutHead& head) {
  if (head.from_block < 0 || head.from_block >= head.to_block) {
    throw InvalidArgument("shortcut head needs 0 <= from_block < to_block (got " + std::to_string(head.from_block) +
                          " -> " + std::to_string(head.to_block) + ")");
  }
  if (head.hidden_dim <= 0) throw InvalidArgument("shortcut head: hidden_dim must be positive");
  const Eigen::Index h = head.hidden_dim;
  switch (head.variant) {
    case Variant::Identity: break;
    case Variant::FullLinear:
      if (head.w.rows() != h || head.w.cols() != h) throw InvalidArgument("FullLinear head: W must be H x H");
      require_finite(head.w, "W");
      break;
    case Variant::LowRank:
    case Variant::NormalizedLowRank:
      if (head.rank < 1) throw InvalidArgument("low-rank head: rank must be >= 1");
      if (head.a.rows() != h || head.a.cols() != head.rank) throw InvalidArgument("low-rank head: A must be H x r");
      if (head.b.rows() != head.rank || head.b.cols() != h) throw InvalidArgument("low-rank head: B must be r x H");
      require_finite(head.a, "A");
      require_finite(head.b, "B");
      if (head.variant == Variant::NormalizedLowRank) {
        const auto& bn = head.bn;
        if (bn.gamma.size() != h || bn.beta.size() != h || bn.running_mean.size() != h || bn.running_var.size() != h) {
          throw InvalidArgument("batch norm state vectors must have H entries");
        }
        if (!bn.gamma.allFinite() || !bn.beta.allFinite() || !bn.running_mean.allFinite() ||
            !bn.running_var.allFinite()) {
          throw InvalidArgument("batch norm state has non-finite entries");
        }
        if ((bn.running_var.array() < 0.0).any()) throw InvalidArgument("batch norm running_var must be >= 0");
        if (!(bn.epsilon > 0.0)) throw InvalidArgument("batch norm epsilon must be positive");
        if (!(bn.momentum > 0.0 && bn.momentum <= 1.0)) throw InvalidArgument("batch norm momentum must lie in (0, 1]");
      }
      break;
  }
}

BatchStats batch_statistics(const MatrixD& h, double epsilon) {
  BatchStats s;
  const double n = static_cast<double>(h.rows());
  s.mean = h.colwise().sum().transpose() / n;
  s.var.resize(h.cols());
  s.xhat.resize(h.rows(), h.cols());
  for (Eigen::Index j = 0; j < h.cols(); ++j) {
    auto centered = (h.col(j).array() - s.mean[j]).eval();
    s.var[j] = centered.square().sum() / n;
    s.xhat.col(j) = (centered / std::sqrt(s.var[j] + epsilon)).matrix();
  }
  return s;
}

MatrixD forward(const ShortcutHead& head, const MatrixD& h) {
  check_width(head, h);
  switch (head.variant) {
    case Variant::Identity: return h;
    case Variant::FullLinear: return h * head.w;
    case Variant::LowRank: return (h * head.a) * head.b;
    case Variant::NormalizedLowRank:
      return (normalize_with(h, head.bn.running_mean, head.bn.running_var, head.bn) * head.a) * head.b;
  }
  return h;
}

MatrixD forward_batch_stats(const ShortcutHead& head, const MatrixD& h) {
  if (head.variant != Variant::NormalizedLowRank) return forward(head, h);
  check_width(head, h);
  if (h.rows() < 2) throw InvalidArgument("normalized shortcut: train-mode forward needs a batch of at least 2");
  const auto stats = batch_statistics(h, head.bn.epsilon);
  return (normalize_with(h, stats.mean, stats.var, head.bn) * head.a) * head.b;
}

MatrixD forward(ShortcutHead& head, const MatrixD& h, Mode mode) {
  if (mode == Mode::Eval || head.variant != Variant::NormalizedLowRank) {
    return forward(static_cast<const ShortcutHead&>(head), h);
  }
  check_width(head, h);
  if (h.rows() < 2) throw InvalidArgument("normalized shortcut: train-mode forward needs a batch of at least 2");
  const auto stats = batch_statistics(h, head.bn.epsilon);
  auto& bn = head.bn;
  bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * stats.mean;
  bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * stats.var;
  return (normalize_with(h, stats.mean, stats.var, bn) * head.a) * head.b;
}

io::Bytes serialize_head(const ShortcutHead& head) {
  validate(head);
  io::Bytes out;
  io::put_u32(out, kMagic);
  io::put_u32(out, kVersion);
  io::put_u32(out, static_cast<std::uint32_t>(head.variant));
  io::put_i32(out, head.from_block);
  io::put_i32(out, head.to_block);
  io::put_u32(out, static_cast<std::uint32_t>(head.hidden_dim));
  io::put_u32(out, static_cast<std::uint32_t>(head.rank));
  switch (head.variant) {
    case Variant::Identity: break;
    case Variant::FullLinear: put_matrix(out, head.w); break;
    case Variant::NormalizedLowRank:
      io::put_f64(out, head.bn.epsilon);
      io::put_f64(out, head.bn.momentum);
      put_vector(out, head.bn.gamma);
      put_vector(out, head.bn.beta);
      put_vector(out, head.bn.running_mean);
      put_vector(out, head.bn.running_var);
      [[fallthrough]];
    case Variant::LowRank:
      put_matrix(out, head.a);
      put_matrix(out, head.b);
      break;
  }
  return out;
}

ShortcutHead deserialize_head(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::Reader r(bytes, source);
  if (r.u32() != kMagic) throw FormatError(source + ": not a shortcut head file (bad magic)");
  const auto version = r.u32();
  if (version != kVersion) throw FormatError(source + ": unsupported head version " + std::to_string(version));
  const auto tag = r.u32();
  if (tag > static_cast<std::uint32_t>(Variant::NormalizedLowRank)) {
    throw FormatError(source + ": corrupt variant tag " + std::to_string(tag));
  }
  ShortcutHead head;
  head.variant = static_cast<Variant>(tag);
  head.from_block = r.i32();
  head.to_block = r.i32();
  const auto h = r.u32();
  const auto rank = r.u32();
  if (h == 0 || h > (1u << 20) || rank > h) throw FormatError(source + ": implausible dimensions");
  head.hidden_dim = static_cast<int>(h);
  head.rank = static_cast<int>(rank);
  const Eigen::Index hh = h, rr = rank;
  switch (head.variant) {
    case Variant::Identity:
      if (rank != 0) throw FormatError(source + ": identity head with nonzero rank");
      break;
    case Variant::FullLinear:
      if (rank != 0) throw FormatError(source + ": full linear head with nonzero rank");
      head.w = get_matrix(r, hh, hh);
      break;
    case Variant::NormalizedLowRank:
      head.bn.epsilon = r.f64();
      head.bn.momentum = r.f64();
      head.bn.gamma = get_vector(r, hh);
      head.bn.beta = get_vector(r, hh);
      head.bn.running_mean = get_vector(r, hh);
      head.bn.running_var = get_vector(r, hh);
      [[fallthrough]];
    case Variant::LowRank:
      head.a = get_matrix(r, hh, rr);
      head.b = get_matrix(r, rr, hh);
      break;
  }
  r.expect_end();
  try {
    validate(head);
  } catch (const InvalidArgument& e) {
    throw FormatError(source + ": " + e.what());
  }
  return head;
}

void save_head(const ShortcutHead& head, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_head(head));
}

ShortcutHead load_head(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("missing head file " + path.string());
  return deserialize_head(io::read_file(path), path.filename().string());
}

void round_to_storage(ShortcutHead& head) {
  auto round = [](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  };
  round(head.w);
  round(head.a);
  round(head.b);
  round(head.bn.gamma);
  round(head.bn.beta);
  round(head.bn.running_mean);
  round(head.bn.running_var);
}

}  // namespace jumpkit::shortcut

#include "jumpkit/binary_io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "jumpkit/error.hpp"

namespace jumpkit::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

template <typename U>
void put_le(Bytes& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <typename U>
U get_le(std::span<const std::uint8_t> b) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(b[i]) << (8 * i);
  }
  return v;
}

}  // namespace

void put_u32(Bytes& out, std::uint32_t v) { put_le(out, v); }
void put_i32(Bytes& out, std::int32_t v) { put_le(out, static_cast<std::uint32_t>(v)); }
void put_f32(Bytes& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(Bytes& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void put_f32_array(Bytes& out, std::span<const float> values) {
  out.reserve(out.size() + values.size() * 4);
  for (float v : values) put_f32(out, v);
}

Reader::Reader(std::span<const std::uint8_t> data, std::string source)
    : data_(data), source_(std::move(source)) {}

std::span<const std::uint8_t> Reader::take(std::size_t n) {
  if (n > remaining()) {
    std::ostringstream msg;
    msg << source_ << ": truncated at offset " << offset_ << " (need " << n << " bytes, have "
        << remaining() << ")";
    throw FormatError(msg.str());
  }
  auto s = data_.subspan(offset_, n);
  offset_ += n;
  return s;
}

std::uint32_t Reader::u32() { return get_le<std::uint32_t>(take(4)); }
std::int32_t Reader::i32() { return static_cast<std::int32_t>(u32()); }
float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(get_le<std::uint64_t>(take(8))); }

void Reader::f32_array(std::span<float> out) {
  auto raw = take(out.size() * 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(get_le<std::uint32_t>(raw.subspan(4 * i, 4)));
  }
}

void Reader::expect_end() const {
  if (remaining() != 0) {
    std::ostringstream msg;
    msg << source_ << ": " << remaining() << " trailing bytes after offset " << offset_;
    throw FormatError(msg.str());
  }
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void read_f32_file(const std::filesystem::path& path, std::span<float> out) {
  if (!std::filesystem::exists(path)) throw FormatError("missing file " + path.string());
  auto data = read_file(path);
  const auto name = path.filename().string();
  if (data.size() != out.size() * 4) {
    std::ostringstream msg;
    msg << name << ": size mismatch, expected " << out.size() * 4 << " bytes, found " << data.size();
    throw FormatError(msg.str());
  }
  Reader r(data, name);
  r.f32_array(out);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) {
      std::ostringstream msg;
      msg << name << ": non-finite value at byte offset " << i * 4;
      throw FormatError(msg.str());
    }
  }
}

}  // namespace jumpkit::io

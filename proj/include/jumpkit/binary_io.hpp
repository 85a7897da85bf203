#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace jumpkit::io {

using Bytes = std::vector<std::uint8_t>;

// Little-endian encoders. Output is identical on big-endian hosts.
void put_u32(Bytes& out, std::uint32_t v);
void put_i32(Bytes& out, std::int32_t v);
void put_f32(Bytes& out, float v);
void put_f64(Bytes& out, double v);
void put_f32_array(Bytes& out, std::span<const float> values);

// Sequential little-endian decoder over a byte buffer. Every read is bounds
// checked and throws FormatError naming `source` and the failing offset.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string source);

  std::uint32_t u32();
  std::int32_t i32();
  float f32();
  double f64();
  void f32_array(std::span<float> out);
  void expect_end() const;

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return data_.size() - offset_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n);

  std::span<const std::uint8_t> data_;
  std::string source_;
  std::size_t offset_ = 0;
};

Bytes read_file(const std::filesystem::path& path);

// Writes via a temporary sibling file and rename, so readers never observe a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// Decodes a raw float32 little-endian file into `out`; the byte length must be
// exactly out.size() * 4 and every value finite.
void read_f32_file(const std::filesystem::path& path, std::span<float> out);

}  // namespace jumpkit::io

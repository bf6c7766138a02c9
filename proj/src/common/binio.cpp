#include "atlasbench/common.hpp"

#include <bit>
#include <cstdio>

namespace atlasbench {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace binio {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_f32_array(std::ostream& os, const float* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
}

void write_i32_array(std::ostream& os, const std::int32_t* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(count * sizeof(std::int32_t)));
}

void Reader::fail(const std::string& what) const {
  throw FormatError(source_ + ": " + what, offset_);
}

void Reader::bytes(void* dst, std::size_t count) {
  is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
  const auto got = static_cast<std::size_t>(is_.gcount());
  if (got != count) {
    offset_ += got;
    fail("truncated file: wanted " + std::to_string(count) + " bytes, got " + std::to_string(got));
  }
  offset_ += count;
}

std::uint32_t Reader::u32() {
  std::uint32_t v;
  bytes(&v, sizeof(v));
  return v;
}

std::uint64_t Reader::u64() {
  std::uint64_t v;
  bytes(&v, sizeof(v));
  return v;
}

double Reader::f64() {
  double v;
  bytes(&v, sizeof(v));
  return v;
}

std::string Reader::string(std::size_t max_len) {
  const std::uint32_t len = u32();
  if (len > max_len) fail("string length " + std::to_string(len) + " exceeds limit");
  std::string s(len, '\0');
  bytes(s.data(), len);
  return s;
}

void Reader::f32_array(float* dst, std::size_t count) { bytes(dst, count * sizeof(float)); }

void Reader::i32_array(std::int32_t* dst, std::size_t count) {
  bytes(dst, count * sizeof(std::int32_t));
}

void Reader::expect_end() {
  if (is_.peek() != std::char_traits<char>::eof()) fail("trailing bytes after payload");
}

}  // namespace binio
}  // namespace atlasbench

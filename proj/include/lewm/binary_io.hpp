#pragma once

// Little-endian primitives for the checkpoint and dataset containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "lewm/error.hpp"

namespace lewm::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }

  const std::vector<char>& buffer() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw Error("write to '" + path + "' failed");
  }

 private:
  std::vector<char> buf_;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for reading");
  return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

class Reader {
 public:
  explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}

  static Reader open(const std::string& path) { return Reader(read_file(path)); }

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError("unexpected end of file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  float f32() { float v; bytes(&v, 4); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > buf_.size() - pos_) throw FormatError("string length exceeds file size");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void expect_magic(const char (&magic)[9]) {
    char got[8];
    bytes(got, 8);
    if (std::memcmp(got, magic, 8) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace lewm::io

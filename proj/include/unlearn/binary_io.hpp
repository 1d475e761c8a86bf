#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/errors.hpp"

namespace unlearn {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are not supported");

using Bytes = std::vector<unsigned char>;

class ByteWriter {
 public:
  void magic(std::string_view m) { raw(m.data(), m.size()); }

  template <typename V>
  void put(V v) {
    raw(&v, sizeof(V));
  }

  template <typename V>
  void put_all(std::span<const V> values) {
    raw(values.data(), values.size_bytes());
  }

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  const Bytes& bytes() const noexcept { return bytes_; }
  Bytes take() noexcept { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError(what_ + ": bad magic (expected '" + std::string(m) + "')");
    }
    pos_ += m.size();
  }

  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  template <typename V>
  std::vector<V> get_all(std::size_t count) {
    if (count > (bytes_.size() - pos_) / sizeof(V)) truncated();
    std::vector<V> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(V));
    pos_ += count * sizeof(V);
    return out;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw FormatError(what_ + ": trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) truncated();
  }
  [[noreturn]] void truncated() const { throw FormatError(what_ + ": truncated file"); }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

}  // namespace unlearn

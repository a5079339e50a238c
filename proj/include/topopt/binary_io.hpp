#pragma once

// Little-endian primitive I/O for the dataset, split and checkpoint files.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>

#include "topopt/error.hpp"

namespace topopt::io {

template <typename T>
T to_little(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <typename T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    if (!os_) throw IoError("write failed");
  }

  template <typename T, std::size_t E>
  void put_array(std::span<T, E> values) {
    if constexpr (std::endian::native == std::endian::little) {
      os_.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
      if (!os_) throw IoError("write failed");
    } else {
      for (const auto& v : values) put(v);
    }
  }

  void put_magic(const char (&magic)[5]) {
    os_.write(magic, 4);
    if (!os_) throw IoError("write failed");
  }

  void put_string(const std::string& s) {
    put(static_cast<std::uint16_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <typename T>
  T get() {
    T v;
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(T))) throw IoError("unexpected end of file");
    return to_little(v);
  }

  template <typename T>
  void get_array(std::span<T> out) {
    if constexpr (std::endian::native == std::endian::little) {
      is_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
      if (is_.gcount() != static_cast<std::streamsize>(out.size_bytes())) throw IoError("unexpected end of file");
    } else {
      for (T& v : out) v = get<T>();
    }
  }

  void expect_magic(const char (&magic)[5]) {
    char buf[4];
    is_.read(buf, 4);
    if (is_.gcount() != 4 || std::memcmp(buf, magic, 4) != 0)
      throw IoError(std::string("bad magic, expected ") + magic);
  }

  std::string get_string() {
    const auto n = get<std::uint16_t>();
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (is_.gcount() != n) throw IoError("unexpected end of file");
    return s;
  }

 private:
  std::istream& is_;
};

}  // namespace topopt::io

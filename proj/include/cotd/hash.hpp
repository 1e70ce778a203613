#pragma once

// 64-bit FNV-1a, used for artifact checksums and seed derivation.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cotd {

class Fnv1a {
 public:
  Fnv1a& bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& str(std::string_view s) { return bytes(s.data(), s.size()); }
  Fnv1a& u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return bytes(b, 8);
  }
  Fnv1a& f64(double v) { return u64(std::bit_cast<std::uint64_t>(v)); }
  Fnv1a& f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
    return *this;
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t hash_string(std::string_view s) { return Fnv1a{}.str(s).value(); }

/// Checksum of a file's bytes. Throws std::runtime_error if unreadable.
inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return Fnv1a{}.bytes(buf.data(), buf.size()).value();
}

}  // namespace cotd

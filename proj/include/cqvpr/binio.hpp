#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "cqvpr/errors.hpp"

// Little-endian primitives shared by the CQVF/CQVD/CQVL codecs and the
// checkpoint format.
namespace cqvpr::binio {

static_assert(std::endian::native == std::endian::little,
              "big-endian hosts need byte swaps in binio");

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_f32(std::ostream& out, float v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

inline void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

inline void write_f32_array(std::ostream& out, const std::vector<float>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * 4));
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * 8));
}

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (in.gcount() != 4) throw FormatError("truncated file reading " + what);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (in.gcount() != 8) throw FormatError("truncated file reading " + what);
  return v;
}

inline double read_f64(std::istream& in, const std::string& what) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (in.gcount() != 8) throw FormatError("truncated file reading " + what);
  return v;
}

inline std::vector<float> read_f32_array(std::istream& in, std::size_t n,
                                         const std::string& what) {
  std::vector<float> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * 4));
  if (in.gcount() != static_cast<std::streamsize>(n * 4)) {
    throw FormatError("truncated file reading " + what);
  }
  return v;
}

inline std::vector<double> read_f64_array(std::istream& in, std::size_t n,
                                          const std::string& what) {
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * 8));
  if (in.gcount() != static_cast<std::streamsize>(n * 8)) {
    throw FormatError("truncated file reading " + what);
  }
  return v;
}

// Checks a 4-byte magic at the current position; reports the byte offset of
// the first mismatch on failure.
inline void expect_magic(std::istream& in, const char expected[4],
                         const std::string& path) {
  char got[4] = {0, 0, 0, 0};
  in.read(got, 4);
  if (in.gcount() != 4 || std::memcmp(got, expected, 4) != 0) {
    throw FormatError(path + ": bad magic at offset 0, expected '" +
                      std::string(expected, 4) + "'");
  }
}

}  // namespace cqvpr::binio

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdda::bytes {

// Little-endian primitive I/O. File formats in this project are pinned to
// little-endian regardless of host order.

inline void put_u16(std::ostream& os, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(os, u);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

inline bool get_bytes(std::istream& is, void* out, size_t n) {
  is.read(static_cast<char*>(out), static_cast<std::streamsize>(n));
  return static_cast<size_t>(is.gcount()) == n;
}

inline bool get_u16(std::istream& is, uint16_t& v) {
  unsigned char b[2];
  if (!get_bytes(is, b, 2)) return false;
  v = static_cast<uint16_t>(b[0] | (b[1] << 8));
  return true;
}

inline bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) return false;
  v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return true;
}

inline bool get_u64(std::istream& is, uint64_t& v) {
  unsigned char b[8];
  if (!get_bytes(is, b, 8)) return false;
  v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return true;
}

inline bool get_f64(std::istream& is, double& v) {
  uint64_t u;
  if (!get_u64(is, u)) return false;
  std::memcpy(&v, &u, 8);
  return true;
}

inline bool get_f32(std::istream& is, float& v) {
  uint32_t u;
  if (!get_u32(is, u)) return false;
  std::memcpy(&v, &u, 4);
  return true;
}

}  // namespace sdda::bytes

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace repprobe::binary {

// Explicit little-endian encoding, independent of host byte order.

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf, 8);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t decode_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t decode_u64(const unsigned char* p) {
  return static_cast<std::uint64_t>(decode_u32(p)) |
         (static_cast<std::uint64_t>(decode_u32(p + 4)) << 32);
}

inline float decode_f32(const unsigned char* p) { return std::bit_cast<float>(decode_u32(p)); }
inline double decode_f64(const unsigned char* p) { return std::bit_cast<double>(decode_u64(p)); }

}  // namespace repprobe::binary

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace poselift {

// Error categories. The CLI maps these to exit codes:
// config_error -> 2, data_error -> 3, numeric_error -> 4.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatches between tensor operands.
struct shape_error : numeric_error {
  using numeric_error::numeric_error;
};

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  uint64_t h = fnv1a64(s);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace poselift

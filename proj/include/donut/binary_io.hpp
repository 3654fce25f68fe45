#pragma once

// Shared helpers for the little-endian container formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <string>

namespace donut {

/// Byte-swaps in place on big-endian hosts; a no-op elsewhere. Applying it
/// twice restores the original.
template <typename T>
void to_le(T* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      auto* b = reinterpret_cast<unsigned char*>(data + i);
      std::reverse(b, b + sizeof(T));
    }
  } else {
    (void)data;
    (void)n;
  }
}

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace donut

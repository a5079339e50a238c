#pragma once

#include <cstdint>
#include <string_view>

namespace topopt {

/// Independent sub-stream seed derived from a master seed, a stream name
/// and an index (FNV-1a over the name, finished with splitmix64).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : stream) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  std::uint64_t z = seed ^ h ^ (index * 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace topopt

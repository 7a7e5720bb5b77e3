#pragma once

#include <cstdint>

namespace limit {

/// Salts a master seed into an independent stream seed (splitmix64 finalizer).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace salt {
inline constexpr std::uint64_t synth = 1;
inline constexpr std::uint64_t split = 2;
inline constexpr std::uint64_t init = 3;
inline constexpr std::uint64_t pretrain = 4;
inline constexpr std::uint64_t meta = 5;
inline constexpr std::uint64_t finetune = 6;
}  // namespace salt

}  // namespace limit

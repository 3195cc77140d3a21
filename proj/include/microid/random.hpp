#ifndef MICROID_RANDOM_HPP_
#define MICROID_RANDOM_HPP_

#include <cstdint>

namespace microid {

// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a parent seed and a tag.
constexpr std::uint64_t mix_seed(std::uint64_t parent, std::uint64_t tag) {
  return splitmix64(splitmix64(parent) ^ (tag + 0x632be59bd9b4e019ULL));
}

}  // namespace microid

#endif  // MICROID_RANDOM_HPP_

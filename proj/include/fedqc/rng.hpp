#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedqc {

using Rng = std::mt19937_64;

constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of the named stream `name` under the experiment seed. Extra indices
/// (round, client, sample id, ...) select independent sub-streams, so the
/// values drawn never depend on the order in which streams are consumed.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view name,
                                    std::initializer_list<std::uint64_t> indices = {}) noexcept {
  std::uint64_t s = mix64(seed ^ mix64(hash_name(name)));
  for (std::uint64_t i : indices) s = mix64(s ^ mix64(i + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_stream(std::uint64_t seed, std::string_view name,
                       std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(stream_seed(seed, name, indices));
}

}  // namespace fedqc

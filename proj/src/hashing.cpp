#include "imu_align/hashing.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>

#include "imu_align/error.hpp"

namespace imu_align {

Fnv1a& Fnv1a::update(std::span<const std::byte> bytes) {
  for (auto b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 1099511628211ull;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::string_view text) {
  update(static_cast<std::uint64_t>(text.size()));
  return update(std::as_bytes(std::span(text.data(), text.size())));
}

Fnv1a& Fnv1a::update(double value) { return update(std::bit_cast<std::uint64_t>(value)); }

Fnv1a& Fnv1a::update(std::uint64_t value) {
  std::array<std::byte, 8> bytes{};
  for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<std::byte>((value >> (8 * i)) & 0xffu);
  return update(std::span<const std::byte>(bytes));
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  Fnv1a h;
  std::array<char, 1 << 15> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto got = static_cast<std::size_t>(in.gcount());
    h.update(std::as_bytes(std::span(buf.data(), got)));
  }
  return h.digest();
}

std::string to_hex(std::uint64_t value) {
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(value));
  return out;
}

}  // namespace imu_align

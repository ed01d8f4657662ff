#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace imu_align {

/// Incremental 64-bit FNV-1a. Stable across platforms and runs.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes);
  Fnv1a& update(std::string_view text);
  Fnv1a& update(double value);
  Fnv1a& update(std::uint64_t value);
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 14695981039346656037ull;
};

std::uint64_t hash_file(const std::filesystem::path& path);
std::string to_hex(std::uint64_t value);

}  // namespace imu_align

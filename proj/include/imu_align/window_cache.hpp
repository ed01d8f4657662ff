#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "imu_align/signal_io.hpp"

namespace imu_align {

inline constexpr std::uint8_t kWindowCacheVersion = 1;

struct WindowParams {
  double window_s = 5.0;
  double stride_s = 5.0;
  double rate_hz = 200.0;
};

struct WindowCache {
  std::uint64_t key = 0;  // content hash of the source files and window params
  WindowParams params;
  std::vector<ImuWindow> windows;
};

/// Hash over the bytes of every input file (in the given order) plus the window parameters.
std::uint64_t window_cache_key(const std::vector<std::filesystem::path>& inputs, const WindowParams& params);

/// Loads each CSV, resamples to params.rate_hz and windows it.
WindowCache build_window_cache(const std::vector<std::filesystem::path>& inputs, const WindowParams& params);

/// Writes under an exclusive lock on `<path>.lock`. Output depends only on the cache contents.
void write_window_cache(const WindowCache& cache, const std::filesystem::path& path);
WindowCache read_window_cache(const std::filesystem::path& path);

}  // namespace imu_align

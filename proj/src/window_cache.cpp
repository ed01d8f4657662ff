#include "imu_align/window_cache.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include "imu_align/binary_io.hpp"
#include "imu_align/error.hpp"
#include "imu_align/file_lock.hpp"
#include "imu_align/hashing.hpp"

namespace imu_align {

namespace {
constexpr std::array<char, 8> kMagic = {'I', 'M', 'U', 'W', 'C', 'A', 'C', 'H'};
}

std::uint64_t window_cache_key(const std::vector<std::filesystem::path>& inputs, const WindowParams& params) {
  Fnv1a h;
  h.update(std::string_view("window-cache"));
  h.update(static_cast<std::uint64_t>(kWindowCacheVersion));
  for (const auto& p : inputs) {
    h.update(p.stem().string());
    h.update(hash_file(p));
  }
  h.update(params.window_s).update(params.stride_s).update(params.rate_hz);
  return h.digest();
}

WindowCache build_window_cache(const std::vector<std::filesystem::path>& inputs, const WindowParams& params) {
  if (inputs.empty()) throw Error(ErrorKind::value, "no IMU inputs given");
  WindowCache cache;
  cache.params = params;
  cache.key = window_cache_key(inputs, params);
  for (const auto& p : inputs) {
    const auto stream = resample(load_imu_stream(p), params.rate_hz);
    auto windows = make_windows(stream, params.window_s, params.stride_s);
    for (auto& w : windows) cache.windows.push_back(std::move(w));
  }
  return cache;
}

void write_window_cache(const WindowCache& cache, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FileLock lock(path);
  BinaryWriter w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u8(kWindowCacheVersion);
  w.u64(cache.key);
  w.f64(cache.params.window_s);
  w.f64(cache.params.stride_s);
  w.f64(cache.params.rate_hz);
  w.u64(cache.windows.size());
  for (const auto& win : cache.windows) {
    w.str(win.window_id);
    w.str(win.source_id);
    w.f64(win.start_s);
    w.f64(win.duration_s);
    w.tensor(win.signal);
  }
  w.save(path);
}

WindowCache read_window_cache(const std::filesystem::path& path) {
  BinaryReader r(path);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw Error(ErrorKind::version, path.string() + ": not a window cache (bad magic)");
  const auto version = r.u8();
  if (version != kWindowCacheVersion) {
    throw Error(ErrorKind::version, path.string() + ": cache version " + std::to_string(version) +
                                        ", expected " + std::to_string(kWindowCacheVersion));
  }
  WindowCache cache;
  cache.key = r.u64();
  cache.params.window_s = r.f64();
  cache.params.stride_s = r.f64();
  cache.params.rate_hz = r.f64();
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    ImuWindow win;
    win.window_id = r.str();
    win.source_id = r.str();
    win.start_s = r.f64();
    win.duration_s = r.f64();
    win.signal = r.tensor();
    if (win.signal.rank() != 2 || win.signal.dim(0) != kImuChannels) {
      throw Error(ErrorKind::parse, path.string() + ": window " + win.window_id + " has bad signal shape");
    }
    cache.windows.push_back(std::move(win));
  }
  r.expect_end();
  return cache;
}

}  // namespace imu_align

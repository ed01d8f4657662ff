#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "imu_align/tensor.hpp"

namespace imu_align {

inline constexpr std::size_t kImuChannels = 6;  // ax, ay, az, gx, gy, gz

struct ImuSample {
  double t = 0.0;                              // seconds
  std::array<double, kImuChannels> values{};  // m/s^2 for accel, rad/s for gyro
};

struct ImuStream {
  std::string source_id;
  double sample_rate_hz = 0.0;
  std::vector<ImuSample> samples;

  double duration_s() const noexcept {
    return samples.size() < 2 ? 0.0 : samples.back().t - samples.front().t;
  }
};

/// Fixed-length clip; signal is kImuChannels x T.
struct ImuWindow {
  std::string window_id;
  std::string source_id;
  double start_s = 0.0;
  double duration_s = 0.0;
  Tensor signal;

  std::size_t length() const { return signal.rank() == 2 ? signal.dim(1) : 0; }
};

enum class Modality { video, text };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view text);

struct AnchorEmbedding {
  std::string window_id;
  Modality modality = Modality::video;
  std::vector<double> vector;
};

using AnchorMap = std::map<std::string, AnchorEmbedding>;

struct LabelSet {
  std::vector<std::string> classes;
  std::map<std::string, std::string> labels;  // window_id -> class name
};

struct ParallelDataset {
  std::vector<ImuWindow> windows;  // sorted by window_id
  std::optional<AnchorMap> video_anchors;
  std::optional<AnchorMap> text_anchors;
  std::optional<std::map<std::string, std::string>> labels;
  std::vector<std::string> class_names;
  std::size_t dropped = 0;  // windows discarded for missing anchors or labels

  std::size_t size() const noexcept { return windows.size(); }
  /// Index into class_names of window i's label. Throws if the dataset is unlabeled.
  std::size_t label_index(std::size_t i) const;
  /// B x D matrix of anchors for the given window indices.
  Tensor anchor_matrix(Modality m, std::span<const std::size_t> indices) const;
};

// ---- IMU streams ----------------------------------------------------------

enum class StreamFormat { csv };

/// Reads the `t,ax,ay,az,gx,gy,gz` CSV. source_id is the file stem and the
/// sample rate is estimated from the mean timestamp spacing.
ImuStream load_imu_stream(const std::filesystem::path& path, StreamFormat format = StreamFormat::csv);
void write_imu_stream(const ImuStream& stream, const std::filesystem::path& path);

/// Linear interpolation onto a uniform grid from the first to the last timestamp.
ImuStream resample(const ImuStream& stream, double target_hz);

/// Non-overlapping or overlapping fixed-length windows; trailing partial windows are dropped.
std::vector<ImuWindow> make_windows(const ImuStream& stream, double window_s, double stride_s);

// ---- anchors and labels ---------------------------------------------------

/// JSON Lines anchors; vectors are re-normalized to unit length.
AnchorMap load_anchor_embeddings(const std::filesystem::path& path);
void write_anchor_embeddings(const std::vector<AnchorEmbedding>& anchors, const std::filesystem::path& path);

LabelSet load_labels(const std::filesystem::path& path);
void write_labels(const LabelSet& labels, const std::filesystem::path& path);

// ---- dataset assembly -----------------------------------------------------

struct AssembleOptions {
  double min_coverage = 1.0;  // fraction of windows that must have every requested input
};

ParallelDataset assemble_dataset(std::vector<ImuWindow> windows, std::optional<AnchorMap> video,
                                 std::optional<AnchorMap> text, std::optional<LabelSet> labels,
                                 const AssembleOptions& options = {});

ParallelDataset assemble_dataset(std::vector<ImuWindow> windows,
                                 const std::optional<std::filesystem::path>& video_anchor_path,
                                 const std::optional<std::filesystem::path>& text_anchor_path,
                                 const std::optional<std::filesystem::path>& labels_path,
                                 const AssembleOptions& options = {});

// ---- synthetic corpus -----------------------------------------------------

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_windows = 32;
  std::size_t n_classes = 4;
  std::size_t dim = 512;
  std::size_t samples = 200;      // T
  double sample_rate_hz = 200.0;
  double noise = 0.05;            // anchor noise scale
};

struct SynthCorpus {
  ParallelDataset dataset;
  /// One text anchor per class (window_id holds the class name): the class-name embeddings.
  std::vector<AnchorEmbedding> class_anchors;
  std::vector<AnchorEmbedding> video_anchor_list;
  std::vector<AnchorEmbedding> text_anchor_list;
};

/// Class-conditioned signals (per-class frequency and amplitude signatures) with anchors
/// normalize(class centroid + noise * N(0, I)). Text centroids are correlated with video
/// centroids. Window i belongs to class i % n_classes.
SynthCorpus synth_corpus(const SynthConfig& config);
ParallelDataset synth_dataset(std::uint64_t seed, std::size_t n_windows, std::size_t n_classes,
                              std::size_t dim, std::size_t samples, double noise);

/// Unit-normalizes in place; returns the original norm.
double normalize_in_place(std::vector<double>& v);

}  // namespace imu_align

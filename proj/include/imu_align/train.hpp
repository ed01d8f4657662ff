#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "imu_align/contrastive.hpp"
#include "imu_align/encoder.hpp"
#include "imu_align/signal_io.hpp"

namespace imu_align {

/// iv: IMU <-> video, it: IMU <-> text, ivt: both (losses summed).
enum class TrainMode { iv, it, ivt };
std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  double adagrad_eps = 1e-8;
  double decay = 0.1;  // inverse-time learning-rate decay per epoch
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::iv;
  double temperature = 0.1;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const EncoderConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Per-parameter sum of squared gradients.
struct AdagradState {
  std::vector<Tensor> accumulators;
  std::uint64_t step = 0;

  static AdagradState zeros_like(std::span<const Tensor* const> params);
  friend bool operator==(const AdagradState&, const AdagradState&) = default;
};

/// acc += g^2; p -= lr * g / (sqrt(acc) + eps), using each parameter's grad buffer.
/// Throws Error(numeric) before touching anything if a gradient is non-finite.
void adagrad_step(std::span<Tensor* const> params, AdagradState& state, double lr, double eps);

/// base_lr / (1 + decay * epoch)
double lr_at(std::size_t epoch, double base_lr, double decay);

/// Shuffled index batches keyed by (seed, epoch); the trailing partial batch is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n_items, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch);
std::vector<std::vector<std::size_t>> make_batches(const ParallelDataset& dataset, std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch);

struct EpochSummary {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t batches = 0;
  LossReport loss;  // means over the epoch's batches
};

nlohmann::json to_json(const EpochSummary& summary);

/// Loss of one batch recorded on `tape` against constant anchors.
struct BatchLoss {
  Var loss;
  LossReport report;
};
BatchLoss contrastive_batch_loss(Tape& tape, const EncoderVars& vars, const EncoderConfig& encoder,
                                 const ParallelDataset& dataset, std::span<const std::size_t> batch, TrainMode mode,
                                 double temperature);

/// One pass over make_batches(dataset, B, seed, epoch): encode, contrast against the
/// frozen anchors, backprop, Adagrad at lr_at(epoch). Anchors are never written.
EpochSummary train_epoch(const ParallelDataset& dataset, EncoderParams& params, AdagradState& state,
                         const EncoderConfig& encoder, const TrainConfig& config, std::size_t epoch);

struct Checkpoint {
  EncoderConfig encoder;
  TrainConfig train;
  EncoderParams params;
  AdagradState optimizer;
  std::uint64_t step = 0;    // optimizer steps taken
  std::uint64_t epochs = 0;  // epochs completed
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path run_dir;
  std::optional<Checkpoint> resume;  // continue from here up to config.epochs total
  std::function<void(const EpochSummary&)> on_epoch;
};

struct RunResult {
  Checkpoint final;
  std::vector<EpochSummary> history;
  std::filesystem::path checkpoint_path;
};

/// Writes config.json, metrics.jsonl (one record per epoch) and ckpt-{step}.bin into run_dir.
RunResult run_training(const ParallelDataset& dataset, const EncoderConfig& encoder, const TrainConfig& config,
                       const RunOptions& options);

/// Requires the anchors that `mode` trains against.
void require_modalities(const ParallelDataset& dataset, TrainMode mode);

}  // namespace imu_align

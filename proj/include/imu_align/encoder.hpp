#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "imu_align/signal_io.hpp"
#include "imu_align/tensor.hpp"

namespace imu_align {

/// Shape of the IMU encoder:
///   GroupNorm(2 groups: accel, gyro) -> [Conv1d + ReLU] x N -> MaxPool(pool_kernel)
///   -> GroupNorm(1 group) -> GRU -> last hidden state -> Linear(D) -> L2 normalize
struct EncoderConfig {
  std::size_t n_conv_layers = 3;
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::vector<std::size_t> conv_kernels{10, 5, 5};
  std::vector<std::size_t> conv_strides{2, 2, 2};
  std::size_t pool_kernel = 5;  // pooling stride equals the kernel
  std::size_t gru_hidden = 128;
  std::size_t embed_dim = 512;
  double groupnorm_eps = 1e-5;

  static constexpr std::size_t kInputGroups = 2;
  static constexpr std::size_t kPostGroups = 1;
  static constexpr double kNormalizeEps = 1e-12;

  void validate() const;
  /// Time steps after each conv layer and the pool for an input of `input_len` samples
  /// (n_conv_layers + 1 entries). A zero marks where the sequence collapsed.
  std::vector<std::size_t> time_lengths(std::size_t input_len) const;
  /// Closed-form number of trainable scalars.
  std::size_t param_count() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ConvLayer {
  Tensor weight;  // C_out x C_in x K
  Tensor bias;    // C_out
};

struct EncoderParams {
  Tensor input_gamma, input_beta;  // 6
  std::vector<ConvLayer> conv;
  Tensor post_gamma, post_beta;    // last conv channel count
  Tensor gru_w_ih, gru_w_hh;       // 3H x F, 3H x H
  Tensor gru_b_ih, gru_b_hh;       // 3H
  Tensor proj_weight, proj_bias;   // D x H, D

  /// Canonical ordering used by optimizers, checkpoints and bind_params.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::vector<std::string> names() const;

  std::size_t param_count() const;
  bool all_finite() const;
  void zero_grad();
  /// FNV-1a over the raw bytes of every tensor, in canonical order.
  std::uint64_t checksum() const;
};

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Tape handles for every parameter tensor, in EncoderParams::tensors() order.
struct EncoderVars {
  std::vector<Var> vars;
};

/// Trainable binds gradients back into params; otherwise the weights are constants.
EncoderVars bind_params(Tape& tape, EncoderParams& params, bool trainable);
EncoderVars bind_params(Tape& tape, const EncoderParams& params);

/// Records the full encoder forward pass; returns the unit-norm D embedding.
Var encode_on_tape(Tape& tape, const EncoderVars& vars, const EncoderConfig& config, const Tensor& signal);

std::vector<double> encode(const ImuWindow& window, const EncoderParams& params, const EncoderConfig& config);
/// B x D, row i = encode(windows[i]). All windows must share T.
Tensor encode_batch(std::span<const ImuWindow> windows, const EncoderParams& params, const EncoderConfig& config);

}  // namespace imu_align

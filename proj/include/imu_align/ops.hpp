#pragma once

#include <cstddef>
#include <span>

#include "imu_align/tensor.hpp"

// Differentiable kernels recorded on a Tape. Shapes are exact; there is no
// broadcasting. Every op validates its inputs and throws Error(shape|value).
namespace imu_align::ops {

/// floor((time - kernel) / stride) + 1, or 0 when time < kernel.
std::size_t window_out_len(std::size_t time, std::size_t kernel, std::size_t stride);

/// input: C_in x T, weight: C_out x C_in x K, bias: C_out -> C_out x T_out. No padding.
Var conv1d(Tape& tape, Var input, Var weight, Var bias, std::size_t stride);

/// Normalizes each group of channels over (channel, time), then applies a per-channel affine.
Var group_norm(Tape& tape, Var input, std::size_t num_groups, Var gamma, Var beta, double eps);

/// Per-channel max over windows; gradient goes to the first maximal position.
Var max_pool1d(Tape& tape, Var input, std::size_t kernel, std::size_t stride);

Var relu(Tape& tape, Var x);
Var tanh(Tape& tape, Var x);

struct GruWeights {
  Var w_ih;  // 3H x F, gate rows ordered (reset, update, candidate)
  Var w_hh;  // 3H x H
  Var b_ih;  // 3H
  Var b_hh;  // 3H
};

/// sequence: T x F, h0: H -> T x H of hidden states.
///   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
///   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
///   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
///   h' = (1 - z) * n + z * h
Var gru(Tape& tape, Var sequence, const GruWeights& weights, Var h0);

/// Matrix transpose (R x C -> C x R).
Var transpose(Tape& tape, Var x);

/// Last row of a T x H matrix as an H vector.
Var last_row(Tape& tape, Var x);

/// x: F_in (or B x F_in), weight: F_out x F_in, bias: F_out -> F_out (or B x F_out).
Var linear(Tape& tape, Var x, Var weight, Var bias);

/// v / max(||v||, eps) for a 1-D vector.
Var l2_normalize(Tape& tape, Var v, double eps);

/// Stacks equal-length vectors into a B x D matrix.
Var stack_rows(Tape& tape, std::span<const Var> rows);

/// a: M x D, b: N x D -> a * b^T (M x N).
Var matmul_nt(Tape& tape, Var a, Var b);

Var sum(Tape& tape, Var x);
Var sum_squares(Tape& tape, Var x);
/// sum_i x_i * weights_i with constant weights of identical shape.
Var weighted_sum(Tape& tape, Var x, const Tensor& weights);
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double factor);

/// Mean softmax cross-entropy of B x C logits against class indices.
Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::size_t> targets);

}  // namespace imu_align::ops

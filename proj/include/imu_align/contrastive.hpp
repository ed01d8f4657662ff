#pragma once

#include <optional>
#include <string_view>

#include "imu_align/tensor.hpp"

namespace imu_align {

enum class EmbeddingKind { imu, video, text };
std::string_view to_string(EmbeddingKind kind);

/// values[i][j] = <rows[i], cols[j]>; batch index i pairs row i with column i.
struct SimilarityMatrix {
  Tensor values;
  EmbeddingKind row_kind = EmbeddingKind::imu;
  EmbeddingKind col_kind = EmbeddingKind::video;

  std::size_t rows() const { return values.dim(0); }
  std::size_t cols() const { return values.dim(1); }
};

struct ContrastiveConfig {
  double temperature = 0.1;
};

/// row_to_col: each row softmax(sims[i, :] / gamma), e.g. IMU -> video.
/// col_to_row: row j of the result is softmax(sims[:, j] / gamma), e.g. video -> IMU.
enum class Direction { row_to_col, col_to_row };

struct SymmetricLoss {
  double forward = 0.0;   // row-softmax loss
  double backward = 0.0;  // column-softmax loss
  double symmetric = 0.0; // (forward + backward) / 2
};

struct LossReport {
  std::optional<double> l_i2v, l_v2i, l_sym_iv;
  std::optional<double> l_i2t, l_t2i, l_sym_it;
  std::optional<double> l_total;
};

/// rows, cols: B x D unit vectors (checked within 1e-4).
SimilarityMatrix similarity_matrix(const Tensor& rows, const Tensor& cols, EmbeddingKind row_kind = EmbeddingKind::imu,
                                   EmbeddingKind col_kind = EmbeddingKind::video);

/// Temperature-scaled softmax with max subtraction; the result is row-stochastic.
Tensor retrieval_distribution(const SimilarityMatrix& sims, double temperature, Direction direction);

/// -(1/B) sum_i log P[i][i] for a square matrix.
double info_nce(const SimilarityMatrix& sims, double temperature, Direction direction);
/// d info_nce / d sims, same orientation as sims.values.
Tensor info_nce_grad(const SimilarityMatrix& sims, double temperature, Direction direction);

SymmetricLoss symmetric_loss(const SimilarityMatrix& sims, double temperature);

/// l_total = symmetric(sims_iv) + symmetric(sims_it).
LossReport trimodal_loss(const SimilarityMatrix& sims_iv, const SimilarityMatrix& sims_it, double temperature);

/// Differentiable info_nce over a recorded B x B similarity matrix.
Var info_nce(Tape& tape, Var sims, double temperature, Direction direction);

}  // namespace imu_align

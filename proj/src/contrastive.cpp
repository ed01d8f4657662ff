#include "imu_align/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "imu_align/error.hpp"

namespace imu_align {

namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorKind::value, "temperature must be positive, got " + std::to_string(temperature));
  }
}

void check_square(const Tensor& sims) {
  if (sims.rank() != 2 || sims.dim(0) != sims.dim(1)) {
    throw Error(ErrorKind::shape, "info_nce: similarity matrix must be square, got " + shape_to_string(sims.shape()));
  }
  if (sims.dim(0) == 0) throw Error(ErrorKind::shape, "info_nce: empty batch");
}

// Row-stochastic distribution in the orientation requested: for col_to_row the
// returned matrix is indexed [column][row].
Tensor softmax_rows(const Tensor& sims, double temperature, Direction direction) {
  const std::size_t r = sims.dim(0), c = sims.dim(1);
  const bool by_col = direction == Direction::col_to_row;
  const std::size_t outer = by_col ? c : r, inner = by_col ? r : c;
  Tensor out({outer, inner});
  auto at = [&](std::size_t o, std::size_t i) { return by_col ? sims.at(i, o) : sims.at(o, i); };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, at(o, i));
    double denom = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      const double e = std::exp((at(o, i) - mx) / temperature);
      out.at(o, i) = e;
      denom += e;
    }
    for (std::size_t i = 0; i < inner; ++i) out.at(o, i) /= denom;
  }
  return out;
}

double nce_value(const Tensor& sims, double temperature, Direction direction) {
  const std::size_t b = sims.dim(0);
  const bool by_col = direction == Direction::col_to_row;
  double loss = 0.0;
  for (std::size_t o = 0; o < b; ++o) {
    auto at = [&](std::size_t i) { return by_col ? sims.at(i, o) : sims.at(o, i); };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < b; ++i) mx = std::max(mx, at(i));
    double denom = 0.0;
    for (std::size_t i = 0; i < b; ++i) denom += std::exp((at(i) - mx) / temperature);
    // -log softmax at the diagonal, in log-sum-exp form
    loss += std::log(denom) - (at(o) - mx) / temperature;
  }
  return loss / static_cast<double>(b);
}

Tensor nce_grad(const Tensor& sims, double temperature, Direction direction) {
  const std::size_t b = sims.dim(0);
  const Tensor p = softmax_rows(sims, temperature, direction);
  const bool by_col = direction == Direction::col_to_row;
  const double s = 1.0 / (static_cast<double>(b) * temperature);
  Tensor g({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double prob = by_col ? p.at(j, i) : p.at(i, j);
      g.at(i, j) = s * (prob - (i == j ? 1.0 : 0.0));
    }
  }
  return g;
}

}  // namespace

std::string_view to_string(EmbeddingKind kind) {
  switch (kind) {
    case EmbeddingKind::imu: return "imu";
    case EmbeddingKind::video: return "video";
    case EmbeddingKind::text: return "text";
  }
  return "unknown";
}

SimilarityMatrix similarity_matrix(const Tensor& rows, const Tensor& cols, EmbeddingKind row_kind,
                                   EmbeddingKind col_kind) {
  if (rows.rank() != 2 || cols.rank() != 2 || rows.dim(1) != cols.dim(1)) {
    throw Error(ErrorKind::shape, "similarity_matrix: rows " + shape_to_string(rows.shape()) + " and cols " +
                                      shape_to_string(cols.shape()) + " need matching embedding dims");
  }
  const std::size_t d = rows.dim(1);
  auto check_unit = [d](const Tensor& m, const char* which) {
    for (std::size_t i = 0; i < m.dim(0); ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) sq += m.at(i, k) * m.at(i, k);
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-4) {
        throw Error(ErrorKind::value, std::string("similarity_matrix: ") + which + " row " + std::to_string(i) +
                                          " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) + ")");
      }
    }
  };
  check_unit(rows, "lhs");
  check_unit(cols, "rhs");
  SimilarityMatrix out{Tensor({rows.dim(0), cols.dim(0)}), row_kind, col_kind};
  for (std::size_t i = 0; i < rows.dim(0); ++i) {
    for (std::size_t j = 0; j < cols.dim(0); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += rows.at(i, k) * cols.at(j, k);
      out.values.at(i, j) = acc;
    }
  }
  return out;
}

Tensor retrieval_distribution(const SimilarityMatrix& sims, double temperature, Direction direction) {
  check_temperature(temperature);
  return softmax_rows(sims.values, temperature, direction);
}

double info_nce(const SimilarityMatrix& sims, double temperature, Direction direction) {
  check_temperature(temperature);
  check_square(sims.values);
  return nce_value(sims.values, temperature, direction);
}

Tensor info_nce_grad(const SimilarityMatrix& sims, double temperature, Direction direction) {
  check_temperature(temperature);
  check_square(sims.values);
  return nce_grad(sims.values, temperature, direction);
}

SymmetricLoss symmetric_loss(const SimilarityMatrix& sims, double temperature) {
  SymmetricLoss out;
  out.forward = info_nce(sims, temperature, Direction::row_to_col);
  out.backward = info_nce(sims, temperature, Direction::col_to_row);
  out.symmetric = 0.5 * (out.forward + out.backward);
  return out;
}

LossReport trimodal_loss(const SimilarityMatrix& sims_iv, const SimilarityMatrix& sims_it, double temperature) {
  check_square(sims_iv.values);
  check_square(sims_it.values);
  if (sims_iv.rows() != sims_it.rows()) {
    throw Error(ErrorKind::shape, "trimodal_loss: batch sizes differ (" + std::to_string(sims_iv.rows()) + " vs " +
                                      std::to_string(sims_it.rows()) + ")");
  }
  const auto iv = symmetric_loss(sims_iv, temperature);
  const auto it = symmetric_loss(sims_it, temperature);
  LossReport r;
  r.l_i2v = iv.forward;
  r.l_v2i = iv.backward;
  r.l_sym_iv = iv.symmetric;
  r.l_i2t = it.forward;
  r.l_t2i = it.backward;
  r.l_sym_it = it.symmetric;
  r.l_total = iv.symmetric + it.symmetric;
  return r;
}

Var info_nce(Tape& tape, Var sims, double temperature, Direction direction) {
  check_temperature(temperature);
  const Tensor& s = tape.value(sims);
  check_square(s);
  const double loss = nce_value(s, temperature, direction);
  auto grad = std::make_shared<Tensor>(nce_grad(s, temperature, direction));
  return tape.record(Tensor::vector({loss}), {sims}, [sims, grad](Tape& tp, std::span<const double> g) {
    auto gs = tp.grad_buffer(sims);
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g[0] * (*grad)[i];
  });
}

}  // namespace imu_align

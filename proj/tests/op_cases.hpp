#pragma once

// Random finite-difference cases for every differentiable kernel. Each case reduces the op's
// output to a scalar through fixed random weights so every output coordinate matters.

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "imu_align/contrastive.hpp"
#include "imu_align/encoder.hpp"
#include "imu_align/gradcheck.hpp"
#include "imu_align/ops.hpp"
#include "support.hpp"

namespace test_support {

using imu_align::MultiScalarFn;
using imu_align::Tape;
using imu_align::Var;
namespace ops = imu_align::ops;

struct GradCase {
  MultiScalarFn fn;
  std::vector<Tensor> points;
};

struct OpCase {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

/// Weighted sum against weights drawn (once, from `seed`) to match the output shape.
class Projector {
 public:
  explicit Projector(std::uint64_t seed) : seed_(seed), weights_(std::make_shared<Tensor>()) {}

  Var operator()(Tape& tape, Var out) const {
    const auto& value = tape.value(out);
    if (weights_->shape() != value.shape()) {
      std::mt19937_64 rng(seed_);
      *weights_ = uniform(rng, value.shape());
    }
    return ops::weighted_sum(tape, out, *weights_);
  }

 private:
  std::uint64_t seed_;
  std::shared_ptr<Tensor> weights_;
};

// Values at least `margin` away from zero, for kernels with a kink there.
inline Tensor away_from_zero(std::mt19937_64& rng, Shape shape, double margin = 1e-2) {
  Tensor t = uniform(rng, std::move(shape));
  for (auto& v : t.data()) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

inline std::vector<OpCase> differentiable_op_cases() {
  std::vector<OpCase> cases;
  auto add = [&cases](std::string name, std::function<GradCase(std::mt19937_64&)> make) {
    cases.push_back({std::move(name), std::move(make)});
  };

  add("conv1d", [](std::mt19937_64& rng) {
    const std::size_t stride = 1 + rng() % 3;
    Projector p(rng());
    return GradCase{[p, stride](Tape& t, std::span<const Var> v) { return p(t, ops::conv1d(t, v[0], v[1], v[2], stride)); },
                    {uniform(rng, {3, 17}), uniform(rng, {4, 3, 5}), uniform(rng, {4})}};
  });
  add("group_norm_2_groups", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{
        [p](Tape& t, std::span<const Var> v) { return p(t, ops::group_norm(t, v[0], 2, v[1], v[2], 1e-5)); },
        {uniform(rng, {6, 9}), uniform(rng, {6}, 0.5, 1.5), uniform(rng, {6})}};
  });
  add("group_norm_1_group", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{
        [p](Tape& t, std::span<const Var> v) { return p(t, ops::group_norm(t, v[0], 1, v[1], v[2], 1e-5)); },
        {uniform(rng, {4, 7}), uniform(rng, {4}, 0.5, 1.5), uniform(rng, {4})}};
  });
  add("max_pool1d", [](std::mt19937_64& rng) {
    const std::size_t k = 2 + rng() % 4;
    Projector p(rng());
    return GradCase{[p, k](Tape& t, std::span<const Var> v) { return p(t, ops::max_pool1d(t, v[0], k, k)); },
                    {uniform(rng, {3, 20})}};
  });
  add("relu", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::relu(t, v[0])); },
                    {away_from_zero(rng, {5, 6})}};
  });
  add("tanh", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::tanh(t, v[0])); },
                    {uniform(rng, {5, 6}, -2.0, 2.0)}};
  });
  add("gru", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) {
                      return p(t, ops::gru(t, v[0], {v[1], v[2], v[3], v[4]}, v[5]));
                    },
                    {uniform(rng, {5, 3}), uniform(rng, {12, 3}), uniform(rng, {12, 4}), uniform(rng, {12}),
                     uniform(rng, {12}), uniform(rng, {4})}};
  });
  add("transpose", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::transpose(t, v[0])); },
                    {uniform(rng, {3, 5})}};
  });
  add("last_row", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::last_row(t, v[0])); },
                    {uniform(rng, {4, 3})}};
  });
  add("linear_vector", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::linear(t, v[0], v[1], v[2])); },
                    {uniform(rng, {5}), uniform(rng, {3, 5}), uniform(rng, {3})}};
  });
  add("linear_batch", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::linear(t, v[0], v[1], v[2])); },
                    {uniform(rng, {4, 5}), uniform(rng, {3, 5}), uniform(rng, {3})}};
  });
  add("l2_normalize", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::l2_normalize(t, v[0], 1e-12)); },
                    {uniform(rng, {6})}};
  });
  add("stack_rows", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::stack_rows(t, v)); },
                    {uniform(rng, {4}), uniform(rng, {4}), uniform(rng, {4})}};
  });
  add("matmul_nt", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::matmul_nt(t, v[0], v[1])); },
                    {uniform(rng, {3, 4}), uniform(rng, {5, 4})}};
  });
  add("sum", [](std::mt19937_64& rng) {
    return GradCase{[](Tape& t, std::span<const Var> v) { return ops::sum(t, v[0]); }, {uniform(rng, {3, 4})}};
  });
  add("sum_squares", [](std::mt19937_64& rng) {
    return GradCase{[](Tape& t, std::span<const Var> v) { return ops::sum_squares(t, v[0]); },
                    {uniform(rng, {3, 4})}};
  });
  add("add", [](std::mt19937_64& rng) {
    Projector p(rng());
    return GradCase{[p](Tape& t, std::span<const Var> v) { return p(t, ops::add(t, v[0], v[1])); },
                    {uniform(rng, {2, 3}), uniform(rng, {2, 3})}};
  });
  add("scale", [](std::mt19937_64& rng) {
    const double f = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
    Projector p(rng());
    return GradCase{[p, f](Tape& t, std::span<const Var> v) { return p(t, ops::scale(t, v[0], f)); },
                    {uniform(rng, {2, 3})}};
  });
  add("softmax_cross_entropy", [](std::mt19937_64& rng) {
    std::vector<std::size_t> targets(4);
    for (auto& x : targets) x = rng() % 3;
    return GradCase{
        [targets](Tape& t, std::span<const Var> v) { return ops::softmax_cross_entropy(t, v[0], targets); },
        {uniform(rng, {4, 3}, -3.0, 3.0)}};
  });
  for (auto dir : {imu_align::Direction::row_to_col, imu_align::Direction::col_to_row}) {
    const std::string suffix = dir == imu_align::Direction::row_to_col ? "row_to_col" : "col_to_row";
    add("info_nce_" + suffix, [dir](std::mt19937_64& rng) {
      const double gammas[] = {0.1, 0.5, 1.0};
      const double gamma = gammas[rng() % 3];
      return GradCase{[gamma, dir](Tape& t, std::span<const Var> v) { return imu_align::info_nce(t, v[0], gamma, dir); },
                      {uniform(rng, {4, 4})}};
    });
  }
  return cases;
}

/// The smallest encoder that exercises every stage: one conv layer, 4 channels, GRU 8, D 8, T 32.
inline imu_align::EncoderConfig tiny_encoder_config() {
  imu_align::EncoderConfig c;
  c.n_conv_layers = 1;
  c.conv_channels = {4};
  c.conv_kernels = {5};
  c.conv_strides = {2};
  c.pool_kernel = 5;
  c.gru_hidden = 8;
  c.embed_dim = 8;
  return c;
}

/// Full encoder forward pass, differentiated with respect to every parameter tensor.
inline GradCase tiny_encoder_case(std::mt19937_64& rng) {
  const auto config = tiny_encoder_config();
  auto params = imu_align::init_params(config, rng());
  // Move the norm affines off their identity init so their gradients are exercised generically.
  for (auto* t : {&params.input_gamma, &params.post_gamma}) {
    for (auto& v : t->data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  }
  for (auto* t : {&params.input_beta, &params.post_beta, &params.gru_b_ih, &params.gru_b_hh, &params.proj_bias}) {
    for (auto& v : t->data()) v = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
  }
  const Tensor signal = uniform(rng, {6, 32}, -2.0, 2.0);
  Projector p(rng());
  std::vector<Tensor> points;
  for (const auto* t : params.tensors()) points.push_back(*t);
  return GradCase{[p, config, signal](Tape& t, std::span<const Var> v) {
                    imu_align::EncoderVars vars{{v.begin(), v.end()}};
                    return p(t, imu_align::encode_on_tape(t, vars, config, signal));
                  },
                  std::move(points)};
}

}  // namespace test_support

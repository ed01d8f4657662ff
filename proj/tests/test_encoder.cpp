#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "imu_align/encoder.hpp"
#include "imu_align/error.hpp"
#include "imu_align/gradcheck.hpp"
#include "imu_align/ops.hpp"
#include "op_cases.hpp"
#include "support.hpp"

using namespace imu_align;
using test_support::uniform;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.n_conv_layers = 2;
  c.conv_channels = {8, 12};
  c.conv_kernels = {6, 3};
  c.conv_strides = {2, 1};
  c.gru_hidden = 10;
  c.embed_dim = 16;
  return c;
}

ImuWindow random_window(std::mt19937_64& rng, std::size_t t, const std::string& id = "w") {
  ImuWindow w;
  w.window_id = id;
  w.signal = uniform(rng, {kImuChannels, t}, -3.0, 3.0);
  return w;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double norm(const std::vector<double>& v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

}  // namespace

TEST_CASE("default architecture and parameter accounting") {
  const EncoderConfig c;
  CHECK(c.n_conv_layers == 3);
  CHECK(c.conv_channels == std::vector<std::size_t>{32, 64, 128});
  CHECK(c.conv_kernels == std::vector<std::size_t>{10, 5, 5});
  CHECK(c.conv_strides == std::vector<std::size_t>{2, 2, 2});
  CHECK(c.pool_kernel == 5);
  CHECK(c.gru_hidden == 128);
  CHECK(c.embed_dim == 512);

  // conv: 32*6*10+32, 64*32*5+64, 128*64*5+128; norms: 2*6 + 2*128;
  // GRU: 3*128*(128+128) + 6*128; projection: 512*128 + 512
  const std::size_t by_hand = (1920 + 32) + (10240 + 64) + (40960 + 128) + 12 + 256 + 98304 + 768 + 65536 + 512;
  CHECK(by_hand == 218732);
  CHECK(c.param_count() == by_hand);
  CHECK(init_params(c, 0).param_count() == by_hand);

  // a 5 s window at 200 Hz leaves at least 4 recurrent steps
  const auto lengths = c.time_lengths(1000);
  CHECK(lengths.back() >= 4);
}

TEST_CASE("initialization") {
  const auto c = small_config();
  const auto a = init_params(c, 42);
  const auto b = init_params(c, 42);
  CHECK(a.checksum() == b.checksum());
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
  CHECK(init_params(c, 43).checksum() != a.checksum());

  for (double v : a.input_gamma.data()) CHECK(v == 1.0);
  for (double v : a.post_gamma.data()) CHECK(v == 1.0);
  for (const Tensor* t : {&a.input_beta, &a.post_beta, &a.gru_b_ih, &a.gru_b_hh, &a.proj_bias}) {
    for (double v : t->data()) CHECK(v == 0.0);
  }
  for (const auto& layer : a.conv) {
    for (double v : layer.bias.data()) CHECK(v == 0.0);
  }
  auto within = [](const Tensor& t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return std::all_of(t.data().begin(), t.data().end(), [bound](double v) { return std::abs(v) <= bound; });
  };
  CHECK(within(a.conv[0].weight, 6 * 6));
  CHECK(within(a.conv[1].weight, 8 * 3));
  CHECK(within(a.gru_w_ih, 12));
  CHECK(within(a.gru_w_hh, 10));
  CHECK(within(a.proj_weight, 10));
  CHECK(a.gru_w_ih.shape() == Shape{30, 12});
  CHECK(a.proj_weight.shape() == Shape{16, 10});
}

TEST_CASE("config validation and time bookkeeping") {
  auto c = small_config();
  c.conv_kernels = {6};
  CHECK_THROWS_AS(c.validate(), Error);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    EncoderConfig cfg;
    cfg.n_conv_layers = 1 + rng() % 4;
    cfg.conv_channels.assign(cfg.n_conv_layers, 4);
    cfg.conv_kernels.clear();
    cfg.conv_strides.clear();
    for (std::size_t i = 0; i < cfg.n_conv_layers; ++i) {
      cfg.conv_kernels.push_back(1 + rng() % 8);
      cfg.conv_strides.push_back(1 + rng() % 3);
    }
    cfg.pool_kernel = 1 + rng() % 6;
    const std::size_t t = 1 + rng() % 600;
    const auto lengths = cfg.time_lengths(t);
    REQUIRE(lengths.size() == cfg.n_conv_layers + 1);
    std::size_t cur = t;
    for (std::size_t i = 0; i < cfg.n_conv_layers; ++i) {
      cur = cur >= cfg.conv_kernels[i] ? (cur - cfg.conv_kernels[i]) / cfg.conv_strides[i] + 1 : 0;
      CHECK(lengths[i] == cur);
    }
    cur = cur >= cfg.pool_kernel ? (cur - cfg.pool_kernel) / cfg.pool_kernel + 1 : 0;
    CHECK(lengths.back() == cur);
  }
}

TEST_CASE("encode contract") {
  const auto c = small_config();
  const auto p = init_params(c, 3);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = random_window(rng, 80 + trial * 7);
    const auto e = encode(w, p, c);
    CHECK(e.size() == c.embed_dim);
    CHECK(std::abs(norm(e) - 1.0) <= 1e-6);
    CHECK(encode(w, p, c) == e);
  }

  SUBCASE("too-short input names the collapsing stage") {
    const auto w = random_window(rng, 5);
    try {
      encode(w, p, c);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::shape);
      CHECK(std::string(e.what()).find("conv layer 0") != std::string::npos);
    }
    // survives the convolutions (26 -> 11 -> 9) but not the pool of 5 when only 4 steps remain
    const auto w2 = random_window(rng, 14);
    try {
      encode(w2, p, c);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("max-pool") != std::string::npos);
    }
  }
  SUBCASE("signal must have six channels") {
    ImuWindow w;
    w.signal = Tensor({5, 100});
    CHECK_THROWS_AS(encode(w, p, c), Error);
  }
}

TEST_CASE("per-group affine scaling of the accelerometer is absorbed") {
  const auto c = small_config();
  const auto p = init_params(c, 5);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    // accelerometer-only motion (gyro flat), roughly m/s^2 scale
    ImuWindow w;
    w.signal = Tensor({kImuChannels, 120});
    for (std::size_t t = 0; t < 120; ++t) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        w.signal.at(ch, t) = 9.81 * (ch == 2) + 6.0 * std::sin(0.2 * t + ch + trial) + noise(rng);
      }
      for (std::size_t ch = 3; ch < 6; ++ch) w.signal.at(ch, t) = 0.01 * static_cast<double>(ch);
    }
    ImuWindow scaled = w;
    for (std::size_t t = 0; t < 120; ++t) {
      for (std::size_t ch = 0; ch < 3; ++ch) scaled.signal.at(ch, t) *= 10.0;
    }
    CHECK(max_abs_diff(encode(w, p, c), encode(scaled, p, c)) < 1e-6);
  }
}

TEST_CASE("permuting channels within a sensor group is invisible to the encoder") {
  const auto c = small_config();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = init_params(c, 100 + trial);
    for (auto& v : p.input_gamma.data()) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
    for (auto& v : p.input_beta.data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    const auto w = random_window(rng, 90);

    std::array<std::size_t, 6> perm{0, 1, 2, 3, 4, 5};
    std::shuffle(perm.begin(), perm.begin() + 3, rng);
    std::shuffle(perm.begin() + 3, perm.end(), rng);

    ImuWindow pw = w;
    auto q = p;
    const std::size_t k = c.conv_kernels[0];
    for (std::size_t ch = 0; ch < 6; ++ch) {
      for (std::size_t t = 0; t < 90; ++t) pw.signal.at(ch, t) = w.signal.at(perm[ch], t);
      q.input_gamma[ch] = p.input_gamma[perm[ch]];
      q.input_beta[ch] = p.input_beta[perm[ch]];
      for (std::size_t o = 0; o < c.conv_channels[0]; ++o) {
        for (std::size_t j = 0; j < k; ++j) q.conv[0].weight.at(o, ch, j) = p.conv[0].weight.at(o, perm[ch], j);
      }
    }
    CHECK(max_abs_diff(encode(w, p, c), encode(pw, q, c)) < 1e-12);
  }
}

TEST_CASE("encode_batch") {
  const auto c = small_config();
  const auto p = init_params(c, 8);
  std::mt19937_64 rng(9);
  std::vector<ImuWindow> ws;
  for (int i = 0; i < 6; ++i) ws.push_back(random_window(rng, 100, "w" + std::to_string(i)));

  const auto one = encode_batch(std::span(ws).first(1), p, c);
  CHECK(std::vector<double>(one.data().begin(), one.data().end()) == encode(ws[0], p, c));

  const auto all = encode_batch(ws, p, c);
  std::vector<std::size_t> order{3, 0, 5, 1, 4, 2};
  std::vector<ImuWindow> permuted;
  for (auto i : order) permuted.push_back(ws[i]);
  const auto pall = encode_batch(permuted, p, c);
  for (std::size_t r = 0; r < order.size(); ++r) {
    for (std::size_t d = 0; d < c.embed_dim; ++d) CHECK(pall.at(r, d) == all.at(order[r], d));
  }

  ws.push_back(random_window(rng, 101));
  CHECK_THROWS_AS(encode_batch(ws, p, c), Error);
}

TEST_CASE("tiny encoder gradients match central differences") {
  std::mt19937_64 rng(11);
  SUBCASE("sum of the embedding") {
    const auto config = test_support::tiny_encoder_config();
    const auto params = init_params(config, 12);
    const Tensor signal = uniform(rng, {6, 32}, -2.0, 2.0);
    std::vector<Tensor> points;
    for (const auto* t : params.tensors()) points.push_back(*t);
    const MultiScalarFn f = [&](Tape& t, std::span<const Var> v) {
      return ops::sum(t, encode_on_tape(t, EncoderVars{{v.begin(), v.end()}}, config, signal));
    };
    CHECK(finite_difference_check(f, points, 1e-5) < 1e-4);
  }
  SUBCASE("random projections") {
    for (int point = 0; point < 5; ++point) {
      const auto g = test_support::tiny_encoder_case(rng);
      CHECK(finite_difference_check(g.fn, g.points, 1e-5) < 1e-4);
    }
  }
}

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "imu_align/error.hpp"
#include "imu_align/train.hpp"
#include "support.hpp"

using namespace imu_align;
using test_support::TempDir;

namespace {

EncoderConfig fast_encoder(std::size_t dim) {
  EncoderConfig c;
  c.n_conv_layers = 2;
  c.conv_channels = {8, 16};
  c.conv_kernels = {10, 5};
  c.conv_strides = {2, 2};
  c.gru_hidden = 16;
  c.embed_dim = dim;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::value;
}

}  // namespace

TEST_CASE("adagrad update") {
  Tensor p({1}, 1.0);
  std::vector<Tensor*> params{&p};
  std::vector<const Tensor*> cparams{&p};
  auto state = AdagradState::zeros_like(cparams);

  p.grad()[0] = 3.0;
  adagrad_step(params, state, 0.01, 1e-8);
  CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(state.accumulators[0][0] == 9.0);
  CHECK(state.step == 1);

  p.grad()[0] = 3.0;
  const double before = p[0];
  adagrad_step(params, state, 0.01, 1e-8);
  CHECK(p[0] - before == doctest::Approx(-0.01 * 3.0 / std::sqrt(18.0)).epsilon(1e-9));
  CHECK(p[0] - before == doctest::Approx(-0.007071).epsilon(1e-4));

  SUBCASE("zero gradient leaves the parameter alone") {
    Tensor q({3}, 0.5);
    std::vector<Tensor*> qs{&q};
    std::vector<const Tensor*> cqs{&q};
    auto s = AdagradState::zeros_like(cqs);
    q.zero_grad();
    adagrad_step(qs, s, 0.01, 1e-8);
    for (double v : q.data()) CHECK(v == 0.5);
  }
  SUBCASE("non-finite gradient is rejected before any update") {
    Tensor q({2}, 0.5);
    std::vector<Tensor*> qs{&q};
    std::vector<const Tensor*> cqs{&q};
    auto s = AdagradState::zeros_like(cqs);
    q.grad()[0] = 1.0;
    q.grad()[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK(kind_of([&] { adagrad_step(qs, s, 0.01, 1e-8); }) == ErrorKind::numeric);
    CHECK(q[0] == 0.5);
    CHECK(s.accumulators[0][0] == 0.0);
    CHECK(s.step == 0);
  }
  SUBCASE("update matches the closed form over random sequences") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor q({4}, 0.0);
    std::vector<Tensor*> qs{&q};
    std::vector<const Tensor*> cqs{&q};
    auto s = AdagradState::zeros_like(cqs);
    std::vector<double> acc(4, 0.0), ref(4, 0.0);
    for (int step = 0; step < 20; ++step) {
      for (std::size_t i = 0; i < 4; ++i) {
        const double g = n(rng);
        q.grad()[i] = g;
        acc[i] += g * g;
        ref[i] -= 0.05 * g / (std::sqrt(acc[i]) + 1e-8);
      }
      adagrad_step(qs, s, 0.05, 1e-8);
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(q[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_at(0, 0.01, 0.1) == 0.01);
  CHECK(lr_at(10, 0.01, 0.1) == doctest::Approx(0.005));
  CHECK(lr_at(5, 0.01, 0.0) == 0.01);
  double prev = lr_at(0, 0.01, 0.1);
  for (std::size_t e = 1; e < 50; ++e) {
    CHECK(lr_at(e, 0.01, 0.1) < prev);
    prev = lr_at(e, 0.01, 0.1);
  }
}

TEST_CASE("batching") {
  const auto a = make_batches(33, 16, 9, 0);
  REQUIRE(a.size() == 2);
  std::set<std::size_t> seen;
  for (const auto& b : a) {
    CHECK(b.size() == 16);
    seen.insert(b.begin(), b.end());
  }
  CHECK(seen.size() == 32);
  for (auto i : seen) CHECK(i < 33);

  CHECK(make_batches(33, 16, 9, 0) == a);
  CHECK(make_batches(33, 16, 9, 1) != a);
  CHECK(make_batches(33, 16, 10, 0) != a);

  const auto whole = make_batches(16, 16, 0, 0);
  REQUIRE(whole.size() == 1);
  CHECK(std::set<std::size_t>(whole[0].begin(), whole[0].end()).size() == 16);

  CHECK_THROWS_AS(make_batches(15, 16, 0, 0), Error);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 2 + rng() % 10;
    const std::size_t n = b + rng() % 50;
    const auto batches = make_batches(n, b, rng(), rng() % 10);
    CHECK(batches.size() == n / b);
    std::set<std::size_t> all;
    for (const auto& x : batches) all.insert(x.begin(), x.end());
    CHECK(all.size() == (n / b) * b);
  }
}

TEST_CASE("configuration") {
  TrainConfig t;
  CHECK(t.batch_size == 16);
  CHECK(t.learning_rate == 0.01);
  CHECK(t.adagrad_eps == 1e-8);
  CHECK(t.decay == 0.1);
  CHECK(t.temperature == 0.1);
  t.validate();

  t.mode = TrainMode::ivt;
  t.seed = 77;
  CHECK(train_config_from_json(to_json(t)) == t);
  const auto e = fast_encoder(24);
  const auto back = encoder_config_from_json(to_json(e));
  CHECK(back.conv_channels == e.conv_channels);
  CHECK(back.conv_kernels == e.conv_kernels);
  CHECK(back.embed_dim == 24);
  CHECK(back.param_count() == e.param_count());

  CHECK(parse_train_mode("it") == TrainMode::it);
  CHECK_THROWS_AS(parse_train_mode("vt"), Error);
  auto bad = TrainConfig{};
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = TrainConfig{};
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(kind_of([] { train_config_from_json(nlohmann::json{{"batch_size", "x"}}); }) == ErrorKind::parse);
}

TEST_CASE("training behavior") {
  const auto encoder = fast_encoder(32);
  TrainConfig config;

  SUBCASE("loss falls over the first epochs on a clean corpus") {
    const auto ds = synth_dataset(3, 32, 4, 32, 200, 0.0);
    auto params = init_params(encoder, 3);
    auto state = AdagradState::zeros_like(params.tensors());
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < 5; ++epoch) {
      const auto s = train_epoch(ds, params, state, encoder, config, epoch);
      REQUIRE(s.loss.l_total.has_value());
      CHECK(*s.loss.l_total < prev);
      prev = *s.loss.l_total;
      CHECK(s.batches == 2);
      CHECK(s.lr == lr_at(epoch, config.learning_rate, config.decay));
    }
  }

  SUBCASE("initial loss is near chance") {
    const auto big = fast_encoder(512);
    const auto ds = synth_dataset(4, 16, 4, 512, 200, 0.05);
    const auto params = init_params(big, 4);
    Tape tape;
    auto copy = params;
    EncoderVars vars;
    for (auto* t : copy.tensors()) vars.vars.push_back(tape.parameter(*t));
    std::vector<std::size_t> batch(16);
    std::iota(batch.begin(), batch.end(), 0);
    const auto loss = contrastive_batch_loss(tape, vars, big, ds, batch, TrainMode::iv, 0.1);
    const double l = tape.value(loss.loss)[0];
    CHECK(l >= 0.5 * std::log(16.0));
    CHECK(l <= 1.5 * std::log(16.0));
  }

  SUBCASE("deterministic and leaves anchors alone") {
    const auto ds = synth_dataset(5, 32, 4, 32, 200, 0.05);
    const auto anchors_before = *ds.video_anchors;
    auto run = [&] {
      auto params = init_params(encoder, 5);
      auto state = AdagradState::zeros_like(params.tensors());
      train_epoch(ds, params, state, encoder, config, 0);
      train_epoch(ds, params, state, encoder, config, 1);
      return params;
    };
    const auto a = run(), b = run();
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != init_params(encoder, 5).checksum());
    REQUIRE(ds.video_anchors->size() == anchors_before.size());
    for (const auto& [id, anchor] : anchors_before) CHECK(ds.video_anchors->at(id).vector == anchor.vector);
    for (const auto* t : a.tensors()) CHECK(!t->has_grad());
  }

  SUBCASE("modes need their anchors") {
    auto ds = synth_dataset(6, 16, 4, 32, 200, 0.05);
    ds.text_anchors.reset();
    CHECK(kind_of([&] { require_modalities(ds, TrainMode::it); }) == ErrorKind::coverage);
    CHECK(kind_of([&] { require_modalities(ds, TrainMode::ivt); }) == ErrorKind::coverage);
    require_modalities(ds, TrainMode::iv);
  }

  SUBCASE("trimodal loss reports every direction") {
    const auto ds = synth_dataset(7, 32, 4, 32, 200, 0.05);
    auto params = init_params(encoder, 7);
    auto state = AdagradState::zeros_like(params.tensors());
    auto cfg = config;
    cfg.mode = TrainMode::ivt;
    const auto s = train_epoch(ds, params, state, encoder, cfg, 0);
    CHECK(s.loss.l_i2v.has_value());
    CHECK(s.loss.l_t2i.has_value());
    const auto j = to_json(s);
    CHECK(j.contains("l_i2t"));
    CHECK(j.contains("l_total"));
    CHECK(j["epoch"] == 0);
  }
}

TEST_CASE("checkpoints") {
  TempDir dir("ckpt");
  const auto encoder = fast_encoder(16);
  Checkpoint ckpt;
  ckpt.encoder = encoder;
  ckpt.train.seed = 3;
  ckpt.train.mode = TrainMode::it;
  ckpt.params = init_params(encoder, 3);
  ckpt.optimizer = AdagradState::zeros_like(ckpt.params.tensors());
  ckpt.optimizer.accumulators[0][0] = 2.5;
  ckpt.optimizer.step = 12;
  ckpt.step = 12;
  ckpt.epochs = 3;

  const auto a = dir / "a.bin", b = dir / "b.bin";
  save_checkpoint(ckpt, a);
  const auto loaded = load_checkpoint(a);
  CHECK(loaded.params.checksum() == ckpt.params.checksum());
  CHECK(loaded.optimizer == ckpt.optimizer);
  CHECK(loaded.train == ckpt.train);
  CHECK(loaded.epochs == 3);
  CHECK(loaded.encoder.conv_channels == encoder.conv_channels);
  save_checkpoint(loaded, b);
  CHECK(slurp(a) == slurp(b));

  const std::string bytes = slurp(a);
  auto bad = dir / "bad.bin";
  std::string mutated = bytes;
  mutated[0] = 'X';
  spit(bad, mutated);
  CHECK(kind_of([&] { load_checkpoint(bad); }) == ErrorKind::parse);

  mutated = bytes;
  mutated[8] = static_cast<char>(kCheckpointVersion + 1);
  spit(bad, mutated);
  CHECK(kind_of([&] { load_checkpoint(bad); }) == ErrorKind::version);

  spit(bad, bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(bad), Error);
  spit(bad, bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(bad), Error);
  CHECK(kind_of([&] { load_checkpoint(dir / "missing.bin"); }) == ErrorKind::io);
}

TEST_CASE("runs and resumption") {
  TempDir dir("run");
  const auto encoder = fast_encoder(32);
  const auto ds = synth_dataset(8, 32, 4, 32, 200, 0.05);
  TrainConfig config;
  config.epochs = 2;
  config.seed = 8;

  const auto full = run_training(ds, encoder, config, {dir / "full", std::nullopt, {}});
  CHECK(full.history.size() == 2);
  CHECK(full.final.epochs == 2);
  CHECK(full.final.step == 4);
  CHECK(full.checkpoint_path.filename() == "ckpt-4.bin");
  CHECK(std::filesystem::exists(dir / "full" / "config.json"));

  auto half_config = config;
  half_config.epochs = 1;
  const auto half = run_training(ds, encoder, half_config, {dir / "split", std::nullopt, {}});
  CHECK(half.final.step == 2);
  const auto resumed =
      run_training(ds, encoder, config, {dir / "split", load_checkpoint(half.checkpoint_path), {}});

  CHECK(resumed.final.params.checksum() == full.final.params.checksum());
  CHECK(resumed.final.optimizer == full.final.optimizer);
  CHECK(slurp(dir / "split" / "metrics.jsonl") == slurp(dir / "full" / "metrics.jsonl"));
  CHECK(slurp(resumed.checkpoint_path) == slurp(full.checkpoint_path));

  SUBCASE("repeat runs are bitwise identical") {
    const auto again = run_training(ds, encoder, config, {dir / "again", std::nullopt, {}});
    CHECK(slurp(dir / "again" / "metrics.jsonl") == slurp(dir / "full" / "metrics.jsonl"));
    CHECK(slurp(again.checkpoint_path) == slurp(full.checkpoint_path));
  }
  SUBCASE("resuming with a different architecture is refused") {
    auto other = encoder;
    other.gru_hidden = 8;
    CHECK_THROWS_AS(run_training(ds, other, config, {dir / "split2", load_checkpoint(half.checkpoint_path), {}}),
                    Error);
  }
}

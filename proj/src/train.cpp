#include "imu_align/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "imu_align/error.hpp"
#include "imu_align/file_lock.hpp"
#include "imu_align/ops.hpp"

namespace imu_align {

using nlohmann::json;

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::iv: return "iv";
    case TrainMode::it: return "it";
    case TrainMode::ivt: return "ivt";
  }
  return "unknown";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "iv") return TrainMode::iv;
  if (text == "it") return TrainMode::it;
  if (text == "ivt") return TrainMode::ivt;
  throw Error(ErrorKind::value, "unknown training mode '" + std::string(text) + "' (expected iv, it or ivt)");
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw Error(ErrorKind::value, "batch size must be >= 2 (a contrastive batch needs a negative)");
  if (!(learning_rate > 0.0) || !(adagrad_eps > 0.0) || !(temperature > 0.0)) {
    throw Error(ErrorKind::value, "learning rate, adagrad eps and temperature must be positive");
  }
  if (!(decay >= 0.0)) throw Error(ErrorKind::value, "decay must be non-negative");
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"adagrad_eps", c.adagrad_eps},
              {"decay", c.decay},           {"epochs", c.epochs},               {"seed", c.seed},
              {"mode", to_string(c.mode)},  {"temperature", c.temperature}};
}

json to_json(const EncoderConfig& c) {
  return json{{"n_conv_layers", c.n_conv_layers}, {"conv_channels", c.conv_channels},
              {"conv_kernels", c.conv_kernels},   {"conv_strides", c.conv_strides},
              {"pool_kernel", c.pool_kernel},     {"pool_stride", c.pool_kernel},
              {"input_groups", EncoderConfig::kInputGroups}, {"post_groups", EncoderConfig::kPostGroups},
              {"gru_hidden", c.gru_hidden},       {"gru_bidirectional", false},
              {"embed_dim", c.embed_dim},         {"groupnorm_eps", c.groupnorm_eps}};
}

TrainConfig train_config_from_json(const json& j) {
  try {
    TrainConfig c;
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.adagrad_eps = j.at("adagrad_eps").get<double>();
    c.decay = j.at("decay").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.temperature = j.at("temperature").get<double>();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("bad train config: ") + e.what());
  }
}

EncoderConfig encoder_config_from_json(const json& j) {
  try {
    EncoderConfig c;
    c.n_conv_layers = j.at("n_conv_layers").get<std::size_t>();
    c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    c.conv_kernels = j.at("conv_kernels").get<std::vector<std::size_t>>();
    c.conv_strides = j.at("conv_strides").get<std::vector<std::size_t>>();
    c.pool_kernel = j.at("pool_kernel").get<std::size_t>();
    c.gru_hidden = j.at("gru_hidden").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.groupnorm_eps = j.at("groupnorm_eps").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("bad encoder config: ") + e.what());
  }
}

AdagradState AdagradState::zeros_like(std::span<const Tensor* const> params) {
  AdagradState s;
  for (const Tensor* p : params) s.accumulators.emplace_back(p->shape(), 0.0);
  return s;
}

void adagrad_step(std::span<Tensor* const> params, AdagradState& state, double lr, double eps) {
  if (state.accumulators.size() != params.size()) {
    throw Error(ErrorKind::shape, "adagrad: " + std::to_string(params.size()) + " parameters but " +
                                      std::to_string(state.accumulators.size()) + " accumulators");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.accumulators[i].shape() != params[i]->shape()) {
      throw Error(ErrorKind::shape, "adagrad: accumulator " + std::to_string(i) + " shape " +
                                        shape_to_string(state.accumulators[i].shape()) + " vs parameter " +
                                        shape_to_string(params[i]->shape()));
    }
    for (double g : params[i]->grad()) {
      if (!std::isfinite(g)) {
        throw Error(ErrorKind::numeric, "adagrad: non-finite gradient in parameter tensor " + std::to_string(i) +
                                            " at step " + std::to_string(state.step));
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = params[i]->grad();
    auto acc = state.accumulators[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      acc[k] += g[k] * g[k];
      p[k] -= lr * g[k] / (std::sqrt(acc[k]) + eps);
    }
  }
  ++state.step;
}

double lr_at(std::size_t epoch, double base_lr, double decay) {
  return base_lr / (1.0 + decay * static_cast<double>(epoch));
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n_items, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch) {
  if (batch_size == 0) throw Error(ErrorKind::value, "make_batches: batch size must be positive");
  if (n_items < batch_size) {
    throw Error(ErrorKind::value, "make_batches: dataset of " + std::to_string(n_items) +
                                      " items is smaller than batch size " + std::to_string(batch_size));
  }
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + batch_size <= n_items; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> make_batches(const ParallelDataset& dataset, std::size_t batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch) {
  return make_batches(dataset.size(), batch_size, seed, epoch);
}

json to_json(const EpochSummary& s) {
  json j{{"epoch", s.epoch}, {"lr", s.lr}};
  if (s.loss.l_i2v) j["l_i2v"] = *s.loss.l_i2v;
  if (s.loss.l_v2i) j["l_v2i"] = *s.loss.l_v2i;
  if (s.loss.l_i2t) j["l_i2t"] = *s.loss.l_i2t;
  if (s.loss.l_t2i) j["l_t2i"] = *s.loss.l_t2i;
  j["l_total"] = s.loss.l_total.value_or(0.0);
  return j;
}

void require_modalities(const ParallelDataset& dataset, TrainMode mode) {
  if (mode != TrainMode::it && !dataset.video_anchors) {
    throw Error(ErrorKind::coverage, "mode " + std::string(to_string(mode)) + " needs video anchors");
  }
  if (mode != TrainMode::iv && !dataset.text_anchors) {
    throw Error(ErrorKind::coverage, "mode " + std::string(to_string(mode)) + " needs text anchors");
  }
}

namespace {

struct SymmetricVars {
  Var fwd, bwd, sym;
};

SymmetricVars symmetric_on_tape(Tape& tape, Var embeddings, const Tensor& anchors, double temperature) {
  const Var sims = ops::matmul_nt(tape, embeddings, tape.constant(anchors));
  const Var fwd = info_nce(tape, sims, temperature, Direction::row_to_col);
  const Var bwd = info_nce(tape, sims, temperature, Direction::col_to_row);
  return {fwd, bwd, ops::scale(tape, ops::add(tape, fwd, bwd), 0.5)};
}

void accumulate(std::optional<double>& sum, const std::optional<double>& v) {
  if (v) sum = sum.value_or(0.0) + *v;
}

void divide(std::optional<double>& v, double n) {
  if (v) *v /= n;
}

}  // namespace

BatchLoss contrastive_batch_loss(Tape& tape, const EncoderVars& vars, const EncoderConfig& encoder,
                                 const ParallelDataset& dataset, std::span<const std::size_t> batch, TrainMode mode,
                                 double temperature) {
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (auto idx : batch) rows.push_back(encode_on_tape(tape, vars, encoder, dataset.windows.at(idx).signal));
  const Var emb = ops::stack_rows(tape, rows);

  BatchLoss out;
  std::optional<Var> total;
  if (mode != TrainMode::it) {
    const auto iv = symmetric_on_tape(tape, emb, dataset.anchor_matrix(Modality::video, batch), temperature);
    out.report.l_i2v = tape.value(iv.fwd)[0];
    out.report.l_v2i = tape.value(iv.bwd)[0];
    out.report.l_sym_iv = tape.value(iv.sym)[0];
    total = iv.sym;
  }
  if (mode != TrainMode::iv) {
    const auto it = symmetric_on_tape(tape, emb, dataset.anchor_matrix(Modality::text, batch), temperature);
    out.report.l_i2t = tape.value(it.fwd)[0];
    out.report.l_t2i = tape.value(it.bwd)[0];
    out.report.l_sym_it = tape.value(it.sym)[0];
    total = total ? ops::add(tape, *total, it.sym) : it.sym;
  }
  out.loss = *total;
  out.report.l_total = tape.value(out.loss)[0];
  return out;
}

EpochSummary train_epoch(const ParallelDataset& dataset, EncoderParams& params, AdagradState& state,
                         const EncoderConfig& encoder, const TrainConfig& config, std::size_t epoch) {
  config.validate();
  require_modalities(dataset, config.mode);
  const auto batches = make_batches(dataset, config.batch_size, config.seed, epoch);
  EpochSummary summary;
  summary.epoch = epoch;
  summary.lr = lr_at(epoch, config.learning_rate, config.decay);
  summary.batches = batches.size();
  const auto tensors = params.tensors();
  if (state.accumulators.empty()) state = AdagradState::zeros_like(std::vector<const Tensor*>(tensors.begin(), tensors.end()));

  for (std::size_t b = 0; b < batches.size(); ++b) {
    params.zero_grad();
    Tape tape;
    const auto vars = bind_params(tape, params, true);
    const auto batch = contrastive_batch_loss(tape, vars, encoder, dataset, batches[b], config.mode, config.temperature);
    if (!std::isfinite(*batch.report.l_total)) {
      throw Error(ErrorKind::numeric, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(b));
    }
    tape.backward(batch.loss);
    adagrad_step(tensors, state, summary.lr, config.adagrad_eps);
    if (!params.all_finite()) {
      throw Error(ErrorKind::numeric, "non-finite parameter after step " + std::to_string(state.step));
    }
    auto& m = summary.loss;
    const auto& r = batch.report;
    accumulate(m.l_i2v, r.l_i2v);
    accumulate(m.l_v2i, r.l_v2i);
    accumulate(m.l_sym_iv, r.l_sym_iv);
    accumulate(m.l_i2t, r.l_i2t);
    accumulate(m.l_t2i, r.l_t2i);
    accumulate(m.l_sym_it, r.l_sym_it);
    accumulate(m.l_total, r.l_total);
  }
  for (auto* v : {&summary.loss.l_i2v, &summary.loss.l_v2i, &summary.loss.l_sym_iv, &summary.loss.l_i2t,
                  &summary.loss.l_t2i, &summary.loss.l_sym_it, &summary.loss.l_total}) {
    divide(*v, static_cast<double>(batches.size()));
  }
  for (auto* t : tensors) t->clear_grad();
  return summary;
}

RunResult run_training(const ParallelDataset& dataset, const EncoderConfig& encoder, const TrainConfig& config,
                       const RunOptions& options) {
  encoder.validate();
  config.validate();
  require_modalities(dataset, config.mode);
  std::filesystem::create_directories(options.run_dir);
  FileLock lock(options.run_dir / "run");

  RunResult result;
  Checkpoint& ck = result.final;
  if (options.resume) {
    ck = *options.resume;
    if (!(ck.encoder == encoder)) throw Error(ErrorKind::value, "resume: checkpoint encoder config differs");
  } else {
    ck.params = init_params(encoder, config.seed);
    const auto tensors = ck.params.tensors();
    ck.optimizer = AdagradState::zeros_like(std::vector<const Tensor*>(tensors.begin(), tensors.end()));
  }
  ck.encoder = encoder;
  ck.train = config;

  {
    std::ofstream cfg(options.run_dir / "config.json", std::ios::trunc);
    if (!cfg) throw Error(ErrorKind::io, "cannot write config.json in " + options.run_dir.string());
    cfg << json{{"train", to_json(config)}, {"encoder", to_json(encoder)}}.dump(2) << '\n';
  }
  const auto metrics_path = options.run_dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, options.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw Error(ErrorKind::io, "cannot write " + metrics_path.string());

  for (std::size_t epoch = ck.epochs; epoch < config.epochs; ++epoch) {
    auto summary = train_epoch(dataset, ck.params, ck.optimizer, encoder, config, epoch);
    ck.epochs = epoch + 1;
    ck.step = ck.optimizer.step;
    metrics << to_json(summary).dump() << '\n';
    metrics.flush();
    if (options.on_epoch) options.on_epoch(summary);
    result.history.push_back(std::move(summary));
  }
  result.checkpoint_path = options.run_dir / ("ckpt-" + std::to_string(ck.step) + ".bin");
  save_checkpoint(ck, result.checkpoint_path);
  return result;
}

}  // namespace imu_align

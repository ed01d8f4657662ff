#include "imu_align/encoder.hpp"

#include <cmath>
#include <random>

#include "imu_align/error.hpp"
#include "imu_align/hashing.hpp"
#include "imu_align/ops.hpp"
#include "imu_align/parallel.hpp"

namespace imu_align {

void EncoderConfig::validate() const {
  if (n_conv_layers == 0) throw Error(ErrorKind::value, "encoder: need at least one conv layer");
  if (conv_channels.size() != n_conv_layers || conv_kernels.size() != n_conv_layers ||
      conv_strides.size() != n_conv_layers) {
    throw Error(ErrorKind::value, "encoder: conv channel/kernel/stride lists must have " +
                                      std::to_string(n_conv_layers) + " entries");
  }
  for (std::size_t i = 0; i < n_conv_layers; ++i) {
    if (conv_channels[i] == 0 || conv_kernels[i] == 0 || conv_strides[i] == 0) {
      throw Error(ErrorKind::value, "encoder: conv layer " + std::to_string(i) + " has a zero size");
    }
  }
  if (conv_channels.back() % kPostGroups != 0) throw Error(ErrorKind::value, "encoder: bad post-norm grouping");
  if (pool_kernel == 0 || gru_hidden == 0 || embed_dim == 0) {
    throw Error(ErrorKind::value, "encoder: pool kernel, GRU hidden and embedding sizes must be positive");
  }
  if (!(groupnorm_eps > 0.0)) throw Error(ErrorKind::value, "encoder: groupnorm_eps must be positive");
}

std::vector<std::size_t> EncoderConfig::time_lengths(std::size_t input_len) const {
  std::vector<std::size_t> out;
  std::size_t t = input_len;
  for (std::size_t i = 0; i < n_conv_layers; ++i) {
    t = ops::window_out_len(t, conv_kernels[i], conv_strides[i]);
    out.push_back(t);
  }
  out.push_back(ops::window_out_len(t, pool_kernel, pool_kernel));
  return out;
}

std::size_t EncoderConfig::param_count() const {
  std::size_t n = 2 * kImuChannels;
  std::size_t c_in = kImuChannels;
  for (std::size_t i = 0; i < n_conv_layers; ++i) {
    n += conv_channels[i] * c_in * conv_kernels[i] + conv_channels[i];
    c_in = conv_channels[i];
  }
  n += 2 * c_in;
  n += 3 * gru_hidden * (c_in + gru_hidden) + 6 * gru_hidden;
  n += embed_dim * gru_hidden + embed_dim;
  return n;
}

std::vector<Tensor*> EncoderParams::tensors() {
  std::vector<Tensor*> out{&input_gamma, &input_beta};
  for (auto& c : conv) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  for (Tensor* t : {&post_gamma, &post_beta, &gru_w_ih, &gru_w_hh, &gru_b_ih, &gru_b_hh, &proj_weight, &proj_bias}) {
    out.push_back(t);
  }
  return out;
}

std::vector<const Tensor*> EncoderParams::tensors() const {
  auto mut = const_cast<EncoderParams*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> EncoderParams::names() const {
  std::vector<std::string> out{"input_gn.gamma", "input_gn.beta"};
  for (std::size_t i = 0; i < conv.size(); ++i) {
    out.push_back("conv" + std::to_string(i) + ".weight");
    out.push_back("conv" + std::to_string(i) + ".bias");
  }
  for (const char* n : {"post_gn.gamma", "post_gn.beta", "gru.w_ih", "gru.w_hh", "gru.b_ih", "gru.b_hh", "proj.weight",
                        "proj.bias"}) {
    out.emplace_back(n);
  }
  return out;
}

std::size_t EncoderParams::param_count() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->size();
  return n;
}

bool EncoderParams::all_finite() const {
  for (const auto* t : tensors()) {
    if (!t->all_finite()) return false;
  }
  return true;
}

void EncoderParams::zero_grad() {
  for (auto* t : tensors()) t->zero_grad();
}

std::uint64_t EncoderParams::checksum() const {
  Fnv1a h;
  for (const auto* t : tensors()) {
    for (auto d : t->shape()) h.update(static_cast<std::uint64_t>(d));
    for (double v : t->data()) h.update(v);
  }
  return h.digest();
}

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };

  EncoderParams p;
  p.input_gamma = Tensor({kImuChannels}, 1.0);
  p.input_beta = Tensor({kImuChannels}, 0.0);
  std::size_t c_in = kImuChannels;
  for (std::size_t i = 0; i < config.n_conv_layers; ++i) {
    const std::size_t c_out = config.conv_channels[i], k = config.conv_kernels[i];
    p.conv.push_back({uniform({c_out, c_in, k}, c_in * k), Tensor({c_out}, 0.0)});
    c_in = c_out;
  }
  p.post_gamma = Tensor({c_in}, 1.0);
  p.post_beta = Tensor({c_in}, 0.0);
  const std::size_t h = config.gru_hidden;
  p.gru_w_ih = uniform({3 * h, c_in}, c_in);
  p.gru_w_hh = uniform({3 * h, h}, h);
  p.gru_b_ih = Tensor({3 * h}, 0.0);
  p.gru_b_hh = Tensor({3 * h}, 0.0);
  p.proj_weight = uniform({config.embed_dim, h}, h);
  p.proj_bias = Tensor({config.embed_dim}, 0.0);
  return p;
}

EncoderVars bind_params(Tape& tape, EncoderParams& params, bool trainable) {
  EncoderVars out;
  for (Tensor* t : params.tensors()) out.vars.push_back(trainable ? tape.parameter(*t) : tape.constant(*t));
  return out;
}

EncoderVars bind_params(Tape& tape, const EncoderParams& params) {
  EncoderVars out;
  for (const Tensor* t : params.tensors()) out.vars.push_back(tape.constant(*t));
  return out;
}

Var encode_on_tape(Tape& tape, const EncoderVars& vars, const EncoderConfig& config, const Tensor& signal) {
  const std::size_t n = config.n_conv_layers;
  if (vars.vars.size() != 2 * n + 10) {
    throw Error(ErrorKind::shape, "encoder: expected " + std::to_string(2 * n + 10) + " parameter tensors, got " +
                                      std::to_string(vars.vars.size()));
  }
  if (signal.rank() != 2 || signal.dim(0) != kImuChannels) {
    throw Error(ErrorKind::shape, "encoder: signal must be 6 x T, got " + shape_to_string(signal.shape()));
  }
  const auto lengths = config.time_lengths(signal.dim(1));
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] > 0) continue;
    const std::size_t before = i == 0 ? signal.dim(1) : lengths[i - 1];
    const bool pool = i == n;
    throw Error(ErrorKind::shape,
                "encoder: input of " + std::to_string(signal.dim(1)) + " samples collapses at " +
                    (pool ? std::string("max-pool") : "conv layer " + std::to_string(i)) + " (length " +
                    std::to_string(before) + " < kernel " +
                    std::to_string(pool ? config.pool_kernel : config.conv_kernels[i]) + ")");
  }

  const auto& v = vars.vars;
  Var x = tape.constant(signal);
  x = ops::group_norm(tape, x, EncoderConfig::kInputGroups, v[0], v[1], config.groupnorm_eps);
  for (std::size_t i = 0; i < n; ++i) {
    x = ops::conv1d(tape, x, v[2 + 2 * i], v[3 + 2 * i], config.conv_strides[i]);
    x = ops::relu(tape, x);
  }
  x = ops::max_pool1d(tape, x, config.pool_kernel, config.pool_kernel);
  const std::size_t base = 2 + 2 * n;
  x = ops::group_norm(tape, x, EncoderConfig::kPostGroups, v[base], v[base + 1], config.groupnorm_eps);
  const Var seq = ops::transpose(tape, x);
  const Var h0 = tape.constant(Tensor({config.gru_hidden}, 0.0));
  const Var states = ops::gru(tape, seq, {v[base + 2], v[base + 3], v[base + 4], v[base + 5]}, h0);
  const Var summary = ops::last_row(tape, states);
  const Var projected = ops::linear(tape, summary, v[base + 6], v[base + 7]);
  return ops::l2_normalize(tape, projected, EncoderConfig::kNormalizeEps);
}

std::vector<double> encode(const ImuWindow& window, const EncoderParams& params, const EncoderConfig& config) {
  Tape tape;
  const auto vars = bind_params(tape, params);
  return tape.value(encode_on_tape(tape, vars, config, window.signal)).values();
}

Tensor encode_batch(std::span<const ImuWindow> windows, const EncoderParams& params, const EncoderConfig& config) {
  if (windows.empty()) return Tensor({0, config.embed_dim});
  const std::size_t len = windows.front().length();
  for (const auto& w : windows) {
    if (w.length() != len) {
      throw Error(ErrorKind::shape, "encode_batch: window " + w.window_id + " has " + std::to_string(w.length()) +
                                        " samples, expected " + std::to_string(len));
    }
  }
  Tensor out({windows.size(), config.embed_dim});
  parallel_for(windows.size(), [&](std::size_t i) {
    const auto e = encode(windows[i], params, config);
    std::copy(e.begin(), e.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * config.embed_dim));
  });
  return out;
}

}  // namespace imu_align

#include "imu_align/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "imu_align/error.hpp"

namespace imu_align::ops {

namespace {

void expect_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::shape, std::string(op) + ": " + what + " must be rank " +
                                      std::to_string(rank) + ", got " + shape_to_string(t.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const char* a_name, const Tensor& a, const char* b_name,
                           const Tensor& b) {
  throw Error(ErrorKind::shape, std::string(op) + ": " + a_name + " " + shape_to_string(a.shape()) +
                                    " does not match " + b_name + " " + shape_to_string(b.shape()));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::size_t window_out_len(std::size_t time, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0 || time < kernel) return 0;
  return (time - kernel) / stride + 1;
}

Var conv1d(Tape& tape, Var input, Var weight, Var bias, std::size_t stride) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(weight);
  const Tensor& b = tape.value(bias);
  expect_rank(x, 2, "conv1d", "input");
  expect_rank(w, 3, "conv1d", "weight");
  expect_rank(b, 1, "conv1d", "bias");
  if (stride == 0) throw Error(ErrorKind::value, "conv1d: stride must be >= 1");
  const std::size_t c_in = x.dim(0), time = x.dim(1);
  const std::size_t c_out = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != c_in) mismatch("conv1d", "input", x, "weight", w);
  if (b.dim(0) != c_out) mismatch("conv1d", "bias", b, "weight", w);
  if (kernel == 0 || time < kernel) {
    throw Error(ErrorKind::shape, "conv1d: time " + std::to_string(time) + " is shorter than kernel " +
                                      std::to_string(kernel));
  }
  const std::size_t t_out = window_out_len(time, kernel, stride);

  Tensor out({c_out, t_out});
  for (std::size_t o = 0; o < c_out; ++o) {
    double* y = &out.at(o, 0);
    std::fill(y, y + t_out, b[o]);
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* xr = &x.at(c, 0);
      const double* wr = &w.at(o, c, 0);
      for (std::size_t t = 0; t < t_out; ++t) {
        const double* xs = xr + t * stride;
        double acc = 0.0;
        for (std::size_t k = 0; k < kernel; ++k) acc += wr[k] * xs[k];
        y[t] += acc;
      }
    }
  }

  return tape.record(std::move(out), {input, weight, bias},
                     [=](Tape& tp, std::span<const double> g) {
                       const Tensor& xv = tp.value(input);
                       const Tensor& wv = tp.value(weight);
                       const bool want_x = tp.needs_grad(input);
                       const bool want_w = tp.needs_grad(weight);
                       const bool want_b = tp.needs_grad(bias);
                       std::span<double> gx, gw, gb;
                       if (want_x) gx = tp.grad_buffer(input);
                       if (want_w) gw = tp.grad_buffer(weight);
                       if (want_b) gb = tp.grad_buffer(bias);
                       for (std::size_t o = 0; o < c_out; ++o) {
                         const double* go = g.data() + o * t_out;
                         if (want_b) {
                           for (std::size_t t = 0; t < t_out; ++t) gb[o] += go[t];
                         }
                         for (std::size_t c = 0; c < c_in; ++c) {
                           const std::size_t w_off = (o * c_in + c) * kernel;
                           const std::size_t x_off = c * time;
                           for (std::size_t t = 0; t < t_out; ++t) {
                             const double gt = go[t];
                             if (gt == 0.0) continue;
                             const std::size_t base = x_off + t * stride;
                             for (std::size_t k = 0; k < kernel; ++k) {
                               if (want_w) gw[w_off + k] += gt * xv[base + k];
                               if (want_x) gx[base + k] += gt * wv[w_off + k];
                             }
                           }
                         }
                       }
                     });
}

Var group_norm(Tape& tape, Var input, std::size_t num_groups, Var gamma, Var beta, double eps) {
  const Tensor& x = tape.value(input);
  const Tensor& ga = tape.value(gamma);
  const Tensor& be = tape.value(beta);
  expect_rank(x, 2, "group_norm", "input");
  expect_rank(ga, 1, "group_norm", "gamma");
  expect_rank(be, 1, "group_norm", "beta");
  const std::size_t channels = x.dim(0), time = x.dim(1);
  if (num_groups == 0 || channels % num_groups != 0) {
    throw Error(ErrorKind::shape, "group_norm: " + std::to_string(channels) +
                                      " channels not divisible by " + std::to_string(num_groups) +
                                      " groups");
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::value, "group_norm: eps must be positive");
  if (ga.dim(0) != channels) mismatch("group_norm", "gamma", ga, "input", x);
  if (be.dim(0) != channels) mismatch("group_norm", "beta", be, "input", x);
  if (time == 0) throw Error(ErrorKind::shape, "group_norm: empty time axis");

  const std::size_t per_group = channels / num_groups;
  const std::size_t n = per_group * time;
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(num_groups);
  Tensor out({channels, time});
  for (std::size_t grp = 0; grp < num_groups; ++grp) {
    const std::size_t lo = grp * n, hi = lo + n;
    double mean = 0.0;
    for (std::size_t i = lo; i < hi; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = lo; i < hi; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[grp] = inv;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t c = i / time;
      (*xhat)[i] = (x[i] - mean) * inv;
      out[i] = ga[c] * (*xhat)[i] + be[c];
    }
  }

  return tape.record(std::move(out), {input, gamma, beta},
                     [=](Tape& tp, std::span<const double> g) {
                       const Tensor& gv = tp.value(gamma);
                       if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
                         std::span<double> gg = tp.needs_grad(gamma) ? tp.grad_buffer(gamma) : std::span<double>{};
                         std::span<double> gb = tp.needs_grad(beta) ? tp.grad_buffer(beta) : std::span<double>{};
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t c = i / time;
                           if (!gg.empty()) gg[c] += g[i] * (*xhat)[i];
                           if (!gb.empty()) gb[c] += g[i];
                         }
                       }
                       if (!tp.needs_grad(input)) return;
                       auto gx = tp.grad_buffer(input);
                       for (std::size_t grp = 0; grp < num_groups; ++grp) {
                         const std::size_t lo = grp * n, hi = lo + n;
                         double mean_d = 0.0, mean_dx = 0.0;
                         for (std::size_t i = lo; i < hi; ++i) {
                           const double d = g[i] * gv[i / time];
                           mean_d += d;
                           mean_dx += d * (*xhat)[i];
                         }
                         mean_d /= static_cast<double>(n);
                         mean_dx /= static_cast<double>(n);
                         const double inv = (*inv_std)[grp];
                         for (std::size_t i = lo; i < hi; ++i) {
                           const double d = g[i] * gv[i / time];
                           gx[i] += inv * (d - mean_d - (*xhat)[i] * mean_dx);
                         }
                       }
                     });
}

Var max_pool1d(Tape& tape, Var input, std::size_t kernel, std::size_t stride) {
  const Tensor& x = tape.value(input);
  expect_rank(x, 2, "max_pool1d", "input");
  if (kernel == 0 || stride == 0) throw Error(ErrorKind::value, "max_pool1d: kernel and stride must be >= 1");
  const std::size_t channels = x.dim(0), time = x.dim(1);
  if (time < kernel) {
    throw Error(ErrorKind::shape, "max_pool1d: time " + std::to_string(time) + " is shorter than kernel " +
                                      std::to_string(kernel));
  }
  const std::size_t t_out = window_out_len(time, kernel, stride);
  Tensor out({channels, t_out});
  std::vector<std::size_t> argmax(channels * t_out);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < t_out; ++t) {
      std::size_t best = c * time + t * stride;
      for (std::size_t k = 1; k < kernel; ++k) {
        const std::size_t idx = c * time + t * stride + k;
        if (x[idx] > x[best]) best = idx;
      }
      argmax[c * t_out + t] = best;
      out.at(c, t) = x[best];
    }
  }
  return tape.record(std::move(out), {input},
                     [input, argmax = std::move(argmax)](Tape& tp, std::span<const double> g) {
                       auto gx = tp.grad_buffer(input);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                     });
}

Var relu(Tape& tape, Var x) {
  Tensor out = tape.value(x);
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {x}, [x](Tape& tp, std::span<const double> g) {
    const Tensor& xv = tp.value(x);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var tanh(Tape& tape, Var x) {
  Tensor out = tape.value(x);
  for (auto& v : out.data()) v = std::tanh(v);
  auto y = std::make_shared<std::vector<double>>(out.values());
  return tape.record(std::move(out), {x}, [x, y](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - (*y)[i] * (*y)[i]);
  });
}

Var gru(Tape& tape, Var sequence, const GruWeights& weights, Var h0) {
  const Tensor& xs = tape.value(sequence);
  const Tensor& w_ih = tape.value(weights.w_ih);
  const Tensor& w_hh = tape.value(weights.w_hh);
  const Tensor& b_ih = tape.value(weights.b_ih);
  const Tensor& b_hh = tape.value(weights.b_hh);
  const Tensor& h_init = tape.value(h0);
  expect_rank(xs, 2, "gru", "sequence");
  expect_rank(w_ih, 2, "gru", "w_ih");
  expect_rank(w_hh, 2, "gru", "w_hh");
  expect_rank(b_ih, 1, "gru", "b_ih");
  expect_rank(b_hh, 1, "gru", "b_hh");
  expect_rank(h_init, 1, "gru", "h0");
  const std::size_t steps = xs.dim(0), features = xs.dim(1);
  const std::size_t hidden = w_hh.dim(1);
  if (w_ih.dim(1) != features) mismatch("gru", "sequence", xs, "w_ih", w_ih);
  if (w_ih.dim(0) != 3 * hidden) mismatch("gru", "w_ih", w_ih, "w_hh", w_hh);
  if (w_hh.dim(0) != 3 * hidden) mismatch("gru", "w_hh", w_hh, "hidden size", h_init);
  if (b_ih.dim(0) != 3 * hidden) mismatch("gru", "b_ih", b_ih, "w_ih", w_ih);
  if (b_hh.dim(0) != 3 * hidden) mismatch("gru", "b_hh", b_hh, "w_hh", w_hh);
  if (h_init.dim(0) != hidden) mismatch("gru", "h0", h_init, "w_hh", w_hh);
  if (steps == 0) throw Error(ErrorKind::shape, "gru: empty sequence");

  // Per-step caches for the backward sweep.
  struct Cache {
    std::vector<double> r, z, n, hn, h_prev;
  };
  auto cache = std::make_shared<Cache>();
  const std::size_t h3 = 3 * hidden;
  cache->r.resize(steps * hidden);
  cache->z.resize(steps * hidden);
  cache->n.resize(steps * hidden);
  cache->hn.resize(steps * hidden);
  cache->h_prev.resize(steps * hidden);

  Tensor out({steps, hidden});
  std::vector<double> h(h_init.values());
  std::vector<double> gi(h3), gh(h3);
  for (std::size_t t = 0; t < steps; ++t) {
    const double* x = &xs.at(t, 0);
    for (std::size_t j = 0; j < h3; ++j) {
      const double* wr = &w_ih.at(j, 0);
      double acc = b_ih[j];
      for (std::size_t f = 0; f < features; ++f) acc += wr[f] * x[f];
      gi[j] = acc;
      const double* ur = &w_hh.at(j, 0);
      double acc_h = b_hh[j];
      for (std::size_t k = 0; k < hidden; ++k) acc_h += ur[k] * h[k];
      gh[j] = acc_h;
    }
    const std::size_t off = t * hidden;
    std::copy(h.begin(), h.end(), cache->h_prev.begin() + static_cast<std::ptrdiff_t>(off));
    for (std::size_t k = 0; k < hidden; ++k) {
      const double r = sigmoid(gi[k] + gh[k]);
      const double z = sigmoid(gi[hidden + k] + gh[hidden + k]);
      const double hn = gh[2 * hidden + k];
      const double n = std::tanh(gi[2 * hidden + k] + r * hn);
      cache->r[off + k] = r;
      cache->z[off + k] = z;
      cache->n[off + k] = n;
      cache->hn[off + k] = hn;
      h[k] = (1.0 - z) * n + z * h[k];
      out.at(t, k) = h[k];
    }
  }

  const GruWeights wv = weights;
  const Var inputs[] = {sequence, weights.w_ih, weights.w_hh, weights.b_ih, weights.b_hh, h0};
  return tape.record(std::move(out), std::span<const Var>(inputs), [=](Tape& tp, std::span<const double> g) {
    const Tensor& xv = tp.value(sequence);
    const Tensor& wi = tp.value(wv.w_ih);
    const Tensor& wh = tp.value(wv.w_hh);
    const bool want_x = tp.needs_grad(sequence);
    const bool want_wi = tp.needs_grad(wv.w_ih);
    const bool want_wh = tp.needs_grad(wv.w_hh);
    const bool want_bi = tp.needs_grad(wv.b_ih);
    const bool want_bh = tp.needs_grad(wv.b_hh);
    const bool want_h0 = tp.needs_grad(h0);
    std::span<double> gx, gwi, gwh, gbi, gbh;
    if (want_x) gx = tp.grad_buffer(sequence);
    if (want_wi) gwi = tp.grad_buffer(wv.w_ih);
    if (want_wh) gwh = tp.grad_buffer(wv.w_hh);
    if (want_bi) gbi = tp.grad_buffer(wv.b_ih);
    if (want_bh) gbh = tp.grad_buffer(wv.b_hh);

    std::vector<double> dh(hidden, 0.0), dh_prev(hidden), dgi(h3), dgh(h3);
    for (std::size_t t = steps; t-- > 0;) {
      const std::size_t off = t * hidden;
      for (std::size_t k = 0; k < hidden; ++k) dh[k] += g[off + k];
      for (std::size_t k = 0; k < hidden; ++k) {
        const double r = cache->r[off + k], z = cache->z[off + k], n = cache->n[off + k];
        const double hp = cache->h_prev[off + k];
        const double dn = dh[k] * (1.0 - z);
        const double dz = dh[k] * (hp - n);
        const double dan = dn * (1.0 - n * n);
        const double dr = dan * cache->hn[off + k];
        const double dar = dr * r * (1.0 - r);
        const double daz = dz * z * (1.0 - z);
        dgi[k] = dar;
        dgh[k] = dar;
        dgi[hidden + k] = daz;
        dgh[hidden + k] = daz;
        dgi[2 * hidden + k] = dan;
        dgh[2 * hidden + k] = dan * r;
        dh_prev[k] = dh[k] * z;
      }
      const double* x = &xv.at(t, 0);
      const double* hp = &cache->h_prev[off];
      for (std::size_t j = 0; j < h3; ++j) {
        const double a = dgi[j];
        const double b = dgh[j];
        if (want_bi) gbi[j] += a;
        if (want_bh) gbh[j] += b;
        if (want_wi) {
          double* row = gwi.data() + j * features;
          for (std::size_t f = 0; f < features; ++f) row[f] += a * x[f];
        }
        if (want_x) {
          const double* row = &wi.at(j, 0);
          double* gxt = gx.data() + t * features;
          for (std::size_t f = 0; f < features; ++f) gxt[f] += a * row[f];
        }
        if (want_wh) {
          double* row = gwh.data() + j * hidden;
          for (std::size_t k = 0; k < hidden; ++k) row[k] += b * hp[k];
        }
        const double* urow = &wh.at(j, 0);
        for (std::size_t k = 0; k < hidden; ++k) dh_prev[k] += b * urow[k];
      }
      dh.swap(dh_prev);
    }
    if (want_h0) {
      auto gh0 = tp.grad_buffer(h0);
      for (std::size_t k = 0; k < hidden; ++k) gh0[k] += dh[k];
    }
  });
}

Var transpose(Tape& tape, Var x) {
  const Tensor& m = tape.value(x);
  expect_rank(m, 2, "transpose", "input");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor out({cols, rows});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out.at(j, i) = m.at(i, j);
  }
  return tape.record(std::move(out), {x}, [=](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[j * rows + i];
    }
  });
}

Var last_row(Tape& tape, Var x) {
  const Tensor& m = tape.value(x);
  expect_rank(m, 2, "last_row", "input");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  if (rows == 0) throw Error(ErrorKind::shape, "last_row: no rows");
  std::vector<double> v(m.data().begin() + static_cast<std::ptrdiff_t>((rows - 1) * cols), m.data().end());
  return tape.record(Tensor::vector(std::move(v)), {x}, [=](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    for (std::size_t k = 0; k < cols; ++k) gx[(rows - 1) * cols + k] += g[k];
  });
}

Var linear(Tape& tape, Var x, Var weight, Var bias) {
  const Tensor& xv = tape.value(x);
  const Tensor& w = tape.value(weight);
  const Tensor& b = tape.value(bias);
  expect_rank(w, 2, "linear", "weight");
  expect_rank(b, 1, "linear", "bias");
  if (xv.rank() != 1 && xv.rank() != 2) {
    throw Error(ErrorKind::shape, "linear: input must be a vector or a batch matrix, got " +
                                      shape_to_string(xv.shape()));
  }
  const bool batched = xv.rank() == 2;
  const std::size_t batch = batched ? xv.dim(0) : 1;
  const std::size_t f_in = batched ? xv.dim(1) : xv.dim(0);
  const std::size_t f_out = w.dim(0);
  if (w.dim(1) != f_in) mismatch("linear", "input", xv, "weight", w);
  if (b.dim(0) != f_out) mismatch("linear", "bias", b, "weight", w);

  Tensor out(batched ? Shape{batch, f_out} : Shape{f_out});
  for (std::size_t s = 0; s < batch; ++s) {
    const double* xr = xv.data().data() + s * f_in;
    for (std::size_t o = 0; o < f_out; ++o) {
      const double* wr = &w.at(o, 0);
      double acc = b[o];
      for (std::size_t i = 0; i < f_in; ++i) acc += wr[i] * xr[i];
      out[s * f_out + o] = acc;
    }
  }
  return tape.record(std::move(out), {x, weight, bias}, [=](Tape& tp, std::span<const double> g) {
    const Tensor& xin = tp.value(x);
    const Tensor& wt = tp.value(weight);
    std::span<double> gx, gw, gb;
    if (tp.needs_grad(x)) gx = tp.grad_buffer(x);
    if (tp.needs_grad(weight)) gw = tp.grad_buffer(weight);
    if (tp.needs_grad(bias)) gb = tp.grad_buffer(bias);
    for (std::size_t s = 0; s < batch; ++s) {
      const double* xr = xin.data().data() + s * f_in;
      for (std::size_t o = 0; o < f_out; ++o) {
        const double go = g[s * f_out + o];
        if (!gb.empty()) gb[o] += go;
        if (!gw.empty()) {
          for (std::size_t i = 0; i < f_in; ++i) gw[o * f_in + i] += go * xr[i];
        }
        if (!gx.empty()) {
          const double* wr = &wt.at(o, 0);
          for (std::size_t i = 0; i < f_in; ++i) gx[s * f_in + i] += go * wr[i];
        }
      }
    }
  });
}

Var l2_normalize(Tape& tape, Var v, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::value, "l2_normalize: eps must be positive");
  const Tensor& x = tape.value(v);
  expect_rank(x, 1, "l2_normalize", "input");
  double sq = 0.0;
  for (double a : x.data()) sq += a * a;
  const double norm = std::sqrt(sq);
  const bool clamped = norm < eps;
  const double denom = clamped ? eps : norm;
  Tensor out = x;
  out.clear_grad();
  for (auto& a : out.data()) a /= denom;
  auto y = std::make_shared<std::vector<double>>(out.values());
  return tape.record(std::move(out), {v}, [=](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(v);
    if (clamped) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / denom;
      return;
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * (*y)[i];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (g[i] - (*y)[i] * dot) / denom;
  });
}

Var stack_rows(Tape& tape, std::span<const Var> rows) {
  if (rows.empty()) throw Error(ErrorKind::shape, "stack_rows: no rows");
  const std::size_t d = tape.value(rows[0]).size();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  for (const auto& r : rows) {
    const Tensor& v = tape.value(r);
    if (v.rank() != 1 || v.size() != d) {
      throw Error(ErrorKind::shape, "stack_rows: row shape " + shape_to_string(v.shape()) +
                                        " differs from [" + std::to_string(d) + "]");
    }
    data.insert(data.end(), v.data().begin(), v.data().end());
  }
  std::vector<Var> ids(rows.begin(), rows.end());
  return tape.record(Tensor::matrix(rows.size(), d, std::move(data)), rows,
                     [ids, d](Tape& tp, std::span<const double> g) {
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         if (!tp.needs_grad(ids[i])) continue;
                         auto gr = tp.grad_buffer(ids[i]);
                         for (std::size_t k = 0; k < d; ++k) gr[k] += g[i * d + k];
                       }
                     });
}

Var matmul_nt(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  expect_rank(av, 2, "matmul_nt", "lhs");
  expect_rank(bv, 2, "matmul_nt", "rhs");
  const std::size_t m = av.dim(0), n = bv.dim(0), d = av.dim(1);
  if (bv.dim(1) != d) mismatch("matmul_nt", "lhs", av, "rhs", bv);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += av.at(i, k) * bv.at(j, k);
      out.at(i, j) = acc;
    }
  }
  return tape.record(std::move(out), {a, b}, [=](Tape& tp, std::span<const double> g) {
    const Tensor& al = tp.value(a);
    const Tensor& bl = tp.value(b);
    std::span<double> ga, gb;
    if (tp.needs_grad(a)) ga = tp.grad_buffer(a);
    if (tp.needs_grad(b)) gb = tp.grad_buffer(b);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = g[i * n + j];
        for (std::size_t k = 0; k < d; ++k) {
          if (!ga.empty()) ga[i * d + k] += gij * bl.at(j, k);
          if (!gb.empty()) gb[j * d + k] += gij * al.at(i, k);
        }
      }
    }
  });
}

Var sum(Tape& tape, Var x) {
  double s = 0.0;
  for (double v : tape.value(x).data()) s += v;
  return tape.record(Tensor::vector({s}), {x}, [x](Tape& tp, std::span<const double> g) {
    for (auto& v : tp.grad_buffer(x)) v += g[0];
  });
}

Var sum_squares(Tape& tape, Var x) {
  double s = 0.0;
  for (double v : tape.value(x).data()) s += v * v;
  return tape.record(Tensor::vector({s}), {x}, [x](Tape& tp, std::span<const double> g) {
    const Tensor& xv = tp.value(x);
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv[i] * g[0];
  });
}

Var weighted_sum(Tape& tape, Var x, const Tensor& weights) {
  const Tensor& xv = tape.value(x);
  if (xv.shape() != weights.shape()) mismatch("weighted_sum", "input", xv, "weights", weights);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  auto w = std::make_shared<std::vector<double>>(weights.values());
  return tape.record(Tensor::vector({s}), {x}, [x, w](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*w)[i] * g[0];
  });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.shape() != bv.shape()) mismatch("add", "lhs", av, "rhs", bv);
  Tensor out = av;
  out.clear_grad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& tp, std::span<const double> g) {
    for (const Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      auto gv = tp.grad_buffer(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
    }
  });
}

Var scale(Tape& tape, Var x, double factor) {
  Tensor out = tape.value(x);
  out.clear_grad();
  for (auto& v : out.data()) v *= factor;
  return tape.record(std::move(out), {x}, [x, factor](Tape& tp, std::span<const double> g) {
    auto gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
  });
}

Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::size_t> targets) {
  const Tensor& z = tape.value(logits);
  expect_rank(z, 2, "softmax_cross_entropy", "logits");
  const std::size_t batch = z.dim(0), classes = z.dim(1);
  if (targets.size() != batch) {
    throw Error(ErrorKind::shape, "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(batch) + " rows");
  }
  if (batch == 0 || classes == 0) throw Error(ErrorKind::shape, "softmax_cross_entropy: empty logits");
  auto probs = std::make_shared<std::vector<double>>(z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    if (targets[i] >= classes) {
      throw Error(ErrorKind::value, "softmax_cross_entropy: target " + std::to_string(targets[i]) +
                                        " out of range for " + std::to_string(classes) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, z.at(i, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z.at(i, c) - mx);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[i * classes + c] = std::exp(z.at(i, c) - mx) / denom;
    loss -= (z.at(i, targets[i]) - mx) - std::log(denom);
  }
  loss /= static_cast<double>(batch);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return tape.record(Tensor::vector({loss}), {logits}, [=](Tape& tp, std::span<const double> g) {
    auto gz = tp.grad_buffer(logits);
    const double s = g[0] / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = c == tgt[i] ? 1.0 : 0.0;
        gz[i * classes + c] += s * ((*probs)[i * classes + c] - onehot);
      }
    }
  });
}

}  // namespace imu_align::ops

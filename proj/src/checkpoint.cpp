#include <array>
#include <cstring>

#include "imu_align/binary_io.hpp"
#include "imu_align/error.hpp"
#include "imu_align/file_lock.hpp"
#include "imu_align/train.hpp"

namespace imu_align {

namespace {

constexpr std::array<char, 8> kMagic{'I', 'M', 'U', 'C', 'K', 'P', 'T', '\0'};

void write_sizes(BinaryWriter& w, const std::vector<std::size_t>& v) {
  w.u64(v.size());
  for (auto x : v) w.u64(x);
}

std::vector<std::size_t> read_sizes(BinaryReader& r) {
  const auto n = r.u64();
  if (n > 1024) throw Error(ErrorKind::parse, "checkpoint: implausible list length " + std::to_string(n));
  std::vector<std::size_t> v(n);
  for (auto& x : v) x = r.u64();
  return v;
}

std::uint8_t mode_code(TrainMode m) { return static_cast<std::uint8_t>(m); }

TrainMode mode_from_code(std::uint8_t c) {
  if (c > static_cast<std::uint8_t>(TrainMode::ivt)) {
    throw Error(ErrorKind::parse, "checkpoint: unknown training mode code " + std::to_string(c));
  }
  return static_cast<TrainMode>(c);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u8(kCheckpointVersion);

  const auto& e = ckpt.encoder;
  w.u64(e.n_conv_layers);
  write_sizes(w, e.conv_channels);
  write_sizes(w, e.conv_kernels);
  write_sizes(w, e.conv_strides);
  w.u64(e.pool_kernel);
  w.u64(e.gru_hidden);
  w.u64(e.embed_dim);
  w.f64(e.groupnorm_eps);

  const auto& t = ckpt.train;
  w.u64(t.batch_size);
  w.f64(t.learning_rate);
  w.f64(t.adagrad_eps);
  w.f64(t.decay);
  w.u64(t.epochs);
  w.u64(t.seed);
  w.u8(mode_code(t.mode));
  w.f64(t.temperature);

  w.u64(ckpt.step);
  w.u64(ckpt.epochs);

  const auto tensors = ckpt.params.tensors();
  const auto names = ckpt.params.names();
  w.u64(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    w.str(names[i]);
    w.tensor(*tensors[i]);
  }
  w.u64(ckpt.optimizer.step);
  w.u64(ckpt.optimizer.accumulators.size());
  for (const auto& a : ckpt.optimizer.accumulators) w.tensor(a);

  FileLock lock(path);
  auto tmp = path;
  tmp += ".tmp";
  w.save(tmp);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw Error(ErrorKind::parse, path.string() + ": not a checkpoint file");
  const auto version = r.u8();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::version, path.string() + ": checkpoint version " + std::to_string(version) +
                                        ", expected " + std::to_string(kCheckpointVersion));
  }

  Checkpoint ck;
  auto& e = ck.encoder;
  e.n_conv_layers = r.u64();
  e.conv_channels = read_sizes(r);
  e.conv_kernels = read_sizes(r);
  e.conv_strides = read_sizes(r);
  e.pool_kernel = r.u64();
  e.gru_hidden = r.u64();
  e.embed_dim = r.u64();
  e.groupnorm_eps = r.f64();
  e.validate();

  auto& t = ck.train;
  t.batch_size = r.u64();
  t.learning_rate = r.f64();
  t.adagrad_eps = r.f64();
  t.decay = r.f64();
  t.epochs = r.u64();
  t.seed = r.u64();
  t.mode = mode_from_code(r.u8());
  t.temperature = r.f64();

  ck.step = r.u64();
  ck.epochs = r.u64();

  // Shapes come from the config; the stored tensors must match them exactly.
  ck.params = init_params(e, 0);
  const auto slots = ck.params.tensors();
  const auto names = ck.params.names();
  const auto n = r.u64();
  if (n != slots.size()) {
    throw Error(ErrorKind::parse, path.string() + ": " + std::to_string(n) + " parameter tensors, config needs " +
                                      std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto name = r.str();
    Tensor value = r.tensor();
    if (name != names[i] || value.shape() != slots[i]->shape()) {
      throw Error(ErrorKind::parse, path.string() + ": parameter " + name + " " + shape_to_string(value.shape()) +
                                        " does not match " + names[i] + " " + shape_to_string(slots[i]->shape()));
    }
    *slots[i] = std::move(value);
  }
  ck.optimizer.step = r.u64();
  const auto n_acc = r.u64();
  if (n_acc != 0 && n_acc != slots.size()) {
    throw Error(ErrorKind::parse, path.string() + ": " + std::to_string(n_acc) + " optimizer accumulators for " +
                                      std::to_string(slots.size()) + " parameters");
  }
  for (std::size_t i = 0; i < n_acc; ++i) {
    Tensor acc = r.tensor();
    if (acc.shape() != slots[i]->shape()) {
      throw Error(ErrorKind::parse, path.string() + ": accumulator " + std::to_string(i) + " has shape " +
                                        shape_to_string(acc.shape()));
    }
    ck.optimizer.accumulators.push_back(std::move(acc));
  }
  r.expect_end();
  return ck;
}

}  // namespace imu_align

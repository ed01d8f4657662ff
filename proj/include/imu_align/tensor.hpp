#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace imu_align {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 array with an optional gradient buffer of the same shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<double> grad();
  std::span<const double> grad() const noexcept { return grad_; }
  void zero_grad();
  void clear_grad() noexcept { grad_.clear(); }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

/// Handle to a value recorded on a Tape. Only meaningful for the tape that issued it.
struct Var {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

class Tape;

/// Backward rule: receives the tape and the gradient flowing into the node's output.
using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

/// Records primitive operations in execution order so a reverse sweep can
/// propagate gradients. Parameter leaves are bound to external tensors whose
/// grad buffers receive the accumulated result.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Leaf that never receives gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is readable through grad() after backward().
  Var input(Tensor value);
  /// Leaf bound to `param`; backward() adds d(loss)/d(param) into param.grad().
  Var parameter(Tensor& param);

  /// Appends an operation. `fn` runs during backward only when some input needs grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;
  /// Gradient buffer of a node from the last backward() call.
  std::span<const double> grad(Var v) const;
  /// Mutable gradient buffer, used by backward rules to accumulate into inputs.
  std::span<double> grad_buffer(Var v);

  /// Reverse sweep from a scalar loss. Node gradients are reset on every call;
  /// bound parameter gradients accumulate across calls.
  void backward(Var loss);

  bool owns(Var v) const noexcept;
  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t id() const noexcept { return id_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

}  // namespace imu_align

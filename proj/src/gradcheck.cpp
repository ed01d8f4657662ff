#include "imu_align/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "imu_align/error.hpp"

namespace imu_align {

namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& points) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(points.size());
  for (const auto& p : points) vars.push_back(tape.constant(p));
  const Tensor& out = tape.value(f(tape, vars));
  if (out.size() != 1) {
    throw Error(ErrorKind::shape, "finite_difference_check: function is not scalar-valued, shape " +
                                      shape_to_string(out.shape()));
  }
  if (!std::isfinite(out[0])) throw Error(ErrorKind::numeric, "finite_difference_check: non-finite value");
  return out[0];
}

}  // namespace

double finite_difference_check(const ScalarFn& f, const Tensor& point, double h) {
  return finite_difference_check(
      MultiScalarFn([&f](Tape& tape, std::span<const Var> vars) { return f(tape, vars[0]); }),
      std::vector<Tensor>{point}, h);
}

double finite_difference_check(const MultiScalarFn& f, const std::vector<Tensor>& points, double h) {
  if (!(h > 0.0)) throw Error(ErrorKind::value, "finite_difference_check: h must be positive");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : points) vars.push_back(tape.input(p));
    const Var loss = f(tape, vars);
    if (!std::isfinite(tape.value(loss)[0])) {
      throw Error(ErrorKind::numeric, "finite_difference_check: non-finite value at the base point");
    }
    tape.backward(loss);
    for (const auto& v : vars) {
      auto g = tape.grad(v);
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(tape.value(v).size(), 0.0);
    }
  }

  double worst = 0.0;
  std::vector<Tensor> probe = points;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    for (std::size_t i = 0; i < probe[p].size(); ++i) {
      const double orig = probe[p][i];
      probe[p][i] = orig + h;
      const double up = evaluate(f, probe);
      probe[p][i] = orig - h;
      const double down = evaluate(f, probe);
      probe[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      if (!std::isfinite(a)) throw Error(ErrorKind::numeric, "finite_difference_check: non-finite gradient");
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace imu_align

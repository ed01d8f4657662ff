#pragma once

#include <functional>
#include <span>
#include <vector>

#include "imu_align/tensor.hpp"

namespace imu_align {

/// Scalar-valued function of one recorded input.
using ScalarFn = std::function<Var(Tape&, Var)>;
/// Scalar-valued function of several recorded inputs, in the order they were supplied.
using MultiScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares tape gradients against central differences with step h.
/// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
/// Throws Error(numeric) if any evaluation is non-finite.
double finite_difference_check(const ScalarFn& f, const Tensor& point, double h);
double finite_difference_check(const MultiScalarFn& f, const std::vector<Tensor>& points, double h);

}  // namespace imu_align

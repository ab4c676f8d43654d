#pragma once

#include "magic/autodiff.hpp"

#include <Eigen/Core>

#include <functional>
#include <span>
#include <vector>

namespace magic {

/// A scalar function together with its analytic gradient.
struct ScalarFunction {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
};

/// max_i |analytic_i - central_difference_i| / max(1, |analytic_i|).
/// Throws NumericError if any evaluation is non-finite.
double gradcheck(const ScalarFunction& f, const Eigen::VectorXd& point, double step = 1e-5);

/// Builds a scalar output on a fresh double-precision tape from the given inputs
/// (recorded as variables, in order).
using TapeFunction =
    std::function<Var<double>(Tape<double>&, std::span<const Var<double>> inputs)>;

/// Wraps a tape-built function as a ScalarFunction over the concatenation of all inputs.
ScalarFunction tape_function(TapeFunction build, std::vector<Shape4> input_shapes);

/// Flattens tensors into a single point vector in order.
Eigen::VectorXd flatten(std::span<const Tensor4<double>> inputs);

/// Convenience: gradcheck(tape_function(build, shapes), flatten(inputs), step).
double gradcheck_tape(const TapeFunction& build, const std::vector<Tensor4<double>>& inputs,
                      double step = 1e-5);

}  // namespace magic

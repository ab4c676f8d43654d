#include "magic/gradcheck.hpp"

#include "magic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace magic {

double gradcheck(const ScalarFunction& f, const Eigen::VectorXd& point, double step) {
  if (!(step > 0)) throw ConfigError("gradcheck: step must be positive");
  const Eigen::VectorXd analytic = f.gradient(point);
  if (analytic.size() != point.size()) {
    throw ConfigError("gradcheck: gradient size does not match point size");
  }
  if (!analytic.allFinite()) throw NumericError("gradcheck: non-finite analytic gradient");
  double worst = 0;
  Eigen::VectorXd probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = f.value(probe);
    probe[i] = point[i] - step;
    const double down = f.value(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("gradcheck: non-finite evaluation at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

namespace {

std::vector<Tensor4<double>> unflatten(const Eigen::VectorXd& point, const std::vector<Shape4>& shapes) {
  std::vector<Tensor4<double>> out;
  Index at = 0;
  for (const auto& s : shapes) {
    Tensor4<double> t(s);
    t.array() = point.segment(at, s.size()).array();
    at += s.size();
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

ScalarFunction tape_function(TapeFunction build, std::vector<Shape4> input_shapes) {
  auto evaluate = [build, input_shapes](const Eigen::VectorXd& point, bool with_grad) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : unflatten(point, input_shapes)) vars.push_back(tape.variable(std::move(t)));
    const Var<double> out = build(tape, vars);
    Eigen::VectorXd grad;
    if (with_grad) {
      tape.backward(out);
      grad.resize(point.size());
      Index at = 0;
      for (const auto& v : vars) {
        const auto& g = v.grad();
        grad.segment(at, g.size()) = g.array().matrix();
        at += g.size();
      }
    }
    return std::make_pair(out.item(), grad);
  };
  return ScalarFunction{
      [evaluate](const Eigen::VectorXd& p) { return evaluate(p, false).first; },
      [evaluate](const Eigen::VectorXd& p) { return evaluate(p, true).second; }};
}

Eigen::VectorXd flatten(std::span<const Tensor4<double>> inputs) {
  Index total = 0;
  for (const auto& t : inputs) total += t.size();
  Eigen::VectorXd out(total);
  Index at = 0;
  for (const auto& t : inputs) {
    out.segment(at, t.size()) = t.array().matrix();
    at += t.size();
  }
  return out;
}

double gradcheck_tape(const TapeFunction& build, const std::vector<Tensor4<double>>& inputs,
                      double step) {
  std::vector<Shape4> shapes;
  for (const auto& t : inputs) shapes.push_back(t.shape());
  return gradcheck(tape_function(build, shapes), flatten(inputs), step);
}

}  // namespace magic

#include "drmkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "drmkit/error.hpp"

namespace drmkit::ad {
namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var out = f(tape, tape.constant(x));
  if (out.value().size() != 1) throw ShapeError("grad_check: function must be scalar, got " + shape_str(out.shape()));
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

double evaluate(const ParamLossFn& f, const ParamSet& params) {
  Tape tape;
  ParamBinder bind(tape, params, false);
  const double v = f(bind).value()[0];
  if (!std::isfinite(v)) throw NumericError("param_grad_check: non-finite loss");
  return v;
}

// Rounding resolution of a central difference: a few ulps of the function
// values, divided by the 2h baseline. Entries whose analytic and numeric
// values both sit below it (e.g. exact zeros from cancellation) agree.
double difference_noise(double up, double down, double step) {
  return 32.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(up), std::abs(down), 1.0}) / (2.0 * step);
}

double relative_error(double analytic, double numeric, double noise) {
  if (!std::isfinite(analytic)) throw NumericError("grad_check: non-finite analytic gradient");
  if (std::abs(analytic) <= noise && std::abs(numeric) <= noise) return 0.0;
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

void check_step(double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw ConfigError("grad_check: step must lie in [1e-7, 1e-3]");
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& point, double step) {
  check_step(step);
  Tape tape;
  Var x = tape.variable(point);
  Var out = f(tape, x);
  if (out.value().size() != 1) throw ShapeError("grad_check: function must be scalar, got " + shape_str(out.shape()));
  if (!std::isfinite(out.value()[0])) throw NumericError("grad_check: non-finite function value");
  tape.backward(out);
  const Tensor analytic = tape.grad(x);

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = evaluate(f, probe);
    probe[i] = orig - step;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, relative_error(analytic[i], numeric, difference_noise(up, down, step)));
  }
  return worst;
}

double param_grad_check(const ParamLossFn& f, const ParamSet& params, RngStream& rng, std::size_t coords,
                        double step) {
  check_step(step);
  Tape tape;
  ParamBinder bind(tape, params, true);
  Var out = f(bind);
  if (out.value().size() != 1) throw ShapeError("param_grad_check: loss must be scalar, got " + shape_str(out.shape()));
  tape.backward(out);
  const GradMap analytic = tape.param_grads(params);

  ParamSet probe = params;
  double worst = 0.0;
  for (const auto& [name, grad] : analytic) {
    Tensor& value = probe.value(name);
    std::vector<std::size_t> picks;
    if (value.size() <= coords) {
      for (std::size_t i = 0; i < value.size(); ++i) picks.push_back(i);
    } else {
      for (std::size_t k = 0; k < coords; ++k) picks.push_back(rng.below(value.size()));
    }
    for (std::size_t i : picks) {
      const double orig = value[i];
      value[i] = orig + step;
      const double up = evaluate(f, probe);
      value[i] = orig - step;
      const double down = evaluate(f, probe);
      value[i] = orig;
      worst = std::max(worst, relative_error(grad[i], (up - down) / (2.0 * step), difference_noise(up, down, step)));
    }
  }
  return worst;
}

}  // namespace drmkit::ad

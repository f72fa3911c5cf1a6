#pragma once

#include <functional>

#include "drmkit/params.hpp"
#include "drmkit/rng.hpp"
#include "drmkit/tape.hpp"

namespace drmkit::ad {

// A scalar-valued function of one tensor, expressed as tape operations.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Worst relative error between the tape gradient of `f` at `point` and a
// central difference with the given step, per coordinate, using the
// denominator max(|analytic|, |numeric|, 1e-8). Entries where both values
// are below the difference's rounding resolution, 32 eps max(|f+|, |f-|, 1) / 2h,
// count as agreeing: a zero gradient cannot be resolved more finely.
double grad_check(const ScalarFn& f, const Tensor& point, double step = 1e-5);

// Same check for a loss over named parameters: compares Tape::param_grads
// with central differences at up to `coords` randomly chosen entries of
// every parameter (all entries when the parameter is smaller).
using ParamLossFn = std::function<Var(ParamBinder&)>;
double param_grad_check(const ParamLossFn& f, const ParamSet& params, RngStream& rng, std::size_t coords = 8,
                        double step = 1e-5);

}  // namespace drmkit::ad

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "drmkit/error.hpp"
#include "drmkit/flowmatch.hpp"

namespace drmkit::fm {
namespace {

// Upper clamp for the SDE coefficients is one step below t = 1, where
// sigma_t diverges; the lower clamp is kTimeClamp.
double coefficient_time(double t, double s) {
  return std::clamp(t, kTimeClamp, 1.0 - std::max(kTimeClamp, s));
}

double sde_sigma(double t, double s, double a) {
  const double tc = coefficient_time(t, s);
  return a * std::sqrt(tc / (1.0 - tc));
}

void check_step(double t, double s) {
  if (!(s > 0.0)) throw ConfigError("step size must be positive");
  if (t - s < -1e-12) throw ConfigError("step from t=" + std::to_string(t) + " by s=" + std::to_string(s) + " passes 0");
}

void check_drift(const Tensor& mean, const Tensor& x, double t) {
  if (mean.all_finite()) return;
  std::ostringstream os;
  os << "non-finite SDE drift at t=" << t << ", state row 0 = [";
  for (std::size_t j = 0; j < std::min<std::size_t>(x.shape().back(), 4); ++j) os << (j ? ", " : "") << x[j];
  os << (x.shape().back() > 4 ? ", ...]" : "]");
  throw NumericError(os.str());
}

ad::Var ode_mean(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, double t, double s,
                 std::span<const int> conditions) {
  const std::vector<double> ts(x.shape().at(0), t);
  ad::Var v = velocity_forward(bind, cfg, x, ts, conditions);
  return ad::sub(x, ad::scale(v, s));
}

}  // namespace

double sigma_t(double a, double t) {
  const double tc = std::clamp(t, kTimeClamp, 1.0 - kTimeClamp);
  return a * std::sqrt(tc / (1.0 - tc));
}

bool is_final_step(double t, double s) { return t - s <= kTimeClamp; }

double sde_std(double t, double s, double a) {
  if (is_final_step(t, s)) return 0.0;
  return sde_sigma(t, s, a) * std::sqrt(s);
}

Tensor ode_step(const VelocityModel& model, const Tensor& x, double t, double s, std::span<const int> conditions) {
  check_step(t, s);
  ad::Tape tape;
  ad::ParamBinder bind(tape, model.params, false);
  return ode_mean(bind, model.cfg, tape.constant(x), t, s, conditions).value();
}

ad::Var sde_mean(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, double t, double s, double a,
                 std::span<const int> conditions) {
  if (is_final_step(t, s)) return ode_mean(bind, cfg, x, t, s, conditions);
  const double sigma = sde_sigma(t, s, a);
  if (sigma == 0.0) return ode_mean(bind, cfg, x, t, s, conditions);
  const double tc = coefficient_time(t, s);
  const double coef = sigma * sigma / (2.0 * tc);
  const std::vector<double> ts(x.shape().at(0), t);
  ad::Var v = velocity_forward(bind, cfg, x, ts, conditions);
  // v + coef * (x + (1 - t) v)
  ad::Var drift = ad::add(ad::scale(v, 1.0 + coef * (1.0 - tc)), ad::scale(x, coef));
  return ad::sub(x, ad::scale(drift, s));
}

std::pair<Tensor, double> sde_transition(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                                         std::span<const int> conditions) {
  check_step(t, s);
  if (a < 0.0) throw ConfigError("SDE noise scale a must be non-negative");
  ad::Tape tape;
  ad::ParamBinder bind(tape, model.params, false);
  Tensor mean = sde_mean(bind, model.cfg, tape.constant(x), t, s, a, conditions).value();
  check_drift(mean, x, t);
  return {std::move(mean), sde_std(t, s, a)};
}

SdeStep sde_step(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                 std::span<const int> conditions, const Tensor& eps) {
  auto [mean, std] = sde_transition(model, x, t, s, a, conditions);
  if (std == 0.0) return {mean, mean, 0.0};
  if (eps.shape() != x.shape()) {
    throw ShapeError("sde_step: noise " + shape_str(eps.shape()) + " vs state " + shape_str(x.shape()));
  }
  Tensor next(mean.shape());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = mean[i] + std * eps[i];
  return {std::move(next), std::move(mean), std};
}

SdeStep sde_step(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                 std::span<const int> conditions, RngStream& rng) {
  auto [mean, std] = sde_transition(model, x, t, s, a, conditions);
  if (std == 0.0) return {mean, mean, 0.0};
  Tensor next(mean.shape());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = mean[i] + std * rng.normal();
  return {std::move(next), std::move(mean), std};
}

double transition_logprob(std::span<const double> x_next, std::span<const double> mean, double std) {
  if (!(std > 0.0)) throw ConfigError("transition_logprob: std must be positive (deterministic steps have no density)");
  if (x_next.size() != mean.size()) throw ShapeError("transition_logprob: state and mean sizes differ");
  const double d = static_cast<double>(x_next.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < x_next.size(); ++i) sq += (x_next[i] - mean[i]) * (x_next[i] - mean[i]);
  return -0.5 * d * std::log(2.0 * std::numbers::pi) - d * std::log(std) - sq / (2.0 * std * std);
}

std::vector<double> transition_logprob_rows(const Tensor& x_next, const Tensor& mean, double std) {
  if (x_next.shape() != mean.shape() || x_next.rank() != 2) {
    throw ShapeError("transition_logprob_rows: " + shape_str(x_next.shape()) + " vs " + shape_str(mean.shape()));
  }
  const std::size_t m = x_next.shape()[0], d = x_next.shape()[1];
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    out[i] = transition_logprob(x_next.data().subspan(i * d, d), mean.data().subspan(i * d, d), std);
  }
  return out;
}

std::vector<double> time_grid(std::size_t steps) {
  if (steps < 2) throw ConfigError("trajectories need at least 2 steps");
  std::vector<double> grid(steps);
  for (std::size_t j = 0; j < steps; ++j) grid[j] = static_cast<double>(steps - j) / static_cast<double>(steps);
  return grid;
}

namespace {

template <typename FillNoise>
Trajectory rollout(const VelocityModel& model, std::span<const int> conditions, std::size_t steps, double a,
                   FillNoise fill) {
  const std::size_t m = conditions.size();
  const std::size_t d = model.cfg.state_dim;
  const auto grid = time_grid(steps);
  const double s = 1.0 / static_cast<double>(steps);
  Trajectory traj;
  traj.conditions.assign(conditions.begin(), conditions.end());
  Tensor x({m, d});
  fill(x);
  for (double t : grid) {
    auto [mean, std] = sde_transition(model, x, t, s, a, conditions);
    Tensor next = mean;
    if (std > 0.0) {
      Tensor eps({m, d});
      fill(eps);
      for (std::size_t i = 0; i < next.size(); ++i) next[i] += std * eps[i];
    }
    traj.steps.push_back(TrajectoryStep{t, x, std::move(mean), std, next});
    x = std::move(next);
  }
  traj.terminal = std::move(x);
  return traj;
}

}  // namespace

Trajectory sample_trajectory(const VelocityModel& model, int condition, std::size_t steps, double a, RngStream& rng) {
  const int conds[] = {condition};
  return rollout(model, conds, steps, a, [&rng](Tensor& out) {
    for (auto& v : out.data()) v = rng.normal();
  });
}

Trajectory sample_trajectories(const VelocityModel& model, std::span<const int> conditions, std::size_t steps,
                               double a, const RngStream& rng) {
  std::vector<RngStream> rows;
  rows.reserve(conditions.size());
  for (std::size_t i = 0; i < conditions.size(); ++i) rows.push_back(rng.split(i));
  const std::size_t d = model.cfg.state_dim;
  return rollout(model, conditions, steps, a, [&rows, d](Tensor& out) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) out.at(i, j) = rows[i].normal();
    }
  });
}

}  // namespace drmkit::fm

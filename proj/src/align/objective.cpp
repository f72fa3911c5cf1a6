#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "drmkit/align.hpp"
#include "drmkit/error.hpp"

namespace drmkit::align {
namespace {

constexpr double kDegenerateStd = 1e-8;

std::vector<double> normalise(std::span<const double> rewards, const char* what) {
  if (rewards.size() < 2) throw ConfigError(std::string(what) + " needs at least 2 rewards");
  for (double r : rewards) {
    if (!std::isfinite(r)) throw NumericError(std::string(what) + ": non-finite reward");
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < kDegenerateStd) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

}  // namespace

std::vector<double> group_advantage(std::span<const double> rewards) { return normalise(rewards, "group_advantage"); }

std::vector<double> step_advantage(std::span<const double> rewards) { return normalise(rewards, "step_advantage"); }

double clipped_objective(double ratio, double advantage, double eps_clip) {
  if (!(eps_clip > 0.0)) throw ConfigError("eps_clip must be positive");
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantage);
}

double gaussian_kl(std::span<const double> mean_theta, std::span<const double> mean_ref, double std) {
  if (!(std > 0.0)) throw ConfigError("gaussian_kl: std must be positive");
  if (mean_theta.size() != mean_ref.size()) throw ShapeError("gaussian_kl: mean sizes differ");
  double sq = 0.0;
  for (std::size_t i = 0; i < mean_theta.size(); ++i) sq += (mean_theta[i] - mean_ref[i]) * (mean_theta[i] - mean_ref[i]);
  return sq / (2.0 * std * std);
}

void GrpoConfig::validate() const {
  if (algo == Algo::kGrpo && G < 2) throw ConfigError("align.G must be >= 2");
  if (algo == Algo::kStepGrpo && k < 2) throw ConfigError("align.k must be >= 2");
  if (algo == Algo::kStepGrpo && !(a > 0.0)) throw ConfigError("step-grpo needs SDE noise: align.a must be > 0");
  if (!(eps_clip > 0.0)) throw ConfigError("align.eps_clip must be positive");
  if (!(beta >= 0.0)) throw ConfigError("align.beta must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("align.lr must be positive");
  if (!(a >= 0.0)) throw ConfigError("align.a must be non-negative");
  if (T < 2) throw ConfigError("align.T must be >= 2");
}

namespace {

// Squared distance of each row of `next` to its parent's mean: [n, 1].
ad::Var row_sq(ad::Tape& tape, const Tensor& next, ad::Var mean, std::span<const std::size_t> parent_of) {
  ad::Var diff = ad::sub(tape.constant(next), ad::gather_rows(mean, parent_of));
  return ad::row_sum(ad::mul(diff, diff));
}

}  // namespace

ObjectiveTerms policy_objective(ad::ParamBinder& theta, ad::ParamBinder& ref, const fm::TrunkConfig& cfg,
                                std::span<const TransitionBatch> batches, const GrpoConfig& grpo) {
  if (batches.empty()) throw ConfigError("policy objective needs at least one stochastic transition");
  ad::Tape& tape = theta.tape();
  ObjectiveTerms out;
  std::size_t rows = 0;
  ad::Var total;
  bool first = true;
  for (const auto& b : batches) {
    if (!(b.std > 0.0)) throw ConfigError("deterministic transitions carry no policy ratio");
    const double inv = 1.0 / (2.0 * b.std * b.std);
    ad::Var x = tape.constant(b.parents);
    ad::Var mean = fm::sde_mean(theta, cfg, x, b.t, b.s, grpo.a, b.conditions);
    ad::Var mean_ref = fm::sde_mean(ref, cfg, x, b.t, b.s, grpo.a, b.conditions);
    // The old log-density goes through the same operations as the new one,
    // so the ratio is exactly 1 when the means agree bitwise.
    ad::Var sq_new = row_sq(tape, b.next, mean, b.parent_of);
    ad::Var sq_old = row_sq(tape, b.next, tape.constant(b.old_mean), b.parent_of);
    ad::Var ratio = ad::exp(ad::scale(ad::sub(sq_old, sq_new), inv));
    ad::Var surrogate = ad::clipped_surrogate(ratio, b.advantages, grpo.eps_clip);
    ad::Var dm = ad::sub(mean, mean_ref);
    ad::Var kl = ad::gather_rows(ad::scale(ad::row_sum(ad::mul(dm, dm)), inv), b.parent_of);
    ad::Var term = ad::mean(ad::sub(surrogate, ad::scale(kl, grpo.beta)));
    total = first ? term : ad::add(total, term);
    first = false;

    for (double r : ratio.value().data()) out.mean_ratio += r;
    for (double v : kl.value().data()) out.mean_kl += v;
    rows += b.next.shape()[0];
  }
  out.objective = ad::scale(total, 1.0 / static_cast<double>(batches.size()));
  out.mean_ratio /= static_cast<double>(rows);
  out.mean_kl /= static_cast<double>(rows);
  return out;
}

std::vector<double> prob_ratios(const fm::VelocityModel& theta, const fm::TrajectoryStep& step, double s, double a,
                                std::span<const int> conditions) {
  if (!(step.std > 0.0)) throw ConfigError("prob_ratio: deterministic steps (std = 0) have no ratio");
  ad::Tape tape;
  ad::ParamBinder bind(tape, theta.params, false);
  ad::Var mean = fm::sde_mean(bind, theta.cfg, tape.constant(step.x), step.t, s, a, conditions);
  std::vector<std::size_t> identity(step.x.shape()[0]);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  ad::Var sq_new = row_sq(tape, step.next_x, mean, identity);
  ad::Var sq_old = row_sq(tape, step.next_x, tape.constant(step.mean), identity);
  const double inv = 1.0 / (2.0 * step.std * step.std);
  return ad::exp(ad::scale(ad::sub(sq_old, sq_new), inv)).value().values();
}

}  // namespace drmkit::align

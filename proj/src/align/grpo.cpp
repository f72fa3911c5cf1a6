#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "drmkit/align.hpp"
#include "drmkit/error.hpp"

namespace drmkit::align {
namespace {

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// One Adam step on -objective; fills the optimisation metrics.
void ascend(fm::VelocityModel& theta, const ParamSet& ref, std::span<const TransitionBatch> batches,
            const GrpoConfig& cfg, const AdamConfig& adam, IterationMetrics& metrics) {
  ad::Tape tape;
  ad::ParamBinder bind(tape, theta.params, true);
  ad::ParamBinder ref_bind(tape, ref, false);
  ObjectiveTerms terms = policy_objective(bind, ref_bind, theta.cfg, batches, cfg);
  const double objective = terms.objective.value()[0];
  if (!std::isfinite(objective)) throw NumericError("policy objective is not finite");
  ad::Var loss = ad::scale(terms.objective, -1.0);
  tape.backward(loss);
  const GradMap grads = tape.param_grads(theta.params);
  metrics.objective = objective;
  metrics.mean_kl = terms.mean_kl;
  metrics.mean_ratio = terms.mean_ratio;
  metrics.grad_norm = grad_norm(grads);
  adam_step(theta.params, grads, adam);
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

IterationMetrics grpo_iteration(fm::VelocityModel& theta, const ParamSet& ref, const TerminalReward& reward,
                                std::span<const int> conditions, const GrpoConfig& cfg, AdamConfig adam,
                                const RngStream& rng) {
  cfg.validate();
  if (conditions.empty()) throw ConfigError("grpo_iteration needs at least one group");
  adam.lr = cfg.lr;
  const std::size_t rows = conditions.size() * cfg.G;
  std::vector<int> row_cond(rows);
  for (std::size_t i = 0; i < rows; ++i) row_cond[i] = conditions[i / cfg.G];

  // theta is the iteration's theta_old until the update below.
  const fm::Trajectory traj = fm::sample_trajectories(theta, row_cond, cfg.T, cfg.a, rng.split(0));
  const std::vector<double> rewards = reward(traj.terminal, row_cond);
  if (rewards.size() != rows) throw ShapeError("terminal reward returned the wrong number of values");

  IterationMetrics metrics;
  metrics.mean_rollout_reward = mean_of(rewards);
  std::vector<double> adv(rows);
  for (std::size_t g = 0; g < conditions.size(); ++g) {
    auto a = group_advantage(std::span<const double>(rewards).subspan(g * cfg.G, cfg.G));
    std::copy(a.begin(), a.end(), adv.begin() + static_cast<std::ptrdiff_t>(g * cfg.G));
    metrics.advantages.push_back(std::move(a));
  }

  // The group advantage applies uniformly to every stochastic step.
  const double s = 1.0 / static_cast<double>(cfg.T);
  std::vector<TransitionBatch> batches;
  for (const auto& step : traj.steps) {
    if (step.std == 0.0) continue;
    batches.push_back({step.t, s, step.x, row_cond, step.mean, step.std, step.next_x, iota_rows(rows), adv});
  }
  ascend(theta, ref, batches, cfg, adam, metrics);
  return metrics;
}

StepCandidateSet branch_candidates(const fm::VelocityModel& theta_old, const Tensor& parent, double t, double s,
                                   int condition, const GrpoConfig& cfg, const StepReward& reward, RngStream& rng) {
  if (cfg.k < 2) throw ConfigError("branching needs k >= 2");
  if (!(cfg.a > 0.0)) throw ConfigError("branching needs SDE noise (a > 0); with a = 0 all candidates coincide");
  if (parent.rank() != 2 || parent.shape()[0] != 1) throw ShapeError("branch_candidates: parent must be [1, d]");
  const int cond[] = {condition};
  auto [mean, std] = fm::sde_transition(theta_old, parent, t, s, cfg.a, cond);
  if (!(std > 0.0)) throw ConfigError("branching at a deterministic step");
  const std::size_t d = parent.shape()[1];
  StepCandidateSet set{t, parent, mean, std, Tensor({cfg.k, d}), {}, {}};
  for (std::size_t i = 0; i < cfg.k; ++i) {
    for (std::size_t j = 0; j < d; ++j) set.candidates.at(i, j) = mean[j] + std * rng.normal();
  }
  const std::vector<int> conds(cfg.k, condition);
  set.rewards = reward(set.candidates, t - s, conds);
  if (set.rewards.size() != cfg.k) throw ShapeError("step reward returned the wrong number of values");
  set.advantages = step_advantage(set.rewards);
  return set;
}

IterationMetrics step_grpo_iteration(fm::VelocityModel& theta, const ParamSet& ref, const StepReward& reward,
                                     std::span<const int> conditions, const GrpoConfig& cfg, AdamConfig adam,
                                     const RngStream& rng) {
  cfg.validate();
  if (conditions.empty()) throw ConfigError("step_grpo_iteration needs at least one chain");
  adam.lr = cfg.lr;
  const std::size_t d = theta.cfg.state_dim;
  const double s = 1.0 / static_cast<double>(cfg.T);
  const auto grid = fm::time_grid(cfg.T);
  const std::vector<std::size_t> to_parent(cfg.k, 0);

  IterationMetrics metrics;
  std::vector<TransitionBatch> batches;
  std::vector<double> all_rewards;
  Tensor terminal({conditions.size(), d});
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    const int c = conditions[ci];
    const int cond[] = {c};
    RngStream chain = rng.split(ci);
    Tensor x({1, d});
    for (auto& v : x.data()) v = chain.normal();
    for (double t : grid) {
      if (fm::is_final_step(t, s)) {
        x = fm::sde_transition(theta, x, t, s, cfg.a, cond).first;
        continue;
      }
      StepCandidateSet set = branch_candidates(theta, x, t, s, c, cfg, reward, chain);
      std::size_t pick = 0;
      if (cfg.continuation == GrpoConfig::Continuation::kRandom) {
        pick = chain.below(cfg.k);
      } else {
        pick = static_cast<std::size_t>(std::max_element(set.rewards.begin(), set.rewards.end()) - set.rewards.begin());
      }
      all_rewards.insert(all_rewards.end(), set.rewards.begin(), set.rewards.end());
      Tensor next = set.candidates.row(pick);
      batches.push_back({t, s, set.parent, {c}, set.mean, set.std, set.candidates, to_parent, set.advantages});
      metrics.advantages.push_back(std::move(set.advantages));
      x = std::move(next);
    }
    std::copy(x.data().begin(), x.data().end(), terminal.data().begin() + ci * d);
  }
  metrics.mean_step_reward = mean_of(all_rewards);
  metrics.mean_rollout_reward = mean_of(reward(terminal, 0.0, conditions));
  ascend(theta, ref, batches, cfg, adam, metrics);
  return metrics;
}

}  // namespace drmkit::align

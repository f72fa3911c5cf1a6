#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "drmkit/flowmatch.hpp"

namespace drmkit::align {

// (r - mean) / population std; all zeros when the std is below 1e-8.
// Throws ConfigError for fewer than 2 rewards.
std::vector<double> group_advantage(std::span<const double> rewards);
// The same normalisation over the k candidates of one step.
std::vector<double> step_advantage(std::span<const double> rewards);

// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
double clipped_objective(double ratio, double advantage, double eps_clip);

// |mean_theta - mean_ref|^2 / (2 std^2), the KL of two Gaussians sharing std.
double gaussian_kl(std::span<const double> mean_theta, std::span<const double> mean_ref, double std);

// Per-row ratio p_theta(next_x | x) / p_old(next_x | x) of a recorded step,
// where the step's mean and std are the old policy's. Rejects std = 0.
std::vector<double> prob_ratios(const fm::VelocityModel& theta, const fm::TrajectoryStep& step, double s, double a,
                                std::span<const int> conditions);

struct GrpoConfig {
  enum class Algo { kGrpo, kStepGrpo };
  enum class Continuation { kRandom, kGreedy };

  Algo algo = Algo::kGrpo;
  std::size_t G = 24;
  std::size_t k = 6;
  double eps_clip = 1e-4;
  double beta = 0.01;
  double lr = 1e-4;
  double a = 0.7;
  std::size_t T = 20;
  Continuation continuation = Continuation::kRandom;

  void validate() const;  // throws ConfigError
};

// Reward of terminal states [m, d] (oracle, or the reward model at t = 0).
using TerminalReward = std::function<std::vector<double>(const Tensor& x, std::span<const int> conditions)>;
// Reward of intermediate states [m, d] at time t (the reward model).
using StepReward = std::function<std::vector<double>(const Tensor& x, double t, std::span<const int> conditions)>;

struct IterationMetrics {
  double mean_rollout_reward = 0.0;  // grpo: terminal rewards; step-grpo: candidate scores
  double mean_step_reward = 0.0;     // step-grpo only
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
  double grad_norm = 0.0;
  double objective = 0.0;
  std::vector<std::vector<double>> advantages;  // one vector per group / candidate set
};

// Transition statistics shared by both objectives: for each row, the clipped
// surrogate of its ratio with `advantages[row]`, minus beta * KL to the
// reference policy. Rows of `parents` are expanded to candidate rows through
// `parent_of` (identity for plain rollouts).
struct TransitionBatch {
  double t = 0.0;
  double s = 0.0;
  Tensor parents;                     // [p, d] states at t
  std::vector<int> conditions;        // [p]
  Tensor old_mean;                    // [p, d] old policy means
  double std = 0.0;
  Tensor next;                        // [n, d] sampled next states
  std::vector<std::size_t> parent_of; // [n]
  std::vector<double> advantages;     // [n]
};

// Mean over batches of mean_rows(surrogate - beta * KL), as a tape scalar.
// `ref` binds the frozen reference parameters on the same tape.
struct ObjectiveTerms {
  ad::Var objective;
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
};
ObjectiveTerms policy_objective(ad::ParamBinder& theta, ad::ParamBinder& ref, const fm::TrunkConfig& cfg,
                                std::span<const TransitionBatch> batches, const GrpoConfig& grpo);

// Flow-GRPO: G rollouts per entry of `conditions` from the current policy
// (the iteration's theta_old), one terminal reward each, the group advantage
// broadcast to every stochastic step, one Adam step on -objective.
IterationMetrics grpo_iteration(fm::VelocityModel& theta, const ParamSet& ref, const TerminalReward& reward,
                                std::span<const int> conditions, const GrpoConfig& cfg, AdamConfig adam,
                                const RngStream& rng);

struct StepCandidateSet {
  double t = 0.0;      // parent time
  Tensor parent;       // [1, d]
  Tensor mean;         // [1, d]
  double std = 0.0;
  Tensor candidates;   // [k, d] at t - s
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// k SDE draws from one parent, scored at the candidates' time t - s.
StepCandidateSet branch_candidates(const fm::VelocityModel& theta_old, const Tensor& parent, double t, double s,
                                   int condition, const GrpoConfig& cfg, const StepReward& reward, RngStream& rng);

// Step-wise GRPO: one chain per entry of `conditions`; at each stochastic step
// k candidates are branched, scored, and given step advantages; the chain
// continues from one candidate per cfg.continuation.
IterationMetrics step_grpo_iteration(fm::VelocityModel& theta, const ParamSet& ref, const StepReward& reward,
                                     std::span<const int> conditions, const GrpoConfig& cfg, AdamConfig adam,
                                     const RngStream& rng);

}  // namespace drmkit::align

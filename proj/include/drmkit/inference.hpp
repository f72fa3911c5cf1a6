#pragma once

#include <span>
#include <utility>
#include <vector>

#include "drmkit/align.hpp"
#include "drmkit/flowmatch.hpp"

namespace drmkit::infer {

struct SamplerConfig {
  std::size_t k = 1;
  std::size_t T = 20;
  double a = 0.7;

  void validate() const;  // throws ConfigError
};

struct SelectionStep {
  double t = 0.0;  // parent time; candidates live at t - 1/T
  std::vector<double> scores;
  std::size_t selected = 0;
  double selected_score = 0.0;
};

using SelectionTrace = std::vector<SelectionStep>;

// Index of the highest score; the lowest index wins ties.
std::size_t select_best(std::span<const double> scores);
// The selected row of candidates [k, d] as [1, d], with its index.
std::pair<Tensor, std::size_t> select_best(const Tensor& candidates, std::span<const double> scores);

struct StepwiseResult {
  Tensor terminal;  // [1, d]
  SelectionTrace trace;
};

// Explore-and-select sampling: every stochastic step branches k SDE
// candidates from the current state, scores them at their own time and
// continues from the best. The last step is the deterministic Euler step.
// With k = 1 the noise consumption matches fm::sample_trajectory.
StepwiseResult stepwise_sample(const fm::VelocityModel& model, const align::StepReward& reward, int condition,
                               const SamplerConfig& cfg, RngStream& rng);

// The same sampler over one chain per entry of `conditions`, advanced in
// lockstep so each step scores all n * k candidates in one batch. Chain i
// draws its noise from rng.split(i), in the order stepwise_sample would.
std::vector<StepwiseResult> stepwise_sample_batch(const fm::VelocityModel& model, const align::StepReward& reward,
                                                  std::span<const int> conditions, const SamplerConfig& cfg,
                                                  const RngStream& rng);

// Mean pairwise Euclidean distance between the rows of samples [n, d].
double diversity_proxy(const Tensor& samples);

}  // namespace drmkit::infer

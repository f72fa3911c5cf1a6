#include <cmath>
#include <string>

#include "drmkit/error.hpp"
#include "drmkit/inference.hpp"

namespace drmkit::infer {

void SamplerConfig::validate() const {
  if (k < 1) throw ConfigError("sample.k must be >= 1");
  if (T < 2) throw ConfigError("sample.T must be >= 2");
  if (!(a >= 0.0)) throw ConfigError("sample.a must be non-negative");
  if (k > 1 && !(a > 0.0)) throw ConfigError("branching with k > 1 needs SDE noise (a > 0)");
}

std::size_t select_best(std::span<const double> scores) {
  if (scores.empty()) throw ConfigError("select_best: empty candidate set");
  std::size_t best = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("select_best: non-finite score at index " + std::to_string(i));
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::pair<Tensor, std::size_t> select_best(const Tensor& candidates, std::span<const double> scores) {
  if (candidates.rank() != 2 || candidates.shape()[0] != scores.size()) {
    throw ShapeError("select_best: " + shape_str(candidates.shape()) + " candidates for " +
                     std::to_string(scores.size()) + " scores");
  }
  const std::size_t best = select_best(scores);
  return {candidates.row(best), best};
}

StepwiseResult stepwise_sample(const fm::VelocityModel& model, const align::StepReward& reward, int condition,
                               const SamplerConfig& cfg, RngStream& rng) {
  cfg.validate();
  const std::size_t d = model.cfg.state_dim;
  const double s = 1.0 / static_cast<double>(cfg.T);
  const int cond[] = {condition};
  const std::vector<int> conds(cfg.k, condition);
  StepwiseResult out{Tensor({1, d}), {}};
  Tensor& x = out.terminal;
  for (auto& v : x.data()) v = rng.normal();
  for (double t : fm::time_grid(cfg.T)) {
    auto [mean, std] = fm::sde_transition(model, x, t, s, cfg.a, cond);
    if (std == 0.0) {
      x = std::move(mean);
      continue;
    }
    // k candidates scored in one batch at the candidates' time
    Tensor cand({cfg.k, d});
    for (std::size_t i = 0; i < cfg.k; ++i) {
      for (std::size_t j = 0; j < d; ++j) cand.at(i, j) = mean[j] + std * rng.normal();
    }
    SelectionStep step{t, reward(cand, t - s, conds), 0, 0.0};
    auto [best, index] = select_best(cand, step.scores);
    step.selected = index;
    step.selected_score = step.scores[index];
    out.trace.push_back(std::move(step));
    x = std::move(best);
  }
  return out;
}

std::vector<StepwiseResult> stepwise_sample_batch(const fm::VelocityModel& model, const align::StepReward& reward,
                                                  std::span<const int> conditions, const SamplerConfig& cfg,
                                                  const RngStream& rng) {
  cfg.validate();
  const std::size_t n = conditions.size(), d = model.cfg.state_dim, k = cfg.k;
  if (n == 0) return {};
  const double s = 1.0 / static_cast<double>(cfg.T);
  std::vector<RngStream> chains;
  std::vector<int> cand_conds;
  for (std::size_t i = 0; i < n; ++i) {
    chains.push_back(rng.split(i));
    cand_conds.insert(cand_conds.end(), k, conditions[i]);
  }
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x.at(i, j) = chains[i].normal();
  }
  std::vector<StepwiseResult> out(n);
  for (double t : fm::time_grid(cfg.T)) {
    auto [mean, std] = fm::sde_transition(model, x, t, s, cfg.a, conditions);
    if (std == 0.0) {
      x = std::move(mean);
      continue;
    }
    Tensor cand({n * k, d});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t j = 0; j < d; ++j) cand.at(i * k + c, j) = mean.at(i, j) + std * chains[i].normal();
      }
    }
    const auto scores = reward(cand, t - s, cand_conds);
    for (std::size_t i = 0; i < n; ++i) {
      SelectionStep step{t, std::vector<double>(scores.begin() + i * k, scores.begin() + (i + 1) * k), 0, 0.0};
      step.selected = select_best(step.scores);
      step.selected_score = step.scores[step.selected];
      for (std::size_t j = 0; j < d; ++j) x.at(i, j) = cand.at(i * k + step.selected, j);
      out[i].trace.push_back(std::move(step));
    }
  }
  for (std::size_t i = 0; i < n; ++i) out[i].terminal = x.row(i);
  return out;
}

double diversity_proxy(const Tensor& samples) {
  if (samples.rank() != 2 || samples.shape()[0] < 2) {
    throw ConfigError("diversity_proxy needs at least 2 samples, got " + shape_str(samples.shape()));
  }
  const std::size_t n = samples.shape()[0], d = samples.shape()[1];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) sq += (samples.at(i, c) - samples.at(j, c)) * (samples.at(i, c) - samples.at(j, c));
      total += std::sqrt(sq);
    }
  }
  return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

}  // namespace drmkit::infer

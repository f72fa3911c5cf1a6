#include <cmath>
#include <numeric>
#include <string>

#include "drmkit/drm.hpp"
#include "drmkit/error.hpp"

namespace drmkit::rm {
namespace {

// Rows scored per forward pass during evaluation.
constexpr std::size_t kEvalChunk = 512;

void copy_row(Tensor& dst, std::size_t row, const Tensor& src) {
  const std::size_t d = src.size();
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + row * d);
}

}  // namespace

std::pair<double, double> score_pair(const RewardModel& model, const PreferenceTriplet& triplet, double t,
                                     RngStream& rng) {
  const std::size_t d = triplet.win.size();
  Tensor x({2, d});
  copy_row(x, 0, corrupt(triplet.win, t, rng));
  copy_row(x, 1, corrupt(triplet.lose, t, rng));
  const int conds[] = {triplet.condition, triplet.condition};
  const auto s = score_batch(model, x, t, conds);
  return {s[0], s[1]};
}

std::vector<double> train_drm(RewardModel& model, const PreferenceDataset& data, const DrmTrainConfig& cfg) {
  if (data.empty()) throw ConfigError("train_drm: empty preference dataset");
  if (!(cfg.t_max >= 0.0 && cfg.t_max <= 1.0)) throw ConfigError("train_drm: t_max must lie in [0, 1]");
  if (cfg.batch == 0) throw ConfigError("train_drm: batch must be positive");
  const std::size_t d = data.front().win.size();
  const RngStream root(cfg.seed, 0x44524d);
  const AdamConfig adam{.lr = cfg.lr};
  std::vector<double> curve;
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle = root.split(2 * epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    const RngStream draws = root.split(2 * epoch + 1);

    for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch, ++b) {
      const std::size_t m = std::min(cfg.batch, order.size() - start);
      RngStream r = draws.split(b);
      // rows [0, m) are winners, [m, 2m) losers, sharing t per triplet
      Tensor x({2 * m, d});
      std::vector<double> t(2 * m);
      std::vector<int> conds(2 * m);
      for (std::size_t k = 0; k < m; ++k) {
        const auto& tr = data[order[start + k]];
        const double tk = cfg.t_max * (1.0 - r.uniform());  // [0, t_max)
        copy_row(x, k, corrupt(tr.win, tk, r));
        copy_row(x, m + k, corrupt(tr.lose, tk, r));
        t[k] = t[m + k] = tk;
        conds[k] = conds[m + k] = tr.condition;
      }
      std::vector<std::size_t> win_rows(m), lose_rows(m);
      std::iota(win_rows.begin(), win_rows.end(), std::size_t{0});
      std::iota(lose_rows.begin(), lose_rows.end(), m);

      ad::Tape tape;
      ad::ParamBinder bind(tape, model.params, true);
      ad::Var s = reward_forward(bind, model, tape.constant(x), t, conds);
      ad::Var margin = ad::sub(ad::gather_rows(s, win_rows), ad::gather_rows(s, lose_rows));
      ad::Var loss = ad::scale(ad::mean(ad::log_sigmoid(margin)), -1.0);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("reward model loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      }
      curve.push_back(value);
      tape.backward(loss);
      adam_step(model.params, tape.param_grads(model.params), adam);
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1);
  }
  return curve;
}

double eval_accuracy(const RewardModel& model, const PreferenceDataset& data, double t, const RngStream& rng) {
  return eval_accuracy(
      [&model](const Tensor& x, double tt, std::span<const int> conds) { return score_batch(model, x, tt, conds); },
      data, t, rng);
}

double eval_accuracy(const Scorer& scorer, const PreferenceDataset& data, double t, const RngStream& rng) {
  if (data.empty()) throw ConfigError("eval_accuracy: empty preference dataset");
  const std::size_t d = data.front().win.size();
  double correct = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t m = std::min(kEvalChunk, data.size() - start);
    Tensor x({2 * m, d});
    std::vector<int> conds(2 * m);
    for (std::size_t k = 0; k < m; ++k) {
      const auto& tr = data[start + k];
      RngStream r = rng.split(start + k);
      copy_row(x, k, corrupt(tr.win, t, r));
      copy_row(x, m + k, corrupt(tr.lose, t, r));
      conds[k] = conds[m + k] = tr.condition;
    }
    const auto s = scorer(x, t, conds);
    for (std::size_t k = 0; k < m; ++k) {
      if (s[k] > s[m + k]) correct += 1.0;
      else if (s[k] == s[m + k]) correct += 0.5;
    }
  }
  return correct / static_cast<double>(data.size());
}

}  // namespace drmkit::rm

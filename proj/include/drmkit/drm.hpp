#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "drmkit/flowmatch.hpp"

namespace drmkit::rm {

struct ConvLayer {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

// Prediction head on top of the truncated trunk.
//
// kConv: trunk features [m, hidden] are viewed as `tokens` x (hidden/tokens),
// projected per token to `proj`, reshaped to height x width x proj/4,
// convolved (relu after each layer), mean pooled and mapped to a scalar.
// kMlp: projection -> relu -> affine, for states without spatial structure.
struct RewardHeadConfig {
  enum class Kind { kMlp, kConv };

  Kind kind = Kind::kMlp;
  std::size_t tokens = 16;
  std::size_t proj = 16;
  std::size_t height = 8;
  std::size_t width = 8;
  std::vector<ConvLayer> conv = {ConvLayer{}};

  // Throws ConfigError when the head does not fit a trunk of width `hidden`.
  void validate(std::size_t hidden) const;
};

struct RewardModel {
  fm::TrunkConfig trunk;
  std::size_t blocks = 3;  // trunk blocks kept
  RewardHeadConfig head;
  ParamSet params;  // trunk names shared with the velocity model, head under "rhead.*"
};

inline constexpr std::size_t kDefaultTruncate = 3;

// Keeps the first trunk.blocks - truncate blocks. With `pretrained` the trunk
// is copied from those parameters (shapes must match); otherwise it is drawn
// fresh from `rng`. The head is always fresh.
RewardModel build_reward_model(const fm::TrunkConfig& trunk, const ParamSet* pretrained,
                               const RewardHeadConfig& head, std::size_t truncate, RngStream& rng);

// Scores [m, 1] for states x [m, state_dim] at per-row times.
ad::Var reward_forward(ad::ParamBinder& bind, const RewardModel& model, ad::Var x, std::span<const double> t,
                       std::span<const int> conditions);
std::vector<double> score_batch(const RewardModel& model, const Tensor& x, std::span<const double> t,
                                std::span<const int> conditions);
std::vector<double> score_batch(const RewardModel& model, const Tensor& x, double t,
                                std::span<const int> conditions);

// -log sigmoid(s_win - s_lose), via the stable softplus form.
double bt_loss(double s_win, double s_lose);

// Ground-truth reward. vector2d: -|x - mu_c|^2. grid: -MSE to the condition's
// blob at mid-range sharpness plus kSharpnessBonus * (centre pixel - mean pixel).
inline constexpr double kSharpnessBonus = 0.05;
double oracle_reward(const fm::DatasetSpec& spec, std::span<const double> x, int condition);
std::vector<double> oracle_rewards(const fm::DatasetSpec& spec, const Tensor& x, std::span<const int> conditions);

struct PreferenceTriplet {
  Tensor win;   // [state_dim]
  Tensor lose;  // [state_dim]
  int condition = 0;
};
using PreferenceDataset = std::vector<PreferenceTriplet>;

struct SynthConfig {
  enum class Source { kModel, kPerturbed };

  Source source = Source::kPerturbed;
  double flip_p = 0.05;
  // kPerturbed: each candidate is a clean dataset sample plus alpha * N(0, I)
  // with alpha ~ U(0, perturb).
  double perturb = 0.5;
  // kModel: candidates are SDE samples from the flow model.
  std::size_t sample_steps = 20;
  double sample_a = 0.7;
};

// Triplet j uses condition j mod C. Candidates are ranked by the oracle and
// the labels are swapped with probability flip_p.
PreferenceDataset synth_preferences(const fm::DatasetSpec& spec, const fm::VelocityModel* model, std::size_t n,
                                    const SynthConfig& cfg, const RngStream& rng);

// Corrupts `x` along the interpolation path toward a fresh normal draw.
Tensor corrupt(const Tensor& x, double t, RngStream& rng);

// Winner and loser get independent corruption draws at the shared t.
std::pair<double, double> score_pair(const RewardModel& model, const PreferenceTriplet& triplet, double t,
                                     RngStream& rng);

struct DrmTrainConfig {
  double t_max = 0.75;
  std::size_t epochs = 1;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // Called with the number of completed epochs after each epoch.
  std::function<void(std::size_t)> on_epoch;
};

// Minimizes mean bt_loss with per-triplet t ~ U(0, t_max). Returns the
// per-minibatch loss curve. Throws NumericError on divergence.
std::vector<double> train_drm(RewardModel& model, const PreferenceDataset& data, const DrmTrainConfig& cfg);

// Fraction of triplets with s_win > s_lose after corruption at t (ties 0.5).
// Triplet j draws its corruption from rng.split(j).
double eval_accuracy(const RewardModel& model, const PreferenceDataset& data, double t, const RngStream& rng);
// Same protocol for any batch scorer (rows of x share t).
using Scorer = std::function<std::vector<double>(const Tensor& x, double t, std::span<const int> conditions)>;
double eval_accuracy(const Scorer& scorer, const PreferenceDataset& data, double t, const RngStream& rng);

// One JSON object per line: {"win": [...], "lose": [...], "cond": n}.
void write_preferences(const PreferenceDataset& data, const std::filesystem::path& path);
PreferenceDataset read_preferences(const std::filesystem::path& path);

}  // namespace drmkit::rm

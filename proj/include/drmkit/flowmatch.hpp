#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "drmkit/params.hpp"
#include "drmkit/rng.hpp"
#include "drmkit/tape.hpp"
#include "drmkit/tensor.hpp"

namespace drmkit::fm {

// Synthetic data source standing in for images. Each condition label owns
// one Gaussian component (vector2d) or one blob centre (grid).
struct DatasetSpec {
  enum class Mode { kVector2d, kGrid };

  Mode mode = Mode::kVector2d;
  // vector2d
  std::vector<std::array<double, 2>> means;
  double stddev = 0.5;
  // grid: side x side image, pixel = 2 exp(-sharpness * d^2) - 1
  std::size_t side = 8;
  std::vector<std::array<double, 2>> centers;  // (row, col)
  double sharpness_min = 0.15;
  double sharpness_max = 0.6;

  std::size_t num_conditions() const;
  std::size_t state_dim() const;
  void validate() const;  // throws ConfigError
};

// Renders the blob image of `condition` at the given sharpness, flattened to [side*side].
Tensor render_blob(const DatasetSpec& spec, int condition, double sharpness);

// One state of `condition`, flattened to [state_dim].
Tensor draw_state(const DatasetSpec& spec, int condition, RngStream& rng);

struct DatasetBatch {
  Tensor states;  // [n, state_dim]
  std::vector<int> conditions;
};

// Conditions are drawn uniformly; vector2d draws from the component Gaussian,
// grid renders a blob with sharpness uniform in [sharpness_min, sharpness_max].
DatasetBatch generate_dataset_batch(const DatasetSpec& spec, std::size_t n, RngStream& rng);

struct TrunkConfig {
  std::size_t state_dim = 2;
  std::size_t hidden = 128;
  std::size_t blocks = 6;
  std::size_t time_features = 16;
  std::size_t num_conditions = 2;
  std::size_t cond_dim = 8;
};

// Parameters of the input embedding plus `blocks` residual blocks, named
// "embed.*", "cond.table", "block<i>.fc{1,2}.{w,b}".
ParamSet init_trunk_params(const TrunkConfig& cfg, std::size_t blocks, RngStream& rng);

// Sinusoidal features of t: sin/cos pairs at frequencies pi * 2^(i-1).
Tensor time_features(std::span<const double> t, std::size_t count);

// Shared feature backbone: embeds (x, t, c) and runs the first `blocks`
// residual blocks. Returns [m, hidden].
ad::Var trunk_forward(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, std::span<const double> t,
                      std::span<const int> conditions, std::size_t blocks);

// Flow-matching velocity network v(x_t, t, c): full trunk plus the "vhead" affine.
struct VelocityModel {
  TrunkConfig cfg;
  ParamSet params;

  static VelocityModel create(const TrunkConfig& cfg, RngStream& rng);
};

ad::Var velocity_forward(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, std::span<const double> t,
                         std::span<const int> conditions);
Tensor velocity(const VelocityModel& model, const Tensor& x, std::span<const double> t,
                std::span<const int> conditions);
Tensor velocity(const VelocityModel& model, const Tensor& x, double t, std::span<const int> conditions);

// (1 - t) x0 + t x1. Rejects t outside [0, 1].
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

using VelocityFn = std::function<Tensor(const Tensor& xt, std::span<const double> t, std::span<const int> c)>;

// Mean over all elements of (v(x_t, t) - (x1 - x0))^2; rows are samples.
double fm_loss(const VelocityFn& v, const Tensor& x0, const Tensor& x1, std::span<const double> t,
               std::span<const int> conditions);
ad::Var fm_loss(ad::ParamBinder& bind, const TrunkConfig& cfg, const Tensor& x0, const Tensor& x1,
                std::span<const double> t, std::span<const int> conditions);

struct FmTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct FmTrainResult {
  VelocityModel model;
  std::vector<double> loss_curve;
};

// Throws NumericError naming the step on a non-finite loss.
FmTrainResult train_fm(const DatasetSpec& spec, const TrunkConfig& trunk, const FmTrainConfig& cfg);

// Clamp bound for t inside the SDE coefficients.
inline constexpr double kTimeClamp = 1e-3;

// a * sqrt(t_c / (1 - t_c)) with t_c = clamp(t, 1e-3, 1 - 1e-3).
double sigma_t(double a, double t);

// Euler step of dx = v dt toward t - s: x - s v(x, t).
Tensor ode_step(const VelocityModel& model, const Tensor& x, double t, double s, std::span<const int> conditions);

struct SdeStep {
  Tensor next;
  Tensor mean;
  double std = 0.0;
};

// Gaussian transition of the reverse-time SDE from t to t - s. Rows of `x`
// share t. The last step (t - s <= 1e-3) is the deterministic Euler step.
bool is_final_step(double t, double s);
std::pair<Tensor, double> sde_transition(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                                         std::span<const int> conditions);
// Differentiable transition mean (stochastic steps only).
ad::Var sde_mean(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, double t, double s, double a,
                 std::span<const int> conditions);
double sde_std(double t, double s, double a);
// One step with standard-normal noise `eps` (same shape as x).
SdeStep sde_step(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                 std::span<const int> conditions, const Tensor& eps);
// One step drawing eps row-major from `rng`.
SdeStep sde_step(const VelocityModel& model, const Tensor& x, double t, double s, double a,
                 std::span<const int> conditions, RngStream& rng);

// Isotropic Gaussian log-density of one state; d = x_next.size().
double transition_logprob(std::span<const double> x_next, std::span<const double> mean, double std);
// Per-row log-densities of [m, d] tensors.
std::vector<double> transition_logprob_rows(const Tensor& x_next, const Tensor& mean, double std);

struct TrajectoryStep {
  double t = 0.0;
  Tensor x;       // [m, d] state at t
  Tensor mean;    // transition mean toward t - s
  double std = 0.0;
  Tensor next_x;  // [m, d]
};

// One or more rollouts sharing the time grid t = 1, 1 - 1/T, ..., 1/T.
struct Trajectory {
  std::vector<int> conditions;  // one per row
  std::vector<TrajectoryStep> steps;
  Tensor terminal;  // [m, d] at t = 0
};

std::vector<double> time_grid(std::size_t steps);

// Single rollout; initial x and every step's noise come from `rng` in order.
Trajectory sample_trajectory(const VelocityModel& model, int condition, std::size_t steps, double a, RngStream& rng);
// Batched rollouts; row i draws all of its noise from rng.split(i), so the
// result does not depend on how rollouts are grouped into batches.
Trajectory sample_trajectories(const VelocityModel& model, std::span<const int> conditions, std::size_t steps,
                               double a, const RngStream& rng);

}  // namespace drmkit::fm

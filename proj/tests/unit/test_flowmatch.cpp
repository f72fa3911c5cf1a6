#include <bit>
#include <cmath>
#include <limits>
#include <numbers>

#include <doctest.h>

#include "drmkit/error.hpp"
#include "drmkit/flowmatch.hpp"
#include "drmkit/gradcheck.hpp"

using namespace drmkit;
using namespace drmkit::fm;

namespace {

DatasetSpec two_modes() {
  DatasetSpec spec;
  spec.means = {{2.0, 0.0}, {-2.0, 0.0}};
  spec.stddev = 0.5;
  return spec;
}

TrunkConfig small_trunk(std::size_t state_dim = 2, std::size_t conds = 2) {
  TrunkConfig cfg;
  cfg.state_dim = state_dim;
  cfg.num_conditions = conds;
  cfg.hidden = 16;
  cfg.blocks = 4;
  cfg.time_features = 4;
  cfg.cond_dim = 4;
  return cfg;
}

VelocityModel random_model(std::uint64_t seed, const TrunkConfig& cfg = small_trunk()) {
  RngStream rng(seed);
  return VelocityModel::create(cfg, rng);
}

// Model whose velocity is the constant `v` everywhere.
VelocityModel constant_velocity(double v0, double v1) {
  VelocityModel m = random_model(3);
  for (auto& w : m.params.value("vhead.w").data()) w = 0.0;
  m.params.value("vhead.b") = Tensor::from({v0, v1});
  return m;
}

Tensor normals(Shape shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("interpolate endpoints and midpoint") {
  RngStream rng(1);
  for (Shape shape : {Shape{5}, Shape{3, 4}, Shape{2, 3, 3}}) {
    Tensor x0 = normals(shape, rng), x1 = normals(shape, rng);
    CHECK(bit_equal(interpolate(x0, x1, 0.0), x0));
    CHECK(bit_equal(interpolate(x0, x1, 1.0), x1));
  }
  CHECK(interpolate(Tensor::from({0, 0}), Tensor::from({2, 4}), 0.5) == Tensor::from({1, 2}));
  CHECK_THROWS_AS(interpolate(Tensor::from({0}), Tensor::from({1}), 1.5), ConfigError);
  CHECK_THROWS_AS(interpolate(Tensor::from({0}), Tensor::from({1}), -0.1), ConfigError);
  CHECK_THROWS_AS(interpolate(Tensor::from({0}), Tensor::from({1, 2}), 0.5), ShapeError);
}

TEST_CASE("fm_loss oracle, zero model and sign") {
  RngStream rng(2);
  const std::size_t n = 4000;
  Tensor x0 = normals({n, 2}, rng), x1 = normals({n, 2}, rng);
  std::vector<double> t(n);
  for (auto& v : t) v = rng.uniform();
  std::vector<int> c(n, 0);

  Tensor target(x1.shape());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = x1[i] - x0[i];
  VelocityFn oracle = [&](const Tensor&, std::span<const double>, std::span<const int>) { return target; };
  CHECK(fm_loss(oracle, x0, x1, t, c) == 0.0);

  // zero predictor with x0 = 0: loss estimates E[x1^2] = 1
  Tensor zero0({n, 2});
  VelocityFn zero = [](const Tensor& xt, std::span<const double>, std::span<const int>) { return Tensor(xt.shape()); };
  const double loss = fm_loss(zero, zero0, x1, t, c);
  // Var(x1^2) = 2 per coordinate, 2n coordinates
  CHECK(std::abs(loss - 1.0) < 3.0 * std::sqrt(2.0 / (2.0 * n)));

  VelocityModel model = random_model(4);
  VelocityFn learned = [&](const Tensor& xt, std::span<const double> ts, std::span<const int> cs) {
    return velocity(model, xt, ts, cs);
  };
  for (int k = 0; k < 5; ++k) {
    Tensor a = normals({8, 2}, rng), b = normals({8, 2}, rng);
    std::vector<double> ts(8, 0.1 * k);
    std::vector<int> cs = {0, 1, 0, 1, 0, 1, 0, 1};
    CHECK(fm_loss(learned, a, b, ts, cs) >= 0.0);
  }
}

TEST_CASE("fm_loss gradient matches finite differences") {
  VelocityModel model = random_model(5);
  RngStream rng(6);
  Tensor x0 = normals({6, 2}, rng), x1 = normals({6, 2}, rng);
  std::vector<double> t = {0.05, 0.2, 0.4, 0.6, 0.8, 0.95};
  std::vector<int> c = {0, 1, 1, 0, 0, 1};
  for (int point = 0; point < 10; ++point) {
    RngStream init(100 + point);
    VelocityModel m = VelocityModel::create(model.cfg, init);
    const double err = ad::param_grad_check(
        [&](ad::ParamBinder& bind) { return fm_loss(bind, m.cfg, x0, x1, t, c); }, m.params, rng, 6);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("train_fm learns the mixture and is deterministic") {
  const DatasetSpec spec = two_modes();
  TrunkConfig trunk;  // hidden 128, 6 blocks
  FmTrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch = 256;
  cfg.seed = 11;
  FmTrainResult run = train_fm(spec, trunk, cfg);
  REQUIRE(run.loss_curve.size() == 2000);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 200; ++i) {
    first += run.loss_curve[i] / 200.0;
    last += run.loss_curve[1800 + i] / 200.0;
  }
  // Bayes floor of the loss: given (x_t, t, c) each coordinate of x1 - x0 keeps
  // the residual variance of a Gaussian regression, averaged over t ~ U(0, 1).
  const double var0 = spec.stddev * spec.stddev;
  double floor = 0.0;
  const int grid = 100000;
  for (int k = 0; k < grid; ++k) {
    const double t = (k + 0.5) / grid;
    const double cov = t - (1 - t) * var0;
    floor += ((1 + var0) - cov * cov / ((1 - t) * (1 - t) * var0 + t * t)) / grid;
  }
  MESSAGE("first-200 mean " << first << ", last-200 mean " << last << ", floor " << floor);
  CHECK(last < 0.9 * first);
  CHECK(last < 1.1 * floor);
  CHECK(last > floor - 0.02);

  // 1000 samples per condition through the ODE sampler
  for (int c = 0; c < 2; ++c) {
    std::vector<int> conds(1000, c);
    Trajectory traj = sample_trajectories(run.model, conds, 50, 0.0, RngStream(21, c));
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < 1000; ++i) {
      mx += traj.terminal.at(i, 0) / 1000.0;
      my += traj.terminal.at(i, 1) / 1000.0;
    }
    MESSAGE("condition " << c << " sample mean (" << mx << ", " << my << ")");
    CHECK(std::hypot(mx - spec.means[c][0], my - spec.means[c][1]) < 0.3);
  }

  FmTrainConfig short_cfg = cfg;
  short_cfg.steps = 30;
  TrunkConfig small = small_trunk();
  FmTrainResult a = train_fm(spec, small, short_cfg), b = train_fm(spec, small, short_cfg);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.model.params.same_values(b.model.params));
  short_cfg.seed = 12;
  CHECK(train_fm(spec, small, short_cfg).loss_curve != a.loss_curve);
}

TEST_CASE("train_fm rejects divergence and mismatched configs") {
  FmTrainConfig cfg;
  cfg.steps = 50;
  cfg.batch = 16;
  cfg.lr = 1e150;
  try {
    train_fm(two_modes(), small_trunk(), cfg);
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  CHECK_THROWS_AS(train_fm(two_modes(), small_trunk(3), FmTrainConfig{}), ConfigError);
}

TEST_CASE("sigma_t examples") {
  CHECK(sigma_t(1.0, 0.5) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sigma_t(0.0, 0.3) == 0.0);
  CHECK(sigma_t(0.0, 1.0) == 0.0);
  CHECK(sigma_t(0.7, 0.2) == doctest::Approx(0.35).epsilon(1e-14));
  // clamped at both ends
  CHECK(std::isfinite(sigma_t(1.0, 1.0)));
  CHECK(sigma_t(1.0, 1.0) == sigma_t(1.0, 1.0 - 1e-3));
  CHECK(sigma_t(1.0, 0.0) == sigma_t(1.0, 1e-3));
}

TEST_CASE("ode_step examples") {
  RngStream rng(7);
  Tensor x = normals({3, 2}, rng);
  std::vector<int> c = {0, 1, 0};
  CHECK(ode_step(constant_velocity(0, 0), x, 0.5, 0.1, c) == x);
  Tensor shifted = ode_step(constant_velocity(1, 0), x, 0.5, 0.1, c);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(shifted.at(i, 0) == doctest::Approx(x.at(i, 0) - 0.1).epsilon(1e-15));
    CHECK(shifted.at(i, 1) == x.at(i, 1));
  }
  VelocityModel m = random_model(8);
  Tensor a = x, b = x;
  for (double t : time_grid(50)) {
    a = ode_step(m, a, t, 0.02, c);
    b = ode_step(m, b, t, 0.02, c);
  }
  CHECK(bit_equal(a, b));
  CHECK_THROWS_AS(ode_step(m, x, 0.05, 0.1, c), ConfigError);
  CHECK_THROWS_AS(ode_step(m, x, 0.5, 0.0, c), ConfigError);
}

TEST_CASE("sde_step reduces to ode_step at a = 0") {
  RngStream rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    VelocityModel m = random_model(200 + trial);
    Tensor x = normals({4, 2}, rng);
    std::vector<int> c = {0, 1, 1, 0};
    const double t = 0.05 + 0.95 * rng.uniform();
    const double s = std::min(t, 0.02);
    Tensor eps = normals({4, 2}, rng);
    SdeStep st = sde_step(m, x, t, s, 0.0, c, eps);
    CHECK(st.std == 0.0);
    CHECK(bit_equal(st.next, ode_step(m, x, t, s, c)));
    CHECK(bit_equal(st.mean, st.next));
  }
}

TEST_CASE("sde_step noise, mean and std") {
  VelocityModel m = random_model(10);
  RngStream rng(11);
  Tensor x = normals({2, 2}, rng);
  std::vector<int> c = {0, 1};
  SdeStep zero = sde_step(m, x, 0.5, 0.02, 0.7, c, Tensor({2, 2}));
  CHECK(zero.next == zero.mean);
  CHECK(zero.std == doctest::Approx(0.7 * std::sqrt(0.02)).epsilon(1e-14));
  CHECK(sde_std(0.5, 0.02, 0.7) == doctest::Approx(0.098995).epsilon(1e-5));

  // mean formula against a direct evaluation of the drift
  const double t = 0.5, s = 0.02, a = 0.7, sig = sigma_t(a, t);
  Tensor v = velocity(m, x, t, c);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double expect = x[i] - s * (v[i] + sig * sig / (2 * t) * (x[i] + (1 - t) * v[i]));
    CHECK(zero.mean[i] == doctest::Approx(expect).epsilon(1e-13));
  }

  Tensor eps = normals({2, 2}, rng);
  SdeStep noisy = sde_step(m, x, t, s, a, c, eps);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(noisy.next[i] == doctest::Approx(noisy.mean[i] + noisy.std * eps[i]));

  // final step is deterministic
  SdeStep last = sde_step(m, x, 0.02, 0.02, a, c, eps);
  CHECK(last.std == 0.0);
  CHECK(bit_equal(last.next, ode_step(m, x, 0.02, 0.02, c)));

  // rng overload draws row-major from the stream
  RngStream r1(12), r2(12);
  SdeStep drawn = sde_step(m, x, t, s, a, c, r1);
  SdeStep given = sde_step(m, x, t, s, a, c, normals({2, 2}, r2));
  CHECK(bit_equal(drawn.next, given.next));

  // the first step from t = 1 stays bounded
  SdeStep first = sde_step(m, x, 1.0, 0.05, 1.0, c, eps);
  CHECK(first.next.all_finite());
  CHECK(first.std < 1.0);
  CHECK_THROWS_AS(sde_step(m, x, t, s, -0.1, c, eps), ConfigError);
}

TEST_CASE("sde_step rejects non-finite drift") {
  VelocityModel m = constant_velocity(0, 0);
  m.params.value("vhead.b")[0] = std::numeric_limits<double>::infinity();
  Tensor x({1, 2});
  std::vector<int> c = {0};
  try {
    sde_step(m, x, 0.4, 0.02, 0.7, c, Tensor({1, 2}));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("t=0.4") != std::string::npos);
  }
}

TEST_CASE("transition_logprob closed form") {
  const double at_mean[] = {0.0};
  CHECK(transition_logprob(at_mean, at_mean, 1.0) == doctest::Approx(-0.9189385332046727).epsilon(1e-15));

  RngStream rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.below(6);
    std::vector<double> x(d), mu(d);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = rng.normal();
      mu[i] = rng.normal();
    }
    const double sd = 0.3 + rng.uniform();
    double sq = 0.0;
    double oracle = 0.0;  // sum of per-coordinate normal log-densities
    for (std::size_t i = 0; i < d; ++i) {
      const double z = (x[i] - mu[i]) / sd;
      sq += (x[i] - mu[i]) * (x[i] - mu[i]);
      oracle += std::log(std::exp(-0.5 * z * z) / (sd * std::sqrt(2 * std::numbers::pi)));
    }
    const double lp = transition_logprob(x, mu, sd);
    CHECK(std::abs(lp - oracle) < 1e-12);
    CHECK(transition_logprob(mu, mu, sd) - lp == doctest::Approx(sq / (2 * sd * sd)).epsilon(1e-12));
    CHECK(transition_logprob(mu, mu, sd) >= lp);
  }

  // importance estimate of the density's integral with a wider Gaussian proposal
  const double sd = 0.8, prop = 2.0;
  const int n = 100000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z[] = {prop * rng.normal()};
    const double zero[] = {0.0};
    acc += std::exp(transition_logprob(z, zero, sd) - transition_logprob(z, zero, prop));
  }
  CHECK(std::abs(acc / n - 1.0) < 0.01);

  CHECK_THROWS_AS(transition_logprob(at_mean, at_mean, 0.0), ConfigError);
  const double two[] = {0.0, 1.0};
  CHECK_THROWS_AS(transition_logprob(at_mean, two, 1.0), ShapeError);
}

TEST_CASE("sample_trajectory structure and reductions") {
  VelocityModel m = random_model(14);
  RngStream r(15);
  Trajectory traj = sample_trajectory(m, 1, 10, 0.7, r);
  REQUIRE(traj.steps.size() == 10);
  CHECK(traj.steps.front().t == 1.0);
  for (std::size_t j = 1; j < traj.steps.size(); ++j) CHECK(traj.steps[j].t < traj.steps[j - 1].t);
  for (std::size_t j = 0; j + 1 < traj.steps.size(); ++j) {
    CHECK(traj.steps[j].std > 0.0);
    CHECK(bit_equal(traj.steps[j].next_x, traj.steps[j + 1].x));
  }
  CHECK(traj.steps.back().std == 0.0);
  CHECK(traj.terminal.all_finite());

  // a = 0 follows the ODE from the same initial draw
  RngStream r0(16);
  Trajectory ode = sample_trajectory(m, 0, 20, 0.0, r0);
  RngStream same(16);
  Tensor x = normals({1, 2}, same);
  std::vector<int> c = {0};
  for (double t : time_grid(20)) x = ode_step(m, x, t, 0.05, c);
  CHECK(bit_equal(ode.terminal, x));

  RngStream ra(17, 1), rb(17, 2);
  CHECK(!bit_equal(sample_trajectory(m, 0, 10, 0.7, ra).terminal, sample_trajectory(m, 0, 10, 0.7, rb).terminal));
  CHECK_THROWS_AS(sample_trajectory(m, 0, 1, 0.7, ra), ConfigError);

  // batched rollouts do not depend on the batch composition
  std::vector<int> conds = {0, 1, 1};
  Trajectory all = sample_trajectories(m, conds, 10, 0.7, RngStream(18));
  std::vector<int> first = {0, 1};
  Trajectory part = sample_trajectories(m, first, 10, 0.7, RngStream(18));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(all.terminal.at(1, j) == doctest::Approx(part.terminal.at(1, j)).epsilon(1e-12));
  }
}

TEST_CASE("recorded transitions reproduce under the generating parameters only") {
  VelocityModel m = random_model(19);
  RngStream r(20);
  std::vector<int> conds = {0, 1, 0, 1};
  Trajectory traj = sample_trajectories(m, conds, 8, 0.7, r);
  VelocityModel perturbed = m;
  RngStream noise(21);
  for (auto& [name, p] : perturbed.params) {
    for (auto& v : p.value.data()) v += 0.05 * noise.normal();
  }
  double max_same = 0.0, max_diff = 0.0;
  for (const auto& step : traj.steps) {
    if (step.std == 0.0) continue;
    const double s = 1.0 / 8.0;
    auto [mean_same, std_same] = sde_transition(m, step.x, step.t, s, 0.7, conds);
    auto [mean_pert, std_pert] = sde_transition(perturbed, step.x, step.t, s, 0.7, conds);
    auto old_lp = transition_logprob_rows(step.next_x, step.mean, step.std);
    auto same_lp = transition_logprob_rows(step.next_x, mean_same, std_same);
    auto pert_lp = transition_logprob_rows(step.next_x, mean_pert, std_pert);
    for (std::size_t i = 0; i < conds.size(); ++i) {
      max_same = std::max(max_same, std::abs(std::exp(same_lp[i] - old_lp[i]) - 1.0));
      max_diff = std::max(max_diff, std::abs(std::exp(pert_lp[i] - old_lp[i]) - 1.0));
    }
  }
  CHECK(max_same == 0.0);
  CHECK(max_diff > 1e-3);
}

TEST_CASE("generate_dataset_batch") {
  DatasetSpec spec = two_modes();
  spec.stddev = 1e-300;
  RngStream rng(22);
  DatasetBatch tight = generate_dataset_batch(spec, 50, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(std::abs(tight.states.at(i, 0) - spec.means[tight.conditions[i]][0]) < 1e-290);
    CHECK(std::abs(tight.states.at(i, 1) - spec.means[tight.conditions[i]][1]) < 1e-290);
  }

  spec.stddev = 0.5;
  DatasetBatch big = generate_dataset_batch(spec, 20000, rng);
  for (int c = 0; c < 2; ++c) {
    double mx = 0.0, my = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < 20000; ++i) {
      if (big.conditions[i] != c) continue;
      mx += big.states.at(i, 0);
      my += big.states.at(i, 1);
      ++count;
    }
    CHECK(count > 9000);
    const double bound = 4.0 * 0.5 / std::sqrt(static_cast<double>(count));
    CHECK(std::abs(mx / count - spec.means[c][0]) < bound);
    CHECK(std::abs(my / count - spec.means[c][1]) < bound);
  }

  DatasetSpec grid;
  grid.mode = DatasetSpec::Mode::kGrid;
  grid.side = 8;
  grid.centers = {{2, 2}, {2, 5}, {5, 2}, {5, 5}};
  DatasetBatch imgs = generate_dataset_batch(grid, 40, rng);
  REQUIRE(imgs.states.shape() == Shape{40, 64});
  for (std::size_t i = 0; i < 40; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 64; ++j) {
      if (imgs.states.at(i, j) > imgs.states.at(i, best)) best = j;
    }
    const auto& ctr = grid.centers[imgs.conditions[i]];
    CHECK(best == static_cast<std::size_t>(ctr[0]) * 8 + static_cast<std::size_t>(ctr[1]));
  }

  DatasetSpec bad = two_modes();
  bad.means.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = two_modes();
  bad.stddev = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  grid.side = 7;
  CHECK_THROWS_AS(grid.validate(), ConfigError);
}

#include <cmath>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "drmkit/drm.hpp"
#include "drmkit/error.hpp"
#include "drmkit/gradcheck.hpp"

using namespace drmkit;
using namespace drmkit::fm;
using namespace drmkit::rm;

namespace {

DatasetSpec four_modes() {
  DatasetSpec spec;
  spec.means = {{2, 0}, {-2, 0}, {0, 2}, {0, -2}};
  spec.stddev = 0.5;
  return spec;
}

DatasetSpec blobs() {
  DatasetSpec spec;
  spec.mode = DatasetSpec::Mode::kGrid;
  spec.side = 8;
  spec.centers = {{2, 2}, {2, 5}, {5, 2}, {5, 5}};
  return spec;
}

TrunkConfig vec_trunk(std::size_t hidden = 32) {
  TrunkConfig cfg;
  cfg.state_dim = 2;
  cfg.num_conditions = 4;
  cfg.hidden = hidden;
  cfg.blocks = 6;
  cfg.time_features = 8;
  cfg.cond_dim = 4;
  return cfg;
}

TrunkConfig grid_trunk() {
  TrunkConfig cfg = vec_trunk(64);
  cfg.state_dim = 64;
  return cfg;
}

RewardHeadConfig conv_head() {
  RewardHeadConfig head;
  head.kind = RewardHeadConfig::Kind::kConv;
  head.tokens = 16;  // 64 / 16 = 4 features per token
  head.proj = 8;
  head.height = 8;
  head.width = 8;
  head.conv = {ConvLayer{4, 3, 1, 1}};
  return head;
}

RewardModel random_reward(const TrunkConfig& trunk, const RewardHeadConfig& head, std::uint64_t seed) {
  RngStream rng(seed);
  return build_reward_model(trunk, nullptr, head, kDefaultTruncate, rng);
}

Tensor normals(Shape shape, RngStream& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("drmkit_test_" + name);
}

}  // namespace

TEST_CASE("build_reward_model truncates and copies the trunk") {
  TrunkConfig trunk = vec_trunk();
  RngStream fm_rng(1);
  VelocityModel vel = VelocityModel::create(trunk, fm_rng);
  RngStream rng(2);
  RewardModel rm = build_reward_model(trunk, &vel.params, RewardHeadConfig{}, 3, rng);
  CHECK(rm.blocks == 3);
  CHECK(rm.params.contains("block2.fc2.w"));
  CHECK_FALSE(rm.params.contains("block3.fc1.w"));
  CHECK_FALSE(rm.params.contains("vhead.w"));
  for (const auto& name : rm.params.names()) {
    if (name.rfind("rhead.", 0) == 0) continue;
    CHECK(rm.params.at(name) == vel.params.at(name));
  }

  RewardModel r1 = random_reward(trunk, RewardHeadConfig{}, 3), r2 = random_reward(trunk, RewardHeadConfig{}, 4);
  CHECK(r1.params.at("block0.fc1.w") != r2.params.at("block0.fc1.w"));
  CHECK(r1.params.at("embed.w") != vel.params.at("embed.w"));

  // the head does not depend on the init mode
  RngStream a(5), b(5);
  RewardModel pre = build_reward_model(trunk, &vel.params, RewardHeadConfig{}, 3, a);
  RewardModel rnd = build_reward_model(trunk, nullptr, RewardHeadConfig{}, 3, b);
  CHECK(pre.params.at("rhead.proj.w") == rnd.params.at("rhead.proj.w"));

  // architecture mismatch names both shapes
  TrunkConfig wide = vec_trunk(48);
  RngStream c(6);
  try {
    build_reward_model(wide, &vel.params, RewardHeadConfig{}, 3, c);
    FAIL("expected mismatch");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[32") != std::string::npos);
    CHECK(msg.find("48]") != std::string::npos);
  }
  CHECK_THROWS_AS(build_reward_model(trunk, nullptr, RewardHeadConfig{}, 6, c), ConfigError);
}

TEST_CASE("head geometry validation") {
  RewardHeadConfig head = conv_head();
  CHECK_NOTHROW(head.validate(64));
  CHECK_THROWS_AS(head.validate(60), ConfigError);  // 60 not divisible into 16 tokens
  RewardHeadConfig bad = head;
  bad.proj = 6;
  CHECK_THROWS_AS(bad.validate(64), ConfigError);
  bad = head;
  bad.height = 4;  // 4 x 8 != 4 * 16
  CHECK_THROWS_AS(bad.validate(64), ConfigError);
  bad = head;
  bad.conv = {ConvLayer{4, 3, 2, 0}};  // (8 - 3) / 2 not integral
  CHECK_THROWS_AS(bad.validate(64), ConfigError);
  // L * d_p = h * w * d_p / 4
  CHECK(head.tokens * head.proj == head.height * head.width * (head.proj / 4));
}

TEST_CASE("reward_forward returns one finite score per row") {
  RngStream rng(7);
  RewardModel vec = random_reward(vec_trunk(), RewardHeadConfig{}, 8);
  RewardModel grid = random_reward(grid_trunk(), conv_head(), 9);
  std::vector<int> conds = {0, 1, 2, 3, 0};
  std::vector<double> ts = {0.0, 0.2, 0.4, 0.6, 0.75};
  const auto sv = score_batch(vec, normals({5, 2}, rng), ts, conds);
  const auto sg = score_batch(grid, normals({5, 64}, rng), ts, conds);
  CHECK(sv.size() == 5);
  CHECK(sg.size() == 5);
  for (double s : sv) CHECK(std::isfinite(s));
  for (double s : sg) CHECK(std::isfinite(s));

  // deterministic: same inputs, same scores
  Tensor x = normals({5, 64}, rng);
  CHECK(score_batch(grid, x, ts, conds) == score_batch(grid, x, ts, conds));
  // rows are scored independently
  const auto all = score_batch(grid, x, 0.3, conds);
  const int one[] = {conds[2]};
  CHECK(score_batch(grid, x.row(2), 0.3, one)[0] == doctest::Approx(all[2]).epsilon(1e-12));
}

TEST_CASE("reward model gradients match finite differences") {
  RngStream rng(10);
  for (int head_kind = 0; head_kind < 2; ++head_kind) {
    const bool conv = head_kind == 1;
    RewardModel model = conv ? random_reward(grid_trunk(), conv_head(), 11) : random_reward(vec_trunk(), {}, 12);
    // move the biases off zero so relu kinks are not hit exactly
    for (auto& [name, p] : model.params) {
      for (auto& v : p.value.data()) v += 0.01 * rng.normal();
    }
    const std::size_t d = model.trunk.state_dim;
    Tensor win = normals({4, d}, rng), lose = normals({4, d}, rng);
    std::vector<double> t = {0.1, 0.3, 0.5, 0.7};
    std::vector<int> conds = {0, 1, 2, 3};
    // single-score path and the end-to-end Bradley-Terry loss
    const double e1 = ad::param_grad_check(
        [&](ad::ParamBinder& bind) {
          return ad::sum(reward_forward(bind, model, bind.tape().constant(win), t, conds));
        },
        model.params, rng, 6);
    const double e2 = ad::param_grad_check(
        [&](ad::ParamBinder& bind) {
          ad::Var sw = reward_forward(bind, model, bind.tape().constant(win), t, conds);
          ad::Var sl = reward_forward(bind, model, bind.tape().constant(lose), t, conds);
          return ad::scale(ad::mean(ad::log_sigmoid(ad::sub(sw, sl))), -1.0);
        },
        model.params, rng, 6);
    MESSAGE(std::string(conv ? "conv" : "mlp") << " head: " << e1 << " / " << e2);
    CHECK(e1 < 1e-5);
    CHECK(e2 < 1e-5);
  }
}

TEST_CASE("bt_loss values and properties") {
  CHECK(std::abs(bt_loss(0.3, 0.3) - std::log(2.0)) < 1e-12);
  CHECK(bt_loss(2, 0) == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-14));
  CHECK(bt_loss(2, 0) == doctest::Approx(0.1269280).epsilon(1e-6));
  CHECK(bt_loss(800, 0) >= 0.0);
  CHECK(bt_loss(0, 800) == doctest::Approx(800.0));
  double prev = bt_loss(-10, 0);
  for (double m = -9.5; m <= 10; m += 0.5) {
    const double cur = bt_loss(m, 0);
    CHECK(cur < prev);
    prev = cur;
  }
  RngStream rng(13);
  for (int i = 0; i < 100000; ++i) {
    const double a = 5 * rng.normal(), b = 5 * rng.normal(), c = 5 * rng.normal();
    CHECK(bt_loss(a, b) + bt_loss(b, a) >= 2 * std::log(2.0));
    if (i % 100 == 0) CHECK(bt_loss(a + c, b + c) == doctest::Approx(bt_loss(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("oracle rewards") {
  DatasetSpec spec = four_modes();
  const double win[] = {2, 0}, lose[] = {3, 1};
  CHECK(oracle_reward(spec, win, 0) == 0.0);
  CHECK(oracle_reward(spec, lose, 0) == -2.0);

  DatasetSpec origin = four_modes();
  origin.means[0] = {0, 0};
  const double zero[] = {0, 0}, ones[] = {1, 1};
  CHECK(oracle_reward(origin, zero, 0) > oracle_reward(origin, ones, 0));

  // grid: the ideal blob beats a blurred or noisy copy
  DatasetSpec grid = blobs();
  const double mid = 0.5 * (grid.sharpness_min + grid.sharpness_max);
  Tensor ideal = render_blob(grid, 1, mid);
  Tensor noisy = ideal;
  RngStream rng(14);
  for (auto& v : noisy.data()) v += 0.3 * rng.normal();
  CHECK(oracle_reward(grid, ideal.data(), 1) > oracle_reward(grid, noisy.data(), 1));
  CHECK(oracle_reward(grid, ideal.data(), 1) > oracle_reward(grid, render_blob(grid, 1, 0.15).data(), 1));
  CHECK(oracle_reward(grid, ideal.data(), 1) > oracle_reward(grid, ideal.data(), 2));
  CHECK_THROWS_AS(oracle_reward(grid, win, 0), ShapeError);
}

TEST_CASE("synth_preferences labels and flips") {
  DatasetSpec spec = four_modes();
  SynthConfig cfg;
  cfg.flip_p = 0.0;
  PreferenceDataset clean = synth_preferences(spec, nullptr, 2000, cfg, RngStream(15));
  REQUIRE(clean.size() == 2000);
  for (std::size_t j = 0; j < clean.size(); ++j) {
    CHECK(clean[j].condition == static_cast<int>(j % 4));
    CHECK(oracle_reward(spec, clean[j].win.data(), clean[j].condition) >=
          oracle_reward(spec, clean[j].lose.data(), clean[j].condition));
  }

  cfg.flip_p = 0.1;
  PreferenceDataset noisy = synth_preferences(spec, nullptr, 10000, cfg, RngStream(15));
  int flipped = 0;
  for (const auto& tr : noisy) {
    if (oracle_reward(spec, tr.win.data(), tr.condition) < oracle_reward(spec, tr.lose.data(), tr.condition)) ++flipped;
  }
  CHECK(std::abs(flipped / 10000.0 - 0.1) < 0.01);

  // same candidates, only the labels differ
  CHECK((noisy[0].win == clean[0].win || noisy[0].win == clean[0].lose));

  cfg.flip_p = 0.5;
  CHECK_THROWS_AS(synth_preferences(spec, nullptr, 10, cfg, RngStream(1)), ConfigError);
  cfg.flip_p = 0.0;
  cfg.source = SynthConfig::Source::kModel;
  CHECK_THROWS_AS(synth_preferences(spec, nullptr, 10, cfg, RngStream(1)), ConfigError);

  RngStream mr(16);
  VelocityModel model = VelocityModel::create(vec_trunk(), mr);
  cfg.sample_steps = 5;
  PreferenceDataset sampled = synth_preferences(spec, &model, 300, cfg, RngStream(17));
  CHECK(sampled.size() == 300);
  for (const auto& tr : sampled) {
    CHECK(tr.win.all_finite());
    CHECK(oracle_reward(spec, tr.win.data(), tr.condition) >= oracle_reward(spec, tr.lose.data(), tr.condition));
  }
  CHECK(synth_preferences(spec, &model, 300, cfg, RngStream(17))[123].win == sampled[123].win);
}

TEST_CASE("preference JSONL round trip") {
  SynthConfig cfg;
  PreferenceDataset data = synth_preferences(blobs(), nullptr, 25, cfg, RngStream(18));
  const auto path = temp_path("prefs.jsonl");
  write_preferences(data, path);
  PreferenceDataset back = read_preferences(path);
  REQUIRE(back.size() == data.size());
  for (std::size_t j = 0; j < data.size(); ++j) {
    CHECK(back[j].win == data[j].win);
    CHECK(back[j].lose == data[j].lose);
    CHECK(back[j].condition == data[j].condition);
  }
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"win\": [1, 2], \"lose\": [1]}\n";
  }
  try {
    read_preferences(path);
    FAIL("expected parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(":26:") != std::string::npos);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_preferences(path), ConfigError);
}

TEST_CASE("score_pair corruption semantics") {
  RewardModel model = random_reward(grid_trunk(), conv_head(), 19);
  SynthConfig cfg;
  PreferenceDataset data = synth_preferences(blobs(), nullptr, 4, cfg, RngStream(20));
  RngStream r(21);
  auto [sw, sl] = score_pair(model, data[0], 0.0, r);
  const int conds[] = {data[0].condition};
  CHECK(sw == score_batch(model, data[0].win.reshaped({1, 64}), 0.0, conds)[0]);
  CHECK(sl == score_batch(model, data[0].lose.reshaped({1, 64}), 0.0, conds)[0]);

  // identical input and identical draw on both sides
  RngStream a(22), b(22);
  Tensor xa = corrupt(data[1].win, 0.5, a), xb = corrupt(data[1].win, 0.5, b);
  const int c1[] = {data[1].condition};
  CHECK(score_batch(model, xa.reshaped({1, 64}), 0.5, c1) == score_batch(model, xb.reshaped({1, 64}), 0.5, c1));

  // same t on both sides, independent draws
  RngStream c(23);
  PreferenceTriplet same{data[2].win, data[2].win, data[2].condition};
  auto [s1, s2] = score_pair(model, same, 0.5, c);
  CHECK(s1 != s2);
}

TEST_CASE("eval_accuracy baselines") {
  DatasetSpec spec = four_modes();
  SynthConfig cfg;
  cfg.flip_p = 0.0;
  PreferenceDataset data = synth_preferences(spec, nullptr, 1000, cfg, RngStream(24));

  Scorer oracle = [&spec](const Tensor& x, double, std::span<const int> c) { return oracle_rewards(spec, x, c); };
  CHECK(eval_accuracy(oracle, data, 0.0, RngStream(25)) == 1.0);
  // invariant under a strictly increasing transform of the scores
  Scorer squashed = [&](const Tensor& x, double t, std::span<const int> c) {
    auto s = oracle(x, t, c);
    for (auto& v : s) v = std::atan(v) * 3 + 1;
    return s;
  };
  CHECK(eval_accuracy(squashed, data, 0.4, RngStream(26)) == eval_accuracy(oracle, data, 0.4, RngStream(26)));

  Scorer coin = [](const Tensor& x, double, std::span<const int>) {
    std::vector<double> s(x.shape()[0]);
    RngStream r(static_cast<std::uint64_t>(std::abs(x[0]) * 1e9));
    for (auto& v : s) v = r.normal();
    return s;
  };
  CHECK(std::abs(eval_accuracy(coin, data, 0.0, RngStream(27)) - 0.5) < 0.05);

  Scorer constant = [](const Tensor& x, double, std::span<const int>) { return std::vector<double>(x.shape()[0], 1.0); };
  CHECK(eval_accuracy(constant, data, 0.0, RngStream(28)) == 0.5);
  CHECK_THROWS_AS(eval_accuracy(constant, PreferenceDataset{}, 0.0, RngStream(1)), ConfigError);

  RewardModel model = random_reward(vec_trunk(), {}, 29);
  const double acc = eval_accuracy(model, data, 0.0, RngStream(30));
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_CASE("train_drm learns clean preferences deterministically") {
  DatasetSpec spec = four_modes();
  SynthConfig cfg;
  cfg.flip_p = 0.0;
  PreferenceDataset train = synth_preferences(spec, nullptr, 10000, cfg, RngStream(31));
  PreferenceDataset held = synth_preferences(spec, nullptr, 1000, cfg, RngStream(32));
  // clean inputs only: the separability floor is a property of the t = 0 task
  DrmTrainConfig tc;
  tc.t_max = 0.0;
  tc.seed = 33;
  RewardModel model = random_reward(vec_trunk(), {}, 34);
  RewardModel replay = model;
  const auto curve = train_drm(model, train, tc);
  CHECK(curve.size() == (10000 + tc.batch - 1) / tc.batch);
  const double acc0 = eval_accuracy(model, held, 0.0, RngStream(35));
  MESSAGE("held-out accuracy at t=0 after one epoch: " << acc0);
  CHECK(acc0 > 0.9);

  // scores react to t once the model has seen noisy inputs
  DrmTrainConfig noisy = tc;
  noisy.t_max = 0.75;
  train_drm(model, PreferenceDataset(train.begin(), train.begin() + 640), noisy);
  const auto& tr = held.front();
  const int c[] = {tr.condition};
  CHECK(score_batch(model, tr.win.reshaped({1, 2}), 0.0, c) != score_batch(model, tr.win.reshaped({1, 2}), 0.5, c));

  // seed replay
  PreferenceDataset small(train.begin(), train.begin() + 500);
  RewardModel a = replay, b = replay;
  CHECK(train_drm(a, small, tc) == train_drm(b, small, tc));
  CHECK(a.params.same_values(b.params));

  DrmTrainConfig wild = tc;
  wild.lr = 1e150;
  RewardModel c2 = replay;
  CHECK_THROWS_AS(train_drm(c2, small, wild), NumericError);
}

TEST_CASE("pretrained trunk trains at least as well as a random one") {
  DatasetSpec spec = four_modes();
  TrunkConfig trunk = vec_trunk(64);
  FmTrainConfig fc;
  fc.steps = 600;
  fc.batch = 128;
  fc.seed = 36;
  FmTrainResult fm = train_fm(spec, trunk, fc);

  SynthConfig cfg;
  PreferenceDataset train = synth_preferences(spec, nullptr, 4000, cfg, RngStream(37));
  DrmTrainConfig tc;
  tc.seed = 38;
  RngStream a(39), b(39);
  RewardModel pre = build_reward_model(trunk, &fm.model.params, {}, 3, a);
  RewardModel rnd = build_reward_model(trunk, nullptr, {}, 3, b);
  const auto lp = train_drm(pre, train, tc);
  const auto lr = train_drm(rnd, train, tc);
  auto tail = [](const std::vector<double>& c) {
    double s = 0.0;
    for (std::size_t i = c.size() - 10; i < c.size(); ++i) s += c[i] / 10.0;
    return s;
  };
  MESSAGE("final loss pretrained " << tail(lp) << ", random " << tail(lr));
  CHECK(tail(lp) <= tail(lr));
}

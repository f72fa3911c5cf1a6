#include <algorithm>
#include <cmath>
#include <string>

#include "drmkit/drm.hpp"
#include "drmkit/error.hpp"

namespace drmkit::rm {
namespace {

Tensor gaussian(Shape shape, double std, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = std * rng.normal();
  return t;
}

std::string conv_name(std::size_t i, const char* leaf) { return "rhead.conv" + std::to_string(i) + "." + leaf; }

}  // namespace

void RewardHeadConfig::validate(std::size_t hidden) const {
  if (proj == 0) throw ConfigError("reward head projection width must be positive");
  if (kind == Kind::kMlp) return;
  if (tokens == 0 || hidden % tokens != 0) {
    throw ConfigError("trunk width " + std::to_string(hidden) + " is not divisible into " + std::to_string(tokens) +
                      " tokens");
  }
  if (proj % 4 != 0) throw ConfigError("reward head projection width must be divisible by 4");
  if (height * width != 4 * tokens) {
    throw ConfigError("reward head map " + std::to_string(height) + "x" + std::to_string(width) +
                      " must hold 4 positions per token (" + std::to_string(4 * tokens) + ")");
  }
  if (conv.empty()) throw ConfigError("reward head needs at least one conv layer");
  std::size_t h = height, w = width;
  for (const auto& layer : conv) {
    if (layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0) {
      throw ConfigError("conv layers need positive channels, kernel and stride");
    }
    const std::size_t ph = h + 2 * layer.padding, pw = w + 2 * layer.padding;
    if (layer.kernel > ph || layer.kernel > pw || (ph - layer.kernel) % layer.stride != 0 ||
        (pw - layer.kernel) % layer.stride != 0) {
      throw ConfigError("conv layer does not tile a " + std::to_string(h) + "x" + std::to_string(w) + " map");
    }
    h = (ph - layer.kernel) / layer.stride + 1;
    w = (pw - layer.kernel) / layer.stride + 1;
  }
}

RewardModel build_reward_model(const fm::TrunkConfig& trunk, const ParamSet* pretrained,
                               const RewardHeadConfig& head, std::size_t truncate, RngStream& rng) {
  if (truncate >= trunk.blocks) {
    throw ConfigError("cannot truncate " + std::to_string(truncate) + " of " + std::to_string(trunk.blocks) +
                      " trunk blocks");
  }
  head.validate(trunk.hidden);
  RewardModel model{trunk, trunk.blocks - truncate, head, {}};
  // The layout is drawn in both modes so the head initialisation does not
  // depend on the mode.
  model.params = fm::init_trunk_params(trunk, model.blocks, rng);
  if (pretrained != nullptr) {
    check_layout(*pretrained, model.params);
    for (const auto& name : model.params.names()) model.params.value(name) = pretrained->at(name);
  }

  const double hidden = static_cast<double>(trunk.hidden);
  if (head.kind == RewardHeadConfig::Kind::kMlp) {
    model.params.add("rhead.proj.w", gaussian({trunk.hidden, head.proj}, std::sqrt(1.0 / hidden), rng));
    model.params.add("rhead.proj.b", Tensor({head.proj}));
    model.params.add("rhead.out.w", gaussian({head.proj, 1}, std::sqrt(1.0 / static_cast<double>(head.proj)), rng));
    model.params.add("rhead.out.b", Tensor({1}));
    return model;
  }
  const std::size_t d = trunk.hidden / head.tokens;
  model.params.add("rhead.proj.w", gaussian({d, head.proj}, std::sqrt(1.0 / static_cast<double>(d)), rng));
  model.params.add("rhead.proj.b", Tensor({head.proj}));
  std::size_t channels = head.proj / 4;
  for (std::size_t i = 0; i < head.conv.size(); ++i) {
    const auto& layer = head.conv[i];
    const double fan_in = static_cast<double>(channels * layer.kernel * layer.kernel);
    model.params.add(conv_name(i, "k"), gaussian({layer.out_channels, channels, layer.kernel, layer.kernel},
                                                 std::sqrt(2.0 / fan_in), rng));
    model.params.add(conv_name(i, "b"), Tensor({layer.out_channels}));
    channels = layer.out_channels;
  }
  model.params.add("rhead.out.w", gaussian({channels, 1}, std::sqrt(1.0 / static_cast<double>(channels)), rng));
  model.params.add("rhead.out.b", Tensor({1}));
  return model;
}

ad::Var reward_forward(ad::ParamBinder& bind, const RewardModel& model, ad::Var x, std::span<const double> t,
                       std::span<const int> conditions) {
  const auto& head = model.head;
  ad::Var h = fm::trunk_forward(bind, model.trunk, x, t, conditions, model.blocks);
  if (head.kind == RewardHeadConfig::Kind::kMlp) {
    ad::Var p = ad::relu(ad::affine(h, bind("rhead.proj.w"), bind("rhead.proj.b")));
    return ad::affine(p, bind("rhead.out.w"), bind("rhead.out.b"));
  }
  const std::size_t m = x.shape().at(0);
  const std::size_t d = model.trunk.hidden / head.tokens;
  // tokens [m*L, d] -> projected [m*L, d_p] -> h x w x d_p/4 map, channels first
  ad::Var tokens = ad::reshape(h, {m * head.tokens, d});
  ad::Var proj = ad::affine(tokens, bind("rhead.proj.w"), bind("rhead.proj.b"));
  const std::size_t channels = head.proj / 4;
  ad::Var map = ad::reshape(proj, {m, head.height * head.width, channels});
  map = ad::reshape(ad::transpose(map), {m, channels, head.height, head.width});
  for (std::size_t i = 0; i < head.conv.size(); ++i) {
    const auto& layer = head.conv[i];
    map = ad::conv2d(map, bind(conv_name(i, "k")), layer.stride, layer.padding);
    map = ad::relu(ad::add_channel_bias(map, bind(conv_name(i, "b"))));
  }
  return ad::affine(ad::mean_pool2d(map), bind("rhead.out.w"), bind("rhead.out.b"));
}

std::vector<double> score_batch(const RewardModel& model, const Tensor& x, std::span<const double> t,
                                std::span<const int> conditions) {
  ad::Tape tape;
  ad::ParamBinder bind(tape, model.params, false);
  const Tensor s = reward_forward(bind, model, tape.constant(x), t, conditions).value();
  if (!s.all_finite()) throw NumericError("reward model produced a non-finite score");
  return s.values();
}

std::vector<double> score_batch(const RewardModel& model, const Tensor& x, double t,
                                std::span<const int> conditions) {
  const std::vector<double> ts(x.shape().at(0), t);
  return score_batch(model, x, ts, conditions);
}

double bt_loss(double s_win, double s_lose) {
  const double d = s_win - s_lose;
  return std::max(-d, 0.0) + std::log1p(std::exp(-std::abs(d)));
}

double oracle_reward(const fm::DatasetSpec& spec, std::span<const double> x, int condition) {
  if (x.size() != spec.state_dim()) throw ShapeError("oracle_reward: state size does not match the dataset");
  if (condition < 0 || static_cast<std::size_t>(condition) >= spec.num_conditions()) {
    throw ShapeError("oracle_reward: condition " + std::to_string(condition) + " outside the dataset");
  }
  if (spec.mode == fm::DatasetSpec::Mode::kVector2d) {
    const auto& mu = spec.means[static_cast<std::size_t>(condition)];
    const double dx = x[0] - mu[0], dy = x[1] - mu[1];
    return -(dx * dx + dy * dy);
  }
  const Tensor ideal = fm::render_blob(spec, condition, 0.5 * (spec.sharpness_min + spec.sharpness_max));
  double mse = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mse += (x[i] - ideal[i]) * (x[i] - ideal[i]);
    mean += x[i];
  }
  mse /= static_cast<double>(x.size());
  mean /= static_cast<double>(x.size());
  const auto& c = spec.centers[static_cast<std::size_t>(condition)];
  const std::size_t centre = static_cast<std::size_t>(std::lround(c[0])) * spec.side +
                             static_cast<std::size_t>(std::lround(c[1]));
  return -mse + kSharpnessBonus * (x[centre] - mean);
}

std::vector<double> oracle_rewards(const fm::DatasetSpec& spec, const Tensor& x, std::span<const int> conditions) {
  if (x.rank() != 2 || x.shape()[0] != conditions.size()) {
    throw ShapeError("oracle_rewards: " + shape_str(x.shape()) + " for " + std::to_string(conditions.size()) +
                     " conditions");
  }
  const std::size_t d = x.shape()[1];
  std::vector<double> out(conditions.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = oracle_reward(spec, x.data().subspan(i * d, d), conditions[i]);
  return out;
}

}  // namespace drmkit::rm

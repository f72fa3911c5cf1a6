#include <cmath>
#include <numbers>
#include <string>

#include "drmkit/error.hpp"
#include "drmkit/flowmatch.hpp"

namespace drmkit::fm {
namespace {

Tensor gaussian(Shape shape, double std, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = std * rng.normal();
  return t;
}

std::string block_name(std::size_t i, const char* leaf) { return "block" + std::to_string(i) + "." + leaf; }

Tensor one_hot(std::span<const int> conditions, std::size_t count) {
  Tensor out({conditions.size(), count});
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    const int c = conditions[i];
    if (c < 0 || static_cast<std::size_t>(c) >= count) {
      throw ShapeError("condition " + std::to_string(c) + " outside [0, " + std::to_string(count) + ")");
    }
    out.at(i, static_cast<std::size_t>(c)) = 1.0;
  }
  return out;
}

}  // namespace

ParamSet init_trunk_params(const TrunkConfig& cfg, std::size_t blocks, RngStream& rng) {
  const std::size_t in = cfg.state_dim + cfg.time_features + cfg.cond_dim;
  const double h = static_cast<double>(cfg.hidden);
  ParamSet ps;
  ps.add("cond.table", gaussian({cfg.num_conditions, cfg.cond_dim}, 1.0, rng));
  ps.add("embed.w", gaussian({in, cfg.hidden}, std::sqrt(2.0 / static_cast<double>(in)), rng));
  ps.add("embed.b", Tensor({cfg.hidden}));
  // Residual branches start small so depth does not inflate activations.
  const double branch_scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(cfg.blocks, 1)));
  for (std::size_t i = 0; i < blocks; ++i) {
    ps.add(block_name(i, "fc1.w"), gaussian({cfg.hidden, cfg.hidden}, std::sqrt(2.0 / h), rng));
    ps.add(block_name(i, "fc1.b"), Tensor({cfg.hidden}));
    ps.add(block_name(i, "fc2.w"), gaussian({cfg.hidden, cfg.hidden}, branch_scale * std::sqrt(1.0 / h), rng));
    ps.add(block_name(i, "fc2.b"), Tensor({cfg.hidden}));
  }
  return ps;
}

Tensor time_features(std::span<const double> t, std::size_t count) {
  if (count % 2 != 0) throw ConfigError("time feature count must be even");
  Tensor out({t.size(), count});
  const std::size_t pairs = count / 2;
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t f = 0; f < pairs; ++f) {
      const double w = std::numbers::pi * std::ldexp(1.0, static_cast<int>(f) - 1);
      out.at(i, 2 * f) = std::sin(w * t[i]);
      out.at(i, 2 * f + 1) = std::cos(w * t[i]);
    }
  }
  return out;
}

ad::Var trunk_forward(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, std::span<const double> t,
                      std::span<const int> conditions, std::size_t blocks) {
  auto& tape = bind.tape();
  const std::size_t m = x.shape().at(0);
  if (x.shape().size() != 2 || x.shape()[1] != cfg.state_dim) {
    throw ShapeError("trunk input " + shape_str(x.shape()) + " does not match state dimension " +
                     std::to_string(cfg.state_dim));
  }
  if (t.size() != m || conditions.size() != m) {
    throw ShapeError("trunk: " + std::to_string(m) + " rows but " + std::to_string(t.size()) + " times and " +
                     std::to_string(conditions.size()) + " conditions");
  }
  ad::Var cond = ad::matmul(tape.constant(one_hot(conditions, cfg.num_conditions)), bind("cond.table"));
  ad::Var parts[] = {x, tape.constant(time_features(t, cfg.time_features)), cond};
  ad::Var h = ad::affine(ad::concat(parts, 1), bind("embed.w"), bind("embed.b"));
  for (std::size_t i = 0; i < blocks; ++i) {
    ad::Var inner = ad::relu(ad::affine(h, bind(block_name(i, "fc1.w")), bind(block_name(i, "fc1.b"))));
    h = ad::add(h, ad::affine(inner, bind(block_name(i, "fc2.w")), bind(block_name(i, "fc2.b"))));
  }
  return h;
}

VelocityModel VelocityModel::create(const TrunkConfig& cfg, RngStream& rng) {
  if (cfg.blocks < 4) throw ConfigError("velocity trunk needs at least 4 blocks");
  VelocityModel model{cfg, init_trunk_params(cfg, cfg.blocks, rng)};
  model.params.add("vhead.w", gaussian({cfg.hidden, cfg.state_dim}, 0.1 / std::sqrt(static_cast<double>(cfg.hidden)), rng));
  model.params.add("vhead.b", Tensor({cfg.state_dim}));
  return model;
}

ad::Var velocity_forward(ad::ParamBinder& bind, const TrunkConfig& cfg, ad::Var x, std::span<const double> t,
                         std::span<const int> conditions) {
  ad::Var h = trunk_forward(bind, cfg, x, t, conditions, cfg.blocks);
  return ad::affine(ad::relu(h), bind("vhead.w"), bind("vhead.b"));
}

Tensor velocity(const VelocityModel& model, const Tensor& x, std::span<const double> t,
                std::span<const int> conditions) {
  ad::Tape tape;
  ad::ParamBinder bind(tape, model.params, false);
  return velocity_forward(bind, model.cfg, tape.constant(x), t, conditions).value();
}

Tensor velocity(const VelocityModel& model, const Tensor& x, double t, std::span<const int> conditions) {
  const std::vector<double> ts(x.shape().at(0), t);
  return velocity(model, x, ts, conditions);
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate: t = " + std::to_string(t) + " outside [0, 1]");
  if (x0.shape() != x1.shape()) {
    throw ShapeError("interpolate: shapes " + shape_str(x0.shape()) + " and " + shape_str(x1.shape()) + " differ");
  }
  // Endpoints are returned exactly rather than through the blend.
  if (t == 0.0) return x0;
  if (t == 1.0) return x1;
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

namespace {

Tensor interpolate_rows(const Tensor& x0, const Tensor& x1, std::span<const double> t) {
  if (x0.shape() != x1.shape() || x0.rank() != 2 || t.size() != x0.shape()[0]) {
    throw ShapeError("fm_loss: x0 " + shape_str(x0.shape()) + ", x1 " + shape_str(x1.shape()) + ", " +
                     std::to_string(t.size()) + " times");
  }
  const std::size_t d = x0.shape()[1];
  Tensor xt(x0.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const Tensor r = interpolate(x0.row(i), x1.row(i), t[i]);
    for (std::size_t j = 0; j < d; ++j) xt.at(i, j) = r[j];
  }
  return xt;
}

Tensor target_velocity(const Tensor& x0, const Tensor& x1) {
  Tensor v(x0.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x1[i] - x0[i];
  return v;
}

}  // namespace

double fm_loss(const VelocityFn& v, const Tensor& x0, const Tensor& x1, std::span<const double> t,
               std::span<const int> conditions) {
  const Tensor xt = interpolate_rows(x0, x1, t);
  const Tensor pred = v(xt, t, conditions);
  const Tensor target = target_velocity(x0, x1);
  if (pred.shape() != target.shape()) {
    throw ShapeError("fm_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

ad::Var fm_loss(ad::ParamBinder& bind, const TrunkConfig& cfg, const Tensor& x0, const Tensor& x1,
                std::span<const double> t, std::span<const int> conditions) {
  auto& tape = bind.tape();
  const Tensor xt = interpolate_rows(x0, x1, t);
  ad::Var pred = velocity_forward(bind, cfg, tape.constant(xt), t, conditions);
  return ad::mse(pred, tape.constant(target_velocity(x0, x1)));
}

FmTrainResult train_fm(const DatasetSpec& spec, const TrunkConfig& trunk, const FmTrainConfig& cfg) {
  spec.validate();
  if (trunk.state_dim != spec.state_dim() || trunk.num_conditions != spec.num_conditions()) {
    throw ConfigError("trunk config does not match the dataset's state dimension or condition count");
  }
  RngStream root(cfg.seed, 0x464d);
  RngStream init_rng = root.split(0);
  FmTrainResult result{VelocityModel::create(trunk, init_rng), {}};
  result.loss_curve.reserve(cfg.steps);
  const AdamConfig adam{.lr = cfg.lr};
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    RngStream rng = root.split(step + 1);
    DatasetBatch batch = generate_dataset_batch(spec, cfg.batch, rng);
    Tensor x1(batch.states.shape());
    for (auto& v : x1.data()) v = rng.normal();
    std::vector<double> t(cfg.batch);
    for (auto& v : t) v = rng.uniform() * (1.0 - 1e-12);  // keep t in [0, 1)

    ad::Tape tape;
    ad::ParamBinder bind(tape, result.model.params, true);
    ad::Var loss = fm_loss(bind, trunk, batch.states, x1, t, batch.conditions);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw NumericError("flow-matching loss diverged at step " + std::to_string(step));
    result.loss_curve.push_back(value);
    tape.backward(loss);
    adam_step(result.model.params, tape.param_grads(result.model.params), adam);
  }
  return result;
}

}  // namespace drmkit::fm

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "drmkit/align.hpp"
#include "drmkit/drm.hpp"
#include "drmkit/error.hpp"
#include "drmkit/flowmatch.hpp"
#include "drmkit/harness.hpp"
#include "drmkit/inference.hpp"

namespace drmkit::harness {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream tags: each consumer of randomness derives from RngStream(seed, tag).
constexpr std::uint64_t kInitTag = 7;
constexpr std::uint64_t kTrainPrefsTag = 1;
constexpr std::uint64_t kHeldPrefsTag = 2;
constexpr std::uint64_t kEvalTag = 3;
constexpr std::uint64_t kAlignTag = 0x414c;
constexpr std::uint64_t kAlignEvalTag = 0x4556;
constexpr std::uint64_t kSweepTag = 0x534d;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string expand_seed(std::string path, std::uint64_t seed) {
  const std::string tok = "{seed}";
  for (auto p = path.find(tok); p != std::string::npos; p = path.find(tok)) path.replace(p, tok.size(), std::to_string(seed));
  return path;
}

class Stopwatch {
 public:
  explicit Stopwatch(bool on) : on_(on), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    if (!on_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool on_;
  std::chrono::steady_clock::time_point start_;
};

// Output directory bookkeeping shared by the runners.
struct Run {
  const Config& cfg;
  std::string experiment;
  fs::path out;
  std::vector<std::uint64_t> seeds;
  bool record_wallclock = false;
  std::vector<std::string> files;

  void write(const std::string& rel, std::string_view bytes) {
    write_atomic(out / rel, bytes);
    if (std::find(files.begin(), files.end(), rel) == files.end()) files.push_back(rel);
  }
  void metrics(const std::string& name, const CsvWriter& csv) { write("metrics/" + name + ".csv", csv.text()); }
  void checkpoint(const std::string& name, const ParamSet& params) {
    const std::string rel = "checkpoints/" + name + ".json";
    save_paramset(params, out / rel);
    if (std::find(files.begin(), files.end(), rel) == files.end()) files.push_back(rel);
  }
};

// ---- config sections ----

std::vector<std::array<double, 2>> pairs(const Config& cfg, const std::string& key,
                                         const std::vector<std::array<double, 2>>& fallback) {
  if (!cfg.has(key)) return fallback;
  std::vector<std::array<double, 2>> out;
  std::stringstream ss(cfg.str(key));
  std::string item;
  while (std::getline(ss, item, ';')) {
    Config one = Config::parse("v = " + item, cfg.origin());
    const auto v = one.reals("v", {});
    if (v.size() != 2) throw ConfigError(cfg.origin() + ": '" + key + "' expects `x,y; x,y; ...`");
    out.push_back({v[0], v[1]});
  }
  if (out.empty()) throw ConfigError(cfg.origin() + ": '" + key + "' must not be empty");
  return out;
}

fm::DatasetSpec dataset(const Config& cfg) {
  fm::DatasetSpec spec;
  const std::string task = cfg.choice("data.task", {"vector2d", "grid"}, "vector2d");
  if (task == "vector2d") {
    spec.means = pairs(cfg, "data.means", {{2, 0}, {-2, 0}, {0, 2}, {0, -2}});
    spec.stddev = cfg.real("data.stddev", 0.5);
  } else {
    spec.mode = fm::DatasetSpec::Mode::kGrid;
    spec.side = cfg.count("data.side", 8);
    spec.centers = pairs(cfg, "data.centers", {{2, 2}, {2, 5}, {5, 2}, {5, 5}});
    spec.sharpness_min = cfg.real("data.sharpness_min", spec.sharpness_min);
    spec.sharpness_max = cfg.real("data.sharpness_max", spec.sharpness_max);
  }
  spec.validate();
  return spec;
}

fm::TrunkConfig trunk(const Config& cfg, const fm::DatasetSpec& spec) {
  fm::TrunkConfig t;
  t.state_dim = spec.state_dim();
  t.num_conditions = spec.num_conditions();
  t.hidden = cfg.count("model.hidden", t.hidden);
  t.blocks = cfg.count("model.blocks", t.blocks);
  t.time_features = cfg.count("model.time_features", t.time_features);
  t.cond_dim = cfg.count("model.cond_dim", t.cond_dim);
  return t;
}

struct DrmShape {
  rm::RewardHeadConfig head;
  std::size_t truncate = rm::kDefaultTruncate;
};

DrmShape drm_shape(const Config& cfg, const fm::TrunkConfig& t) {
  DrmShape s;
  const std::string kind = cfg.choice("drm.head", {"mlp", "conv"}, "mlp");
  s.head.kind = kind == "conv" ? rm::RewardHeadConfig::Kind::kConv : rm::RewardHeadConfig::Kind::kMlp;
  s.head.proj = cfg.count("drm.head.proj", s.head.proj);
  if (s.head.kind == rm::RewardHeadConfig::Kind::kConv) {
    s.head.tokens = cfg.count("drm.head.tokens", s.head.tokens);
    s.head.height = cfg.count("drm.head.height", s.head.height);
    s.head.width = cfg.count("drm.head.width", s.head.width);
    if (cfg.has("drm.head.conv")) {
      // out_channels:kernel:stride:padding per layer, comma separated
      s.head.conv.clear();
      std::stringstream ss(cfg.str("drm.head.conv"));
      std::string layer;
      while (std::getline(ss, layer, ',')) {
        std::array<std::size_t, 4> v{};
        char c1 = 0, c2 = 0, c3 = 0;
        std::stringstream ls(layer);
        if (!(ls >> v[0] >> c1 >> v[1] >> c2 >> v[2] >> c3 >> v[3]) || c1 != ':' || c2 != ':' || c3 != ':') {
          throw ConfigError(cfg.origin() + ": 'drm.head.conv' expects out:kernel:stride:padding per layer");
        }
        s.head.conv.push_back({v[0], v[1], v[2], v[3]});
      }
    }
  }
  s.truncate = cfg.count("drm.truncate", s.truncate);
  s.head.validate(t.hidden);
  if (s.truncate >= t.blocks) throw ConfigError(cfg.origin() + ": drm.truncate must leave at least one trunk block");
  return s;
}

rm::SynthConfig prefs(const Config& cfg) {
  rm::SynthConfig s;
  const std::string src = cfg.choice("pref.source", {"perturbed", "model"}, "perturbed");
  s.source = src == "model" ? rm::SynthConfig::Source::kModel : rm::SynthConfig::Source::kPerturbed;
  s.flip_p = cfg.real("pref.flip_p", s.flip_p);
  if (s.source == rm::SynthConfig::Source::kPerturbed) {
    s.perturb = cfg.real("pref.perturb", s.perturb);
  } else {
    s.sample_steps = cfg.count("pref.sample_steps", s.sample_steps);
    s.sample_a = cfg.real("pref.sample_a", s.sample_a);
  }
  if (!(s.flip_p >= 0.0 && s.flip_p <= 1.0)) throw ConfigError(cfg.origin() + ": pref.flip_p must lie in [0, 1]");
  return s;
}

rm::DrmTrainConfig drm_training(const Config& cfg) {
  rm::DrmTrainConfig d;
  d.t_max = cfg.real("drm.t_max", d.t_max);
  d.epochs = cfg.count("drm.epochs", d.epochs);
  d.batch = cfg.count("drm.batch", d.batch);
  d.lr = cfg.real("drm.lr", d.lr);
  if (d.epochs == 0) throw ConfigError(cfg.origin() + ": drm.epochs must be positive");
  return d;
}

fm::VelocityModel load_fm(const std::string& path, const fm::TrunkConfig& t) {
  RngStream layout_rng(0);
  fm::VelocityModel m = fm::VelocityModel::create(t, layout_rng);
  m.params = load_checkpoint(resolve_path(path), m.params);
  m.params.reset_optimizer();
  return m;
}

rm::RewardModel load_drm(const std::string& path, const fm::TrunkConfig& t, const DrmShape& shape) {
  RngStream layout_rng(0);
  rm::RewardModel m = rm::build_reward_model(t, nullptr, shape.head, shape.truncate, layout_rng);
  m.params = load_checkpoint(resolve_path(path), m.params);
  m.params.reset_optimizer();
  return m;
}

std::size_t held_out_pairs(const Config& cfg, std::size_t minimum) {
  const std::size_t n = cfg.count("eval.pairs", 1000);
  if (n < minimum) {
    throw ConfigError(cfg.origin() + ": eval.pairs must be at least " + std::to_string(minimum) + ", got " +
                      std::to_string(n));
  }
  return n;
}

// Held-out triplets share the training generator but not its stream, and
// carry clean labels.
rm::PreferenceDataset held_out(const fm::DatasetSpec& spec, const fm::VelocityModel* model, std::size_t n,
                               rm::SynthConfig pc, std::uint64_t seed) {
  pc.flip_p = 0.0;
  return rm::synth_preferences(spec, model, n, pc, RngStream(seed, kHeldPrefsTag));
}

// ---- fm-train ----

void run_fm_train(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  fm::FmTrainConfig fc;
  fc.steps = cfg.count("fm.steps", fc.steps);
  fc.batch = cfg.count("fm.batch", fc.batch);
  fc.lr = cfg.real("fm.lr", fc.lr);
  cfg.reject_unused();

  for (auto seed : run.seeds) {
    fc.seed = seed;
    const fm::FmTrainResult r = fm::train_fm(spec, t, fc);
    CsvWriter csv({"step", "loss"});
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) csv.cell(i + 1).cell(r.loss_curve[i]).end_row();
    run.metrics("fm_train_s" + std::to_string(seed), csv);
    run.checkpoint("fm_s" + std::to_string(seed), r.model.params);
  }
}

// ---- drm-train ----

void run_drm_train(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  const auto shape = drm_shape(cfg, t);
  const bool pretrained = cfg.choice("drm.init", {"pretrained", "random"}, "pretrained") == "pretrained";
  const auto pc = prefs(cfg);
  const std::size_t n_train = cfg.count("pref.n", 10000);
  const bool save_prefs = cfg.flag("pref.save", false);
  auto dc = drm_training(cfg);
  const std::size_t n_held = held_out_pairs(cfg, 1);
  const auto ts = cfg.reals("eval.t", {0.0, 0.5, 0.75});
  const bool need_fm = pretrained || pc.source == rm::SynthConfig::Source::kModel;
  const std::string fm_path = need_fm ? cfg.str("fm.checkpoint") : "";
  cfg.reject_unused();

  for (auto seed : run.seeds) {
    const std::string tag = "_s" + std::to_string(seed);
    std::optional<fm::VelocityModel> fm_model;
    if (need_fm) fm_model = load_fm(expand_seed(fm_path, seed), t);
    const fm::VelocityModel* gen = pc.source == rm::SynthConfig::Source::kModel ? &*fm_model : nullptr;
    const auto train = rm::synth_preferences(spec, gen, n_train, pc, RngStream(seed, kTrainPrefsTag));
    const auto held = held_out(spec, gen, n_held, pc, seed);
    if (save_prefs) {
      rm::write_preferences(train, run.out / ("data/prefs_train" + tag + ".jsonl"));
      rm::write_preferences(held, run.out / ("data/prefs_held" + tag + ".jsonl"));
      run.files.push_back("data/prefs_train" + tag + ".jsonl");
      run.files.push_back("data/prefs_held" + tag + ".jsonl");
    }
    RngStream init(seed, kInitTag);
    rm::RewardModel model =
        rm::build_reward_model(t, pretrained ? &fm_model->params : nullptr, shape.head, shape.truncate, init);
    dc.seed = seed;
    const auto curve = rm::train_drm(model, train, dc);

    CsvWriter loss({"batch", "loss"});
    for (std::size_t i = 0; i < curve.size(); ++i) loss.cell(i + 1).cell(curve[i]).end_row();
    run.metrics("drm_train" + tag, loss);
    CsvWriter acc({"t", "n_pairs", "accuracy"});
    for (double tt : ts) {
      acc.cell(tt).cell(held.size()).cell(rm::eval_accuracy(model, held, tt, RngStream(seed, kEvalTag))).end_row();
    }
    run.metrics("drm_eval" + tag, acc);
    run.checkpoint("drm" + tag, model.params);
  }
}

// ---- eval: noise-eval ----

void run_noise_eval(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  const auto shape = drm_shape(cfg, t);
  const auto pc = prefs(cfg);
  const std::size_t n = held_out_pairs(cfg, 1000);
  const auto ts = cfg.reals("eval.t", {0.0, 0.5, 0.75});
  const std::string drm_path = cfg.str("drm.checkpoint");
  const std::string fm_path =
      pc.source == rm::SynthConfig::Source::kModel ? cfg.str("fm.checkpoint") : std::string();
  cfg.reject_unused();

  CsvWriter rows({"seed", "t", "n_pairs", "accuracy"});
  std::vector<std::vector<double>> per_t(ts.size());
  for (auto seed : run.seeds) {
    const rm::RewardModel model = load_drm(expand_seed(drm_path, seed), t, shape);
    std::optional<fm::VelocityModel> gen;
    if (!fm_path.empty()) gen = load_fm(expand_seed(fm_path, seed), t);
    const auto held = held_out(spec, gen ? &*gen : nullptr, n, pc, seed);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const double acc = rm::eval_accuracy(model, held, ts[i], RngStream(seed, kEvalTag));
      per_t[i].push_back(acc);
      rows.cell(static_cast<std::int64_t>(seed)).cell(ts[i]).cell(n).cell(acc).end_row();
    }
  }
  run.metrics("noise_eval", rows);
  CsvWriter summary({"t", "n_pairs", "median_accuracy", "min_accuracy", "max_accuracy", "chance_bound"});
  const double bound = 0.5 + 3.0 * std::sqrt(0.25 / static_cast<double>(n));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto [lo, hi] = std::minmax_element(per_t[i].begin(), per_t[i].end());
    summary.cell(ts[i]).cell(n).cell(median(per_t[i])).cell(*lo).cell(*hi).cell(bound).end_row();
  }
  run.metrics("noise_eval_summary", summary);
}

// ---- eval: init-ablation ----

void run_init_ablation(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  const auto shape = drm_shape(cfg, t);
  const auto pc = prefs(cfg);
  const std::size_t n_train = cfg.count("pref.n", 10000);
  auto dc = drm_training(cfg);
  dc.epochs = cfg.count("ablation.epochs", 3);
  if (dc.epochs == 0) throw ConfigError(cfg.origin() + ": ablation.epochs must be positive");
  const std::size_t n_held = held_out_pairs(cfg, 1);
  const double eval_t = cfg.real("eval.t", 0.0);
  const std::string fm_path = cfg.str("fm.checkpoint");
  cfg.reject_unused();

  CsvWriter rows({"seed", "init", "epoch", "accuracy", "mean_loss"});
  // acc[init][epoch] over seeds
  std::vector<std::vector<std::vector<double>>> acc(2, std::vector<std::vector<double>>(dc.epochs));
  for (auto seed : run.seeds) {
    const fm::VelocityModel fm_model = load_fm(expand_seed(fm_path, seed), t);
    const fm::VelocityModel* gen = pc.source == rm::SynthConfig::Source::kModel ? &fm_model : nullptr;
    const auto train = rm::synth_preferences(spec, gen, n_train, pc, RngStream(seed, kTrainPrefsTag));
    const auto held = held_out(spec, gen, n_held, pc, seed);
    for (int mode = 0; mode < 2; ++mode) {
      // identical init stream, data and shuffle; only the trunk differs
      RngStream init(seed, kInitTag);
      rm::RewardModel model =
          rm::build_reward_model(t, mode == 0 ? &fm_model.params : nullptr, shape.head, shape.truncate, init);
      rm::DrmTrainConfig c = dc;
      c.seed = seed;
      std::vector<double> epoch_acc;
      c.on_epoch = [&](std::size_t) {
        epoch_acc.push_back(rm::eval_accuracy(model, held, eval_t, RngStream(seed, kEvalTag)));
      };
      const auto curve = rm::train_drm(model, train, c);
      const std::size_t per_epoch = curve.size() / dc.epochs;
      for (std::size_t e = 0; e < dc.epochs; ++e) {
        const std::span<const double> slice(curve.data() + e * per_epoch, per_epoch);
        rows.cell(static_cast<std::int64_t>(seed))
            .cell(std::string(mode == 0 ? "pretrained" : "random"))
            .cell(e + 1)
            .cell(epoch_acc[e])
            .cell(mean(slice))
            .end_row();
        acc[mode][e].push_back(epoch_acc[e]);
      }
    }
  }
  run.metrics("init_ablation", rows);
  CsvWriter summary({"epoch", "median_pretrained", "median_random", "pretrained_at_least_random"});
  for (std::size_t e = 0; e < dc.epochs; ++e) {
    std::size_t wins = 0;
    for (std::size_t s = 0; s < run.seeds.size(); ++s) wins += acc[0][e][s] >= acc[1][e][s];
    summary.cell(e + 1).cell(median(acc[0][e])).cell(median(acc[1][e])).cell(wins).end_row();
  }
  run.metrics("init_ablation_summary", summary);
}

// ---- align ----

// Mean oracle reward of the reference target of each condition: the mode
// mean (vector2d) or the mid-sharpness blob (grid).
double oracle_optimum(const fm::DatasetSpec& spec) {
  double total = 0.0;
  const std::size_t c = spec.num_conditions();
  for (std::size_t i = 0; i < c; ++i) {
    if (spec.mode == fm::DatasetSpec::Mode::kVector2d) {
      total += rm::oracle_reward(spec, spec.means[i], static_cast<int>(i));
    } else {
      const Tensor blob =
          fm::render_blob(spec, static_cast<int>(i), 0.5 * (spec.sharpness_min + spec.sharpness_max));
      total += rm::oracle_reward(spec, blob.data(), static_cast<int>(i));
    }
  }
  return total / static_cast<double>(c);
}

void run_align(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  const auto shape = drm_shape(cfg, t);
  align::GrpoConfig g;
  const std::string algo = cfg.choice("align.algo", {"compare", "grpo", "step-grpo"}, "compare");
  g.G = cfg.count("align.G", g.G);
  g.k = cfg.count("align.k", g.k);
  g.eps_clip = cfg.real("align.eps_clip", g.eps_clip);
  g.beta = cfg.real("align.beta", g.beta);
  g.lr = cfg.real("align.lr", g.lr);
  g.a = cfg.real("align.a", g.a);
  g.T = cfg.count("align.T", g.T);
  g.continuation = cfg.choice("align.continuation", {"random", "greedy"}, "random") == "greedy"
                       ? align::GrpoConfig::Continuation::kGreedy
                       : align::GrpoConfig::Continuation::kRandom;
  const std::size_t chains = cfg.count("align.conditions", spec.num_conditions());
  const std::size_t budget = cfg.count("align.iterations", 300);
  const double threshold = cfg.real("align.threshold", 0.8);
  const std::size_t eval_n = cfg.count("align.eval_samples", 256);
  const bool oracle_terminal = cfg.choice("align.terminal_reward", {"drm", "oracle"}, "drm") == "oracle";
  const bool stop = cfg.flag("align.stop_at_threshold", true);
  const bool save_policy = cfg.flag("align.save_policy", false);
  const double optimum = cfg.real("align.oracle_optimum", oracle_optimum(spec));
  const std::string fm_path = cfg.str("fm.checkpoint");
  const std::string drm_path = cfg.str("drm.checkpoint");
  cfg.reject_unused();
  if (algo == "compare" && g.G != g.k) {
    throw ConfigError(cfg.origin() + ": matched compute needs align.G == align.k, got " + std::to_string(g.G) +
                      " and " + std::to_string(g.k));
  }
  if (chains == 0 || budget == 0 || eval_n == 0) {
    throw ConfigError(cfg.origin() + ": align.conditions, align.iterations and align.eval_samples must be positive");
  }
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError(cfg.origin() + ": align.threshold must lie in (0, 1]");

  std::vector<align::GrpoConfig::Algo> algos;
  if (algo != "step-grpo") algos.push_back(align::GrpoConfig::Algo::kGrpo);
  if (algo != "grpo") algos.push_back(align::GrpoConfig::Algo::kStepGrpo);
  for (auto a : algos) {
    align::GrpoConfig c = g;
    c.algo = a;
    c.validate();
  }

  std::vector<int> conds(chains), eval_conds(eval_n);
  for (std::size_t i = 0; i < chains; ++i) conds[i] = static_cast<int>(i % spec.num_conditions());
  for (std::size_t i = 0; i < eval_n; ++i) eval_conds[i] = static_cast<int>(i % spec.num_conditions());

  json seeds_j = json::array();
  CsvWriter summary({"seed", "grpo_iterations", "step_grpo_iterations", "grpo_reached", "step_grpo_reached", "speedup"});
  std::vector<double> speedups;
  std::size_t step_faster = 0;
  double base_reward = 0.0;
  for (auto seed : run.seeds) {
    const fm::VelocityModel reference = load_fm(expand_seed(fm_path, seed), t);
    const rm::RewardModel drm = load_drm(expand_seed(drm_path, seed), t, shape);
    const RngStream eval_rng(seed, kAlignEvalTag);
    auto evaluate = [&](const fm::VelocityModel& m) {
      const auto traj = fm::sample_trajectories(m, eval_conds, g.T, g.a, eval_rng);
      return mean(rm::oracle_rewards(spec, traj.terminal, eval_conds));
    };
    base_reward = evaluate(reference);
    if (!(optimum > base_reward)) {
      throw ConfigError("reference policy already reaches the oracle optimum; nothing to align");
    }
    align::TerminalReward terminal = [&](const Tensor& x, std::span<const int> c) {
      return oracle_terminal ? rm::oracle_rewards(spec, x, c) : rm::score_batch(drm, x, 0.0, c);
    };
    align::StepReward step = [&](const Tensor& x, double tt, std::span<const int> c) {
      return rm::score_batch(drm, x, tt, c);
    };

    std::map<align::GrpoConfig::Algo, std::size_t> hit;
    for (auto a : algos) {
      const bool is_step = a == align::GrpoConfig::Algo::kStepGrpo;
      align::GrpoConfig c = g;
      c.algo = a;
      fm::VelocityModel theta = reference;  // fresh optimizer state
      const RngStream root(seed, kAlignTag);
      CsvWriter csv({"iteration", "wallclock_s", "mean_terminal_reward", "mean_step_reward", "mean_kl", "mean_ratio",
                     "grad_norm", "eval_oracle_reward", "progress"});
      std::size_t reached = budget + 1;
      const Stopwatch clock(run.record_wallclock);
      for (std::size_t it = 0; it < budget; ++it) {
        const align::IterationMetrics m =
            is_step ? align::step_grpo_iteration(theta, reference.params, step, conds, c, {}, root.split(it))
                    : align::grpo_iteration(theta, reference.params, terminal, conds, c, {}, root.split(it));
        const double r = evaluate(theta);
        const double progress = (r - base_reward) / (optimum - base_reward);
        csv.cell(it + 1)
            .cell(clock.seconds())
            .cell(m.mean_rollout_reward)
            .cell(m.mean_step_reward)
            .cell(m.mean_kl)
            .cell(m.mean_ratio)
            .cell(m.grad_norm)
            .cell(r)
            .cell(progress)
            .end_row();
        if (progress >= threshold && reached > budget) {
          reached = it + 1;
          if (stop) break;
        }
      }
      const std::string name = std::string(is_step ? "step_grpo" : "grpo") + "_s" + std::to_string(seed);
      run.metrics("align_" + name, csv);
      if (save_policy) run.checkpoint("policy_" + name, theta.params);
      hit[a] = reached;
    }

    json sj = {{"seed", seed}};
    const std::size_t gi = hit.count(align::GrpoConfig::Algo::kGrpo) ? hit[align::GrpoConfig::Algo::kGrpo] : 0;
    const std::size_t si = hit.count(align::GrpoConfig::Algo::kStepGrpo) ? hit[align::GrpoConfig::Algo::kStepGrpo] : 0;
    if (gi) sj["grpo_iterations"] = gi, sj["grpo_reached"] = gi <= budget;
    if (si) sj["step_grpo_iterations"] = si, sj["step_grpo_reached"] = si <= budget;
    if (gi && si) {
      const double sp = static_cast<double>(gi) / static_cast<double>(si);
      sj["speedup"] = sp;
      speedups.push_back(sp);
      step_faster += si < gi;
      summary.cell(static_cast<std::int64_t>(seed)).cell(gi).cell(si).cell(gi <= budget ? 1 : 0)
          .cell(si <= budget ? 1 : 0).cell(sp).end_row();
    }
    seeds_j.push_back(sj);
  }
  if (algos.size() == 2) run.metrics("align_summary", summary);
  json s = {{"threshold", threshold},
            {"oracle_optimum", optimum},
            {"budget", budget},
            {"censored_value", budget + 1},
            {"seeds", seeds_j}};
  if (run.seeds.size() == 1) s["base_reward"] = base_reward;
  if (!speedups.empty()) {
    s["median_speedup"] = median(speedups);
    s["step_faster_seeds"] = step_faster;
  }
  run.write("summary.json", s.dump(2) + "\n");
}

// ---- sample (k sweep) ----

void run_sample_sweep(Run& run) {
  const auto& cfg = run.cfg;
  const auto spec = dataset(cfg);
  const auto t = trunk(cfg, spec);
  const auto shape = drm_shape(cfg, t);
  const auto ks_real = cfg.reals("sample.k", {1, 2, 4, 6});
  const std::size_t n = cfg.count("sample.n", 200);
  infer::SamplerConfig base;
  base.T = cfg.count("sample.T", base.T);
  base.a = cfg.real("sample.a", base.a);
  const bool trace = cfg.flag("sample.trace", false);
  const std::string fm_path = cfg.str("fm.checkpoint");
  const std::string drm_path = cfg.str("drm.checkpoint");
  cfg.reject_unused();
  if (n < 2) throw ConfigError(cfg.origin() + ": sample.n must be at least 2");
  std::vector<std::size_t> ks;
  for (double k : ks_real) {
    if (k < 1 || k != std::floor(k)) throw ConfigError(cfg.origin() + ": sample.k entries must be positive integers");
    ks.push_back(static_cast<std::size_t>(k));
    infer::SamplerConfig c = base;
    c.k = ks.back();
    c.validate();
  }

  const std::size_t nc = spec.num_conditions();
  std::vector<int> conds(n);
  for (std::size_t i = 0; i < n; ++i) conds[i] = static_cast<int>(i % nc);
  CsvWriter runs({"seed", "k", "n", "mean_oracle_reward", "diversity_proxy", "mean_wallclock_s"});
  CsvWriter per_cond({"seed", "k", "condition", "n", "mean_oracle_reward", "diversity_proxy"});
  std::vector<std::vector<double>> reward(ks.size()), diversity(ks.size()), wall(ks.size());
  for (auto seed : run.seeds) {
    const fm::VelocityModel model = load_fm(expand_seed(fm_path, seed), t);
    const rm::RewardModel drm = load_drm(expand_seed(drm_path, seed), t, shape);
    align::StepReward score = [&](const Tensor& x, double tt, std::span<const int> c) {
      return rm::score_batch(drm, x, tt, c);
    };
    const RngStream root(seed, kSweepTag);  // shared across k: paired comparison
    for (std::size_t j = 0; j < ks.size(); ++j) {
      infer::SamplerConfig c = base;
      c.k = ks[j];
      const Stopwatch clock(run.record_wallclock);
      const auto results = infer::stepwise_sample_batch(model, score, conds, c, root);
      const double seconds = clock.seconds();

      const std::size_t d = t.state_dim;
      Tensor terminal({n, d});
      std::vector<std::vector<double>> by_cond(nc);
      std::vector<double> rewards(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(results[i].terminal.data().begin(), results[i].terminal.data().end(),
                  terminal.data().begin() + static_cast<std::ptrdiff_t>(i * d));
        rewards[i] = rm::oracle_reward(spec, results[i].terminal.data(), conds[i]);
        by_cond[static_cast<std::size_t>(conds[i])].insert(by_cond[static_cast<std::size_t>(conds[i])].end(),
                                                           results[i].terminal.data().begin(),
                                                           results[i].terminal.data().end());
      }
      const double r = mean(rewards), div = infer::diversity_proxy(terminal);
      const double w = seconds / static_cast<double>(n);
      reward[j].push_back(r);
      diversity[j].push_back(div);
      wall[j].push_back(w);
      runs.cell(static_cast<std::int64_t>(seed)).cell(ks[j]).cell(n).cell(r).cell(div).cell(w).end_row();
      for (std::size_t ci = 0; ci < nc; ++ci) {
        const std::size_t m = by_cond[ci].size() / d;
        if (m < 2) continue;
        std::vector<double> cr;
        for (std::size_t i = ci; i < n; i += nc) cr.push_back(rewards[i]);
        per_cond.cell(static_cast<std::int64_t>(seed)).cell(ks[j]).cell(ci).cell(m).cell(mean(cr))
            .cell(infer::diversity_proxy(Tensor({m, d}, by_cond[ci]))).end_row();
      }
      if (trace) {
        std::string lines;
        for (std::size_t i = 0; i < n; ++i) {
          for (const auto& s : results[i].trace) {
            json step = {{"chain", i}, {"condition", conds[i]}, {"t", s.t}, {"scores", s.scores},
                         {"selected", s.selected}, {"selected_score", s.selected_score}};
            lines += step.dump() + "\n";
          }
        }
        run.write("traces/sweep_k" + std::to_string(ks[j]) + "_s" + std::to_string(seed) + ".jsonl", lines);
      }
    }
  }
  CsvWriter sweep({"k", "n", "mean_oracle_reward", "diversity_proxy", "mean_wallclock_s"});
  for (std::size_t j = 0; j < ks.size(); ++j) {
    sweep.cell(ks[j]).cell(n).cell(median(reward[j])).cell(median(diversity[j])).cell(median(wall[j])).end_row();
  }
  run.metrics("sample_sweep", sweep);
  run.metrics("sample_sweep_runs", runs);
  run.metrics("sample_sweep_conditions", per_cond);
}

// ---- report ----

void run_report(Run& run) {
  const auto& cfg = run.cfg;
  std::vector<std::string> dirs;
  {
    std::stringstream ss(cfg.str("report.runs"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(' '));
      item.erase(item.find_last_not_of(' ') + 1);
      if (!item.empty()) dirs.push_back(item);
    }
  }
  cfg.reject_unused();
  if (dirs.empty()) throw ConfigError(cfg.origin() + ": report.runs lists no run directories");

  CsvWriter csv({"run", "experiment", "manifest_ok", "csv_files", "csv_rows"});
  std::string md = "# Run report\n";
  for (const auto& d : dirs) {
    const fs::path dir = resolve_path(d);
    if (!fs::exists(dir / "manifest.json")) throw ConfigError("report: no manifest.json in " + dir.string());
    const std::string problem = verify_manifest(dir);
    const json m = json::parse(read_file(dir / "manifest.json"));
    std::vector<std::string> csvs;
    for (const auto& f : m.at("outputs")) {
      const std::string s = f.get<std::string>();
      if (s.rfind("metrics/", 0) == 0 && s.size() > 4 && s.substr(s.size() - 4) == ".csv") csvs.push_back(s);
    }
    std::size_t rows = 0;
    md += "\n## " + d + " (" + m.at("experiment").get<std::string>() + ")\n\n";
    md += problem.empty() ? "manifest verified, config hash " + m.at("config_hash").get<std::string>() + "\n"
                          : "manifest problem: " + problem + "\n";
    for (const auto& c : csvs) {
      const std::string text = fs::exists(dir / c) ? read_file(dir / c) : std::string();
      const auto lines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
      rows += lines ? lines - 1 : 0;
      const bool summary_like = c.find("summary") != std::string::npos || c == "metrics/sample_sweep.csv";
      if (summary_like) md += "\n" + c + ":\n\n```\n" + text + "```\n";
    }
    csv.cell(d).cell(m.at("experiment").get<std::string>()).cell(problem.empty() ? 1 : 0).cell(csvs.size())
        .cell(rows).end_row();
  }
  run.metrics("report", csv);
  run.write("report.md", md);
}

using Runner = std::function<void(Run&)>;

const std::map<std::string, std::pair<std::string, Runner>>& experiments() {
  static const std::map<std::string, std::pair<std::string, Runner>> table = {
      {"fm-train", {"fm-train", run_fm_train}},      {"drm-train", {"drm-train", run_drm_train}},
      {"align", {"align", run_align}},               {"sample-sweep", {"sample", run_sample_sweep}},
      {"noise-eval", {"eval", run_noise_eval}},      {"init-ablation", {"eval", run_init_ablation}},
      {"report", {"report", run_report}},
  };
  return table;
}

std::string experiment_for(const std::string& command, const Config& cfg) {
  static const std::map<std::string, std::string> defaults = {{"fm-train", "fm-train"}, {"drm-train", "drm-train"},
                                                              {"align", "align"},       {"sample", "sample-sweep"},
                                                              {"report", "report"}};
  bool known = command == "eval" || defaults.count(command);
  if (!known) throw ConfigError("unknown command '" + command + "'");
  std::string exp;
  if (cfg.has("experiment")) {
    exp = cfg.str("experiment");
  } else if (command == "eval") {
    throw ConfigError(cfg.origin() + ": eval needs `experiment = noise-eval` or `experiment = init-ablation`");
  } else {
    exp = defaults.at(command);
  }
  auto it = experiments().find(exp);
  if (it == experiments().end()) throw ConfigError(cfg.origin() + ": unknown experiment '" + exp + "'");
  if (it->second.first != command) {
    throw ConfigError(cfg.origin() + ": experiment '" + exp + "' runs under `" + it->second.first + "`, not `" +
                      command + "`");
  }
  return exp;
}

}  // namespace

const char* version() { return "0.1.0"; }

RunResult run(const RunOptions& options) {
  const std::string text = read_file(options.config);
  Config cfg = Config::parse(text, options.config.string());
  const std::string exp = experiment_for(options.command, cfg);

  std::uint64_t seed = 0;
  if (options.seed) {
    seed = *options.seed;
    if (cfg.has("seed")) cfg.integer("seed");  // still validated
  } else {
    const std::int64_t s = cfg.integer("seed");
    if (s < 0) throw ConfigError(cfg.origin() + ": seed must be non-negative");
    seed = static_cast<std::uint64_t>(s);
  }
  const std::size_t runs = cfg.count("runs", 1);
  if (runs == 0) throw ConfigError(cfg.origin() + ": runs must be positive");
  fs::path out;
  if (options.out) {
    out = *options.out;
    if (cfg.has("output.dir")) cfg.str("output.dir");
  } else {
    out = cfg.str("output.dir");
  }
  out = resolve_path(out);

  Run r{cfg, exp, out, {}, cfg.flag("output.record_wallclock", false), {}};
  for (std::size_t i = 0; i < runs; ++i) r.seeds.push_back(seed + i);

  fs::create_directories(out);
  for (const char* stale : {"metrics", "traces"}) fs::remove_all(out / stale);
  fs::remove(out / "manifest.json");

  const std::string started = utc_now();
  experiments().at(exp).second(r);
  r.write("config.txt", text);

  std::sort(r.files.begin(), r.files.end());
  json manifest = {{"experiment", exp},
                   {"command", options.command},
                   {"version", version()},
                   {"seed", seed},
                   {"seed_override", options.seed.has_value()},
                   {"seeds", r.seeds},
                   {"record_wallclock", r.record_wallclock},
                   {"config_file", "config.txt"},
                   {"config_hash", sha256_hex(text)},
                   {"started", started},
                   {"finished", utc_now()},
                   {"outputs", r.files}};
  write_atomic(out / "manifest.json", manifest.dump(2) + "\n");
  return RunResult{exp, out, r.files};
}

}  // namespace drmkit::harness

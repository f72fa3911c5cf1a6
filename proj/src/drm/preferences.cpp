#include <fstream>
#include <string>

#include <json.hpp>

#include "drmkit/drm.hpp"
#include "drmkit/error.hpp"

namespace drmkit::rm {
namespace {

// Rows sampled from the flow model per rollout batch.
constexpr std::size_t kSampleChunk = 256;

void perturb(Tensor& x, double amount, RngStream& rng) {
  const double alpha = amount * rng.uniform();
  for (auto& v : x.data()) v += alpha * rng.normal();
}

}  // namespace

Tensor corrupt(const Tensor& x, double t, RngStream& rng) {
  Tensor eps(x.shape());
  for (auto& v : eps.data()) v = rng.normal();
  return fm::interpolate(x, eps, t);
}

PreferenceDataset synth_preferences(const fm::DatasetSpec& spec, const fm::VelocityModel* model, std::size_t n,
                                    const SynthConfig& cfg, const RngStream& rng) {
  spec.validate();
  if (!(cfg.flip_p >= 0.0 && cfg.flip_p < 0.5)) throw ConfigError("flip_p must lie in [0, 0.5)");
  if (cfg.source == SynthConfig::Source::kPerturbed && !(cfg.perturb >= 0.0)) {
    throw ConfigError("perturbation scale must be non-negative");
  }
  if (cfg.source == SynthConfig::Source::kModel && model == nullptr) {
    throw ConfigError("model-sourced preferences need a flow model");
  }
  const std::size_t d = spec.state_dim();
  const std::size_t conds = spec.num_conditions();

  // Two candidate rows per triplet: 2j and 2j + 1.
  Tensor cand({2 * n, d});
  std::vector<int> cand_cond(2 * n);
  for (std::size_t j = 0; j < n; ++j) cand_cond[2 * j] = cand_cond[2 * j + 1] = static_cast<int>(j % conds);

  if (cfg.source == SynthConfig::Source::kModel) {
    const RngStream base = rng.split(0);
    for (std::size_t start = 0, chunk = 0; start < 2 * n; start += kSampleChunk, ++chunk) {
      const std::size_t rows = std::min(kSampleChunk, 2 * n - start);
      std::span<const int> cc(cand_cond.data() + start, rows);
      const fm::Trajectory traj = fm::sample_trajectories(*model, cc, cfg.sample_steps, cfg.sample_a, base.split(chunk));
      std::copy(traj.terminal.data().begin(), traj.terminal.data().end(), cand.data().begin() + start * d);
    }
  } else {
    const RngStream base = rng.split(1);
    for (std::size_t i = 0; i < 2 * n; ++i) {
      RngStream r = base.split(i);
      Tensor x = fm::draw_state(spec, cand_cond[i], r);
      perturb(x, cfg.perturb, r);
      std::copy(x.data().begin(), x.data().end(), cand.data().begin() + i * d);
    }
  }

  const std::vector<double> reward = oracle_rewards(spec, cand, cand_cond);
  const RngStream flips = rng.split(2);
  PreferenceDataset out;
  out.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t win = 2 * j, lose = 2 * j + 1;
    if (reward[lose] > reward[win]) std::swap(win, lose);
    RngStream r = flips.split(j);
    if (r.uniform() <= cfg.flip_p) std::swap(win, lose);
    PreferenceTriplet tr{Tensor({d}), Tensor({d}), cand_cond[2 * j]};
    std::copy_n(cand.data().begin() + win * d, d, tr.win.data().begin());
    std::copy_n(cand.data().begin() + lose * d, d, tr.lose.data().begin());
    out.push_back(std::move(tr));
  }
  return out;
}

void write_preferences(const PreferenceDataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    for (const auto& tr : data) {
      nlohmann::json line{{"win", tr.win.values()}, {"lose", tr.lose.values()}, {"cond", tr.condition}};
      out << line.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

PreferenceDataset read_preferences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open preference file " + path.string());
  PreferenceDataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto win = j.at("win").get<std::vector<double>>();
      auto lose = j.at("lose").get<std::vector<double>>();
      if (win.empty() || win.size() != lose.size()) throw ConfigError("win and lose sizes differ");
      const std::size_t d = win.size();
      out.push_back({Tensor({d}, std::move(win)), Tensor({d}, std::move(lose)), j.at("cond").get<int>()});
      if (out.back().condition < 0) throw ConfigError("negative condition");
    } catch (const std::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace drmkit::rm

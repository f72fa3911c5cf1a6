#include "drmkit/params.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "drmkit/error.hpp"

namespace drmkit {

using nlohmann::json;

void ParamSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Parameter p;
  p.m = Tensor(value.shape());
  p.v = Tensor(value.shape());
  p.value = std::move(value);
  entries_.emplace(name, std::move(p));
}

const Parameter& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const { return entry(name).value; }
Tensor& ParamSet::value(const std::string& name) { return entry(name).value; }

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& [_, p] : entries_) n += p.value.size();
  return n;
}

void ParamSet::reset_optimizer() {
  for (auto& [_, p] : entries_) {
    p.m = Tensor(p.value.shape());
    p.v = Tensor(p.value.shape());
    p.step = 0;
  }
}

bool ParamSet::same_values(const ParamSet& other) const {
  if (size() != other.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.value != b->second.value) return false;
  }
  return true;
}

void adam_step(ParamSet& params, const GradMap& grads, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const auto& p = params.entry(name);
    if (g.shape() != p.value.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_str(g.shape()) + ", parameter has " +
                       shape_str(p.value.shape()));
    }
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  for (const auto& [name, g] : grads) {
    auto& p = params.entry(name);
    p.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto val = p.value.data();
    auto m = p.m.data();
    auto v = p.v.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g.data()) s += x * x;
  }
  return std::sqrt(s);
}

namespace {

json tensor_values(const Tensor& t) { return json(t.values()); }

Tensor tensor_from(const json& shape_j, const json& data_j, const std::string& key) {
  Shape shape;
  try {
    shape = shape_j.get<Shape>();
    auto data = data_j.get<std::vector<double>>();
    return Tensor(std::move(shape), std::move(data));
  } catch (const json::exception& e) {
    throw ConfigError("corrupt checkpoint entry '" + key + "': " + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError("corrupt checkpoint entry '" + key + "': " + e.what());
  }
}

}  // namespace

std::string paramset_to_json(const ParamSet& params) {
  json doc = json::object();
  for (const auto& [name, p] : params) {
    if (!p.value.all_finite()) throw NumericError("cannot serialize non-finite parameter '" + name + "'");
    doc[name] = {{"shape", p.value.shape()},
                 {"data", tensor_values(p.value)},
                 {"m", tensor_values(p.m)},
                 {"v", tensor_values(p.v)},
                 {"step", p.step}};
  }
  return doc.dump();
}

ParamSet paramset_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("checkpoint root must be an object");
  ParamSet out;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto& key = it.key();
    const auto& e = it.value();
    for (const char* field : {"shape", "data", "m", "v", "step"}) {
      if (!e.is_object() || !e.contains(field)) {
        throw ConfigError("corrupt checkpoint entry '" + key + "': missing field '" + field + "'");
      }
    }
    Tensor value = tensor_from(e["shape"], e["data"], key);
    Tensor m = tensor_from(e["shape"], e["m"], key);
    Tensor v = tensor_from(e["shape"], e["v"], key);
    out.add(key, std::move(value));
    auto& p = out.entry(key);
    p.m = std::move(m);
    p.v = std::move(v);
    try {
      p.step = e["step"].get<std::int64_t>();
    } catch (const json::exception& ex) {
      throw ConfigError("corrupt checkpoint entry '" + key + "': " + ex.what());
    }
  }
  return out;
}

void save_paramset(const ParamSet& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out << paramset_to_json(params);
    if (!out) throw ConfigError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ParamSet load_paramset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return paramset_from_json(ss.str());
}

void check_layout(const ParamSet& loaded, const ParamSet& layout) {
  for (const auto& [name, p] : layout) {
    if (!loaded.contains(name)) throw ConfigError("checkpoint is missing key '" + name + "'");
    const auto& got = loaded.at(name).shape();
    if (got != p.value.shape()) {
      throw ConfigError("checkpoint key '" + name + "' has shape " + shape_str(got) + ", expected " +
                        shape_str(p.value.shape()));
    }
  }
}

ParamSet load_checkpoint(const std::filesystem::path& path, const ParamSet& layout) {
  ParamSet loaded = load_paramset(path);
  check_layout(loaded, layout);
  ParamSet out;
  for (const auto& [name, _] : layout) {
    out.add(name, loaded.at(name));
    auto& p = out.entry(name);
    p.m = loaded.entry(name).m;
    p.v = loaded.entry(name).v;
    p.step = loaded.entry(name).step;
  }
  return out;
}

}  // namespace drmkit

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "drmkit/tensor.hpp"

namespace drmkit {

// A trainable tensor plus its Adam moments.
struct Parameter {
  Tensor value;
  Tensor m;
  Tensor v;
  std::int64_t step = 0;
};

using GradMap = std::map<std::string, Tensor>;

// Named parameters, iterated in name order.
class ParamSet {
 public:
  using Map = std::map<std::string, Parameter>;

  // Throws ConfigError if `name` is already present.
  void add(const std::string& name, Tensor value);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Parameter& entry(const std::string& name) const;
  Parameter& entry(const std::string& name);

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  // Drops optimizer state, keeping values.
  void reset_optimizer();

  // Values of every parameter equal (bitwise) to `other`'s.
  bool same_values(const ParamSet& other) const;

 private:
  Map entries_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of every parameter that has a gradient.
// Throws NumericError naming the parameter on a non-finite gradient, before
// any parameter is modified.
void adam_step(ParamSet& params, const GradMap& grads, const AdamConfig& cfg);

double grad_norm(const GradMap& grads);

// JSON document {name: {shape, data, m, v, step}}; doubles are written in
// shortest round-trip form so load(save(p)) is bit-exact.
std::string paramset_to_json(const ParamSet& params);
ParamSet paramset_from_json(const std::string& text);

void save_paramset(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_paramset(const std::filesystem::path& path);

// Loads a checkpoint and checks it against an expected layout: every name in
// `layout` must be present with an identical shape. Extra keys are ignored.
ParamSet load_checkpoint(const std::filesystem::path& path, const ParamSet& layout);
void check_layout(const ParamSet& loaded, const ParamSet& layout);

}  // namespace drmkit

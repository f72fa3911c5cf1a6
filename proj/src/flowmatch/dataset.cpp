#include <cmath>

#include "drmkit/error.hpp"
#include "drmkit/flowmatch.hpp"

namespace drmkit::fm {

std::size_t DatasetSpec::num_conditions() const {
  return mode == Mode::kVector2d ? means.size() : centers.size();
}

std::size_t DatasetSpec::state_dim() const { return mode == Mode::kVector2d ? 2 : side * side; }

void DatasetSpec::validate() const {
  if (num_conditions() < 2) throw ConfigError("dataset needs at least 2 conditions");
  if (mode == Mode::kVector2d) {
    if (!(stddev > 0.0)) throw ConfigError("dataset.stddev must be positive");
  } else {
    if (side < 2 || side % 2 != 0) throw ConfigError("dataset.side must be even and >= 2");
    if (!(sharpness_min > 0.0 && sharpness_max >= sharpness_min)) {
      throw ConfigError("dataset.sharpness must satisfy 0 < min <= max");
    }
    for (const auto& c : centers) {
      if (c[0] < 0 || c[1] < 0 || c[0] > static_cast<double>(side - 1) || c[1] > static_cast<double>(side - 1)) {
        throw ConfigError("blob centre outside the grid");
      }
    }
  }
}

Tensor render_blob(const DatasetSpec& spec, int condition, double sharpness) {
  const auto& c = spec.centers.at(static_cast<std::size_t>(condition));
  Tensor img({spec.side * spec.side});
  for (std::size_t r = 0; r < spec.side; ++r) {
    for (std::size_t col = 0; col < spec.side; ++col) {
      const double dr = static_cast<double>(r) - c[0];
      const double dc = static_cast<double>(col) - c[1];
      img[r * spec.side + col] = 2.0 * std::exp(-sharpness * (dr * dr + dc * dc)) - 1.0;
    }
  }
  return img;
}

Tensor draw_state(const DatasetSpec& spec, int condition, RngStream& rng) {
  if (condition < 0 || static_cast<std::size_t>(condition) >= spec.num_conditions()) {
    throw ShapeError("condition " + std::to_string(condition) + " outside the dataset");
  }
  if (spec.mode == DatasetSpec::Mode::kVector2d) {
    const auto& mu = spec.means[static_cast<std::size_t>(condition)];
    const double x = mu[0] + spec.stddev * rng.normal();
    const double y = mu[1] + spec.stddev * rng.normal();
    return Tensor::from({x, y});
  }
  const double k = spec.sharpness_min + (spec.sharpness_max - spec.sharpness_min) * rng.uniform();
  return render_blob(spec, condition, k);
}

DatasetBatch generate_dataset_batch(const DatasetSpec& spec, std::size_t n, RngStream& rng) {
  if (n == 0) throw ConfigError("generate_dataset_batch: n must be >= 1");
  const std::size_t d = spec.state_dim();
  DatasetBatch out{Tensor({n, d}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.below(spec.num_conditions()));
    out.conditions[i] = c;
    const Tensor s = draw_state(spec, c, rng);
    for (std::size_t j = 0; j < d; ++j) out.states.at(i, j) = s[j];
  }
  return out;
}

}  // namespace drmkit::fm

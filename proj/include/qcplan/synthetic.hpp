#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"

namespace qcplan {

struct NoiseLevel {
  double sigma = 0.0;
  double fraction = 1.0;
};

/// Desk-scale identity data with controlled recognizability.
struct SyntheticSpec {
  std::size_t classes = 8;
  std::size_t dim = 16;
  std::size_t n_per_class = 50;
  std::vector<NoiseLevel> noise_levels{{0.0, 0.4}, {0.2, 0.4}, {0.5, 0.2}};
  double mislabel_rate = 0.02;
  // encoder inputs: x = input_scale (Q u + nuisance_sigma eta), Q with orthonormal columns
  std::size_t input_dim = 192;
  double input_scale = 60.0;
  double nuisance_sigma = 0.15;
  std::uint64_t seed = 1;
  double min_prototype_angle_deg = 30.0;
  std::size_t prototype_retry_budget = 100000;

  std::size_t samples() const { return classes * n_per_class; }

  void validate() const {
    require(classes >= 2, ErrorCode::ConfigError, "data.classes must be >= 2");
    require(dim >= 2, ErrorCode::ConfigError, "data.dim must be >= 2");
    require(n_per_class >= 1, ErrorCode::ConfigError, "data.n_per_class must be >= 1");
    require(!noise_levels.empty(), ErrorCode::ConfigError, "data.noise_levels must not be empty");
    double total = 0.0;
    for (const auto& level : noise_levels) {
      require(std::isfinite(level.sigma) && level.sigma >= 0.0, ErrorCode::ConfigError, "noise sigma must be >= 0");
      require(level.fraction >= 0.0 && level.fraction <= 1.0, ErrorCode::ConfigError,
              "noise fraction must lie in [0, 1]");
      total += level.fraction;
    }
    require(std::abs(total - 1.0) <= 1e-12, ErrorCode::ConfigError, "noise fractions must sum to 1");
    require(mislabel_rate >= 0.0 && mislabel_rate < 1.0, ErrorCode::ConfigError, "mislabel_rate must lie in [0, 1)");
    require(input_dim >= dim, ErrorCode::ConfigError, "data.input_dim must be >= data.dim");
    require(std::isfinite(input_scale) && input_scale > 0.0, ErrorCode::ConfigError, "input_scale must be positive");
    require(std::isfinite(nuisance_sigma) && nuisance_sigma >= 0.0, ErrorCode::ConfigError,
            "nuisance_sigma must be >= 0");
  }
};

struct SyntheticData {
  Eigen::MatrixXd prototypes;  // C x d, unit rows
  FeatureBatch batch;          // features hold unit ground-truth directions; labels as observed
  std::vector<std::size_t> true_labels;
  Eigen::MatrixXd inputs;  // N x input_dim
  double input_scale = 1.0;
};

namespace detail {

/// Uniform integer in [0, n) from the raw 64-bit stream; unlike
/// std::uniform_int_distribution the mapping is fixed across standard libraries.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return static_cast<std::size_t>(v % range);
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Box-Muller on the raw stream, again for library-independent output.
inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline Eigen::VectorXd normal_vector(std::mt19937_64& rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = standard_normal(rng);
  return v;
}

inline void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// rows x cols matrix with orthonormal columns (rows >= cols).
inline Eigen::MatrixXd orthonormal_columns(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) g(i, j) = standard_normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return q;
}

}  // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Eigen::Index d = static_cast<Eigen::Index>(spec.dim);
  const std::size_t C = spec.classes;
  const std::size_t N = spec.samples();

  SyntheticData out;
  out.prototypes.resize(static_cast<Eigen::Index>(C), d);
  const double max_cos = std::cos(spec.min_prototype_angle_deg * std::numbers::pi / 180.0);
  std::size_t accepted = 0;
  for (std::size_t attempt = 0; accepted < C; ++attempt) {
    require(attempt < spec.prototype_retry_budget, ErrorCode::PrototypeSeparationFailure,
            "could not place " + std::to_string(C) + " prototypes in dimension " + std::to_string(spec.dim));
    Eigen::VectorXd v = detail::normal_vector(rng, d);
    v.normalize();
    bool separated = true;
    for (std::size_t j = 0; j < accepted && separated; ++j) {
      separated = out.prototypes.row(static_cast<Eigen::Index>(j)).dot(v) < max_cos;
    }
    if (separated) out.prototypes.row(static_cast<Eigen::Index>(accepted++)) = v.transpose();
  }

  // exact group sizes by largest remainder, then a seeded shuffle
  std::vector<std::size_t> group_of(N, 0);
  {
    std::vector<std::size_t> counts(spec.noise_levels.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < counts.size(); ++g) {
      const double exact = spec.noise_levels[g].fraction * static_cast<double>(N);
      counts[g] = static_cast<std::size_t>(std::floor(exact));
      assigned += counts[g];
      remainders.emplace_back(exact - std::floor(exact), g);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < N; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];
    std::size_t pos = 0;
    for (std::size_t g = 0; g < counts.size(); ++g)
      for (std::size_t c = 0; c < counts[g]; ++c) group_of[pos++] = g;
    detail::shuffle(group_of, rng);
  }

  out.batch.features.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t label = i / spec.n_per_class;
    const double sigma = spec.noise_levels[group_of[i]].sigma;
    const Eigen::VectorXd p = out.prototypes.row(static_cast<Eigen::Index>(label)).transpose();
    Eigen::VectorXd t = detail::normal_vector(rng, d);
    t -= t.dot(p) * p;
    const Eigen::VectorXd u = sigma == 0.0 ? p : Eigen::VectorXd((p + sigma * t).normalized());
    out.batch.features.push_back(u);
    out.batch.labels.push_back(label);
    out.batch.meta.push_back({sigma, false});
    out.true_labels.push_back(label);
  }
  // exactly round(rate N) flipped labels, so small runs are never clean by luck
  std::vector<std::size_t> order(N);
  for (std::size_t i = 0; i < N; ++i) order[i] = i;
  detail::shuffle(order, rng);
  const auto flips = static_cast<std::size_t>(std::llround(spec.mislabel_rate * static_cast<double>(N)));
  for (std::size_t j = 0; j < flips; ++j) {
    const std::size_t i = order[j];
    const std::size_t other = detail::uniform_index(rng, C - 1);
    out.batch.labels[i] = other < out.true_labels[i] ? other : other + 1;
    out.batch.meta[i].mislabeled = true;
  }

  const Eigen::Index in = static_cast<Eigen::Index>(spec.input_dim);
  const Eigen::MatrixXd q = detail::orthonormal_columns(rng, in, d);
  out.inputs.resize(static_cast<Eigen::Index>(N), in);
  out.input_scale = spec.input_scale;
  for (std::size_t i = 0; i < N; ++i) {
    Eigen::VectorXd x = q * out.batch.features[i];
    if (spec.nuisance_sigma > 0.0) x += spec.nuisance_sigma * detail::normal_vector(rng, in);
    out.inputs.row(static_cast<Eigen::Index>(i)) = spec.input_scale * x.transpose();
  }
  return out;
}

}  // namespace qcplan

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"
#include "qcplan/margin.hpp"

namespace qcplan {

enum class OffsetMode { Zero, Tracking };

/// Hyperparameters of the magnitude regularizer
///   L_reg = k p (1/|z| + |z|/u_a^2) + (1 - p)(1/|z| + |z|/l_a^2) - b.
struct RegParams {
  double l_a = 1.0;
  double u_a = 100.0;
  double k = 0.0;
  OffsetMode b_mode = OffsetMode::Tracking;
  double lambda_g = 1.0;

  void validate() const {
    require(std::isfinite(l_a) && std::isfinite(u_a) && l_a > 0.0 && l_a < u_a, ErrorCode::InvalidBounds,
            "need 0 < l_a < u_a");
    require(std::isfinite(k) && k > 0.0, ErrorCode::InvalidArgument, "k must be positive");
    require(std::isfinite(lambda_g) && lambda_g >= 0.0, ErrorCode::InvalidArgument, "lambda_g must be >= 0");
  }

  static RegParams balanced(double l_a, double u_a, OffsetMode mode = OffsetMode::Tracking,
                            double lambda_g = 1.0);
};

namespace detail {

inline void check_bounds(double l_a, double u_a) {
  require(std::isfinite(l_a) && std::isfinite(u_a) && l_a > 0.0 && l_a < u_a, ErrorCode::InvalidBounds,
          "need 0 < l_a < u_a, got l_a=" + std::to_string(l_a) + " u_a=" + std::to_string(u_a));
}

inline void check_guidance(double p_d) {
  require(std::isfinite(p_d) && p_d >= 0.0 && p_d <= 1.0, ErrorCode::InvalidGuidance,
          "guidance value outside [0, 1]");
}

/// Minimizer of L_reg over |z| > 0 for explicit (l_a, u_a, k).
inline double expected_magnitude(double l_a, double u_a, double k, double p_d) {
  const double ua2 = u_a * u_a;
  const double la2 = l_a * l_a;
  return std::sqrt((1.0 + (k - 1.0) * p_d) * ua2 * la2 / (ua2 + (k * la2 - ua2) * p_d));
}

}  // namespace detail

/// k from the balancing condition z*(1/2) = (l_a + u_a)/2, closed form.
/// Solving that condition gives (u_a + l_a)^2 - 4 l_a^2 in the numerator.
inline double closed_form_k(double l_a, double u_a) {
  detail::check_bounds(l_a, u_a);
  const double ua2 = u_a * u_a;
  const double la2 = l_a * l_a;
  const double sum2 = (u_a + l_a) * (u_a + l_a);
  return ua2 * (sum2 - 4.0 * la2) / (la2 * (4.0 * ua2 - sum2));
}

/// Same k, found by bisection on the strictly increasing map k -> z*(1/2).
inline double solve_k(double l_a, double u_a) {
  detail::check_bounds(l_a, u_a);
  const double target = 0.5 * (l_a + u_a);
  auto residual = [&](double k) { return detail::expected_magnitude(l_a, u_a, k, 0.5) - target; };
  double lo = 1.0;
  double hi = 1.0;
  while (residual(lo) > 0.0) lo *= 0.5;
  while (residual(hi) < 0.0) hi *= 2.0;
  // bisect geometrically; k spans many decades for wide bounds
  for (int it = 0; it < 400; ++it) {
    const double mid = std::sqrt(lo * hi);
    if (!(mid > lo && mid < hi)) break;
    if (residual(mid) < 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::abs(residual(lo)) <= std::abs(residual(hi)) ? lo : hi;
}

inline RegParams RegParams::balanced(double l_a, double u_a, OffsetMode mode, double lambda_g) {
  RegParams p;
  p.l_a = l_a;
  p.u_a = u_a;
  p.k = solve_k(l_a, u_a);
  p.b_mode = mode;
  p.lambda_g = lambda_g;
  return p;
}

inline double expected_magnitude(const RegParams& params, double p_d) {
  params.validate();
  detail::check_guidance(p_d);
  if (p_d == 0.0) return params.l_a;
  if (p_d == 1.0) return params.u_a;
  return detail::expected_magnitude(params.l_a, params.u_a, params.k, p_d);
}

namespace detail {

inline double reg_terms(const RegParams& params, double z_mag, double p_d) {
  const double inv = 1.0 / z_mag;
  return params.k * p_d * (inv + z_mag / (params.u_a * params.u_a)) +
         (1.0 - p_d) * (inv + z_mag / (params.l_a * params.l_a));
}

}  // namespace detail

/// Offset that makes L_reg vanish at z*(p_d).
inline double offset_b(const RegParams& params, double p_d) {
  return detail::reg_terms(params, expected_magnitude(params, p_d), p_d);
}

inline double reg_loss(const RegParams& params, double z_mag, double p_d) {
  params.validate();
  detail::check_guidance(p_d);
  require(std::isfinite(z_mag) && z_mag > 0.0, ErrorCode::NonPositiveMagnitude, "magnitude must be positive");
  const double b = params.b_mode == OffsetMode::Tracking ? offset_b(params, p_d) : 0.0;
  return detail::reg_terms(params, z_mag, p_d) - b;
}

/// dL_reg / d|z| with p_d held constant.
inline double reg_loss_dmag(const RegParams& params, double z_mag, double p_d) {
  params.validate();
  detail::check_guidance(p_d);
  require(std::isfinite(z_mag) && z_mag > 0.0, ErrorCode::NonPositiveMagnitude, "magnitude must be positive");
  const double inv2 = 1.0 / (z_mag * z_mag);
  return params.k * p_d * (-inv2 + 1.0 / (params.u_a * params.u_a)) +
         (1.0 - p_d) * (-inv2 + 1.0 / (params.l_a * params.l_a));
}

struct QCFaceSampleLoss {
  double softmax = 0.0;
  double reg = 0.0;
  double guidance = 0.0;
  double total = 0.0;
};

struct QCFaceBatchLoss {
  std::vector<QCFaceSampleLoss> per_sample;
  double mean_softmax = 0.0;
  double mean_reg = 0.0;
  double mean_guidance = 0.0;
  double mean_total = 0.0;
};

inline QCFaceSampleLoss qcface_sample_loss(const MarginSpec& spec, const RegParams& params, const FeatureVector& z,
                                           std::size_t label, const ProxyMatrix& proxies,
                                           const BatchNormState& bn = {}) {
  QCFaceSampleLoss out;
  out.softmax = evaluate_sample(spec, z, label, proxies, bn).loss;
  out.guidance = guidance_value(z, label, proxies, spec.s);
  out.reg = reg_loss(params, z.norm(), out.guidance);
  out.total = out.softmax + params.lambda_g * out.reg;
  return out;
}

/// L_sm + lambda_g L_reg per sample, with p_d from the margin-free softmax.
inline QCFaceBatchLoss qcface_total_loss(const MarginSpec& spec, const RegParams& params, const FeatureBatch& batch,
                                         const ProxyMatrix& proxies) {
  spec.validate();
  params.validate();
  batch.validate(proxies);
  const BatchNormState bn = BatchNormState::from_batch(batch);
  QCFaceBatchLoss out;
  out.per_sample.reserve(batch.size());
  std::vector<double> sm, reg, pd, total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.per_sample.push_back(qcface_sample_loss(spec, params, batch.features[i], batch.labels[i], proxies, bn));
    sm.push_back(out.per_sample.back().softmax);
    reg.push_back(out.per_sample.back().reg);
    pd.push_back(out.per_sample.back().guidance);
    total.push_back(out.per_sample.back().total);
  }
  out.mean_softmax = ordered_mean(sm);
  out.mean_reg = ordered_mean(reg);
  out.mean_guidance = ordered_mean(pd);
  out.mean_total = ordered_mean(total);
  return out;
}

}  // namespace qcplan

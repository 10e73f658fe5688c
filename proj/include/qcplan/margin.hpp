#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"

namespace qcplan {

// Margin modes. m2 is the additive angular margin, m3 the additive cosine
// (boundary) margin; either may depend on the feature magnitude.

struct ConstantAngle {
  double m2 = 0.0;
};

/// MagFace-style linear margin: m2 grows from l_m at |z| = l_a to u_m at |z| = u_a.
struct MagLinear {
  double l_m = 0.45;
  double u_m = 0.8;
  double l_a = 10.0;
  double u_a = 110.0;
};

/// AdaFace-style margin driven by the batch-normalized magnitude. The
/// normalized magnitude is detached: it contributes no gradient.
struct AdaNorm {
  double m = 0.4;
};

struct ConstantBoundary {
  double m3 = 0.0;
};

struct IdentityNegative {};

/// MV-Arc-Softmax: t cos + t - 1 on misclassified negatives.
struct MVSoftmaxNegative {
  double t = 1.2;
};

/// CurricularFace: (t + cos) cos on misclassified negatives, t held fixed.
struct CurricularNegative {
  double t = 0.0;
};

using AngularMarginMode = std::variant<ConstantAngle, MagLinear, AdaNorm>;
using BoundaryMarginMode = std::variant<ConstantBoundary, AdaNorm>;
using NegativeMode = std::variant<IdentityNegative, MVSoftmaxNegative, CurricularNegative>;

struct MarginSpec {
  double m1 = 1.0;
  AngularMarginMode m2 = ConstantAngle{};
  BoundaryMarginMode m3 = ConstantBoundary{};
  double s = 64.0;
  NegativeMode negative = IdentityNegative{};

  static MarginSpec margin_free(double s = 64.0) {
    MarginSpec spec;
    spec.s = s;
    return spec;
  }
  static MarginSpec arcface(double m = 0.5, double s = 64.0) {
    MarginSpec spec;
    spec.m2 = ConstantAngle{m};
    spec.s = s;
    return spec;
  }
  static MarginSpec cosface(double m = 0.35, double s = 64.0) {
    MarginSpec spec;
    spec.m3 = ConstantBoundary{m};
    spec.s = s;
    return spec;
  }
  static MarginSpec sphereface(double m1 = 1.35, double s = 64.0) {
    MarginSpec spec;
    spec.m1 = m1;
    spec.s = s;
    return spec;
  }
  static MarginSpec mv_softmax(double m = 0.5, double t = 1.2, double s = 64.0) {
    MarginSpec spec = arcface(m, s);
    spec.negative = MVSoftmaxNegative{t};
    return spec;
  }
  static MarginSpec curricular(double m = 0.5, double t = 0.0, double s = 64.0) {
    MarginSpec spec = arcface(m, s);
    spec.negative = CurricularNegative{t};
    return spec;
  }
  static MarginSpec magface(MagLinear band = {}, double s = 64.0) {
    MarginSpec spec;
    spec.m2 = band;
    spec.s = s;
    return spec;
  }
  static MarginSpec adaface(double m = 0.4, double s = 64.0) {
    MarginSpec spec;
    spec.m2 = AdaNorm{m};
    spec.m3 = AdaNorm{m};
    spec.s = s;
    return spec;
  }

  bool constant_margins() const {
    return std::holds_alternative<ConstantAngle>(m2) && std::holds_alternative<ConstantBoundary>(m3);
  }

  void validate() const {
    require(std::isfinite(s) && s > 0.0, ErrorCode::InvalidArgument, "scale s must be positive");
    require(std::isfinite(m1) && m1 >= 0.0, ErrorCode::InvalidArgument, "m1 must be non-negative");
    if (const auto* c = std::get_if<ConstantAngle>(&m2)) {
      require(c->m2 >= 0.0 && c->m2 < std::numbers::pi / 2, ErrorCode::InvalidArgument,
              "constant m2 must lie in [0, pi/2)");
    }
    if (const auto* band = std::get_if<MagLinear>(&m2)) {
      require(band->l_a < band->u_a, ErrorCode::InvalidArgument, "MagLinear needs l_a < u_a");
      require(band->l_m < band->u_m, ErrorCode::InvalidArgument, "MagLinear needs l_m < u_m");
    }
    if (const auto* c = std::get_if<ConstantBoundary>(&m3)) {
      require(c->m3 >= 0.0, ErrorCode::InvalidArgument, "constant m3 must be non-negative");
    }
  }
};

/// Batch statistics of |z| for AdaNorm margins.
struct BatchNormState {
  double mean = 0.0;
  double std = 1.0;

  static constexpr double kStdFloor = 1e-6;

  static BatchNormState from_magnitudes(std::span<const double> mags) {
    BatchNormState bn;
    if (mags.empty()) return bn;
    double sum = 0.0;
    for (double m : mags) sum += m;
    bn.mean = sum / static_cast<double>(mags.size());
    double ss = 0.0;
    for (double m : mags) ss += (m - bn.mean) * (m - bn.mean);
    bn.std = std::max(std::sqrt(ss / static_cast<double>(mags.size())), kStdFloor);
    return bn;
  }

  static BatchNormState from_batch(const FeatureBatch& batch) {
    std::vector<double> mags;
    mags.reserve(batch.size());
    for (const auto& z : batch.features) mags.push_back(z.norm());
    return from_magnitudes(mags);
  }

  double normalized(double z_mag) const {
    return std::clamp((z_mag - mean) / std::max(std, kStdFloor), -1.0, 1.0);
  }
};

/// m2 and m3 evaluated at one magnitude, with their (non-detached) slopes.
struct ResolvedMargins {
  double m2 = 0.0;
  double dm2_dmag = 0.0;
  double m3 = 0.0;
  double dm3_dmag = 0.0;
};

inline ResolvedMargins resolve_margins(const MarginSpec& spec, double z_mag, const BatchNormState& bn) {
  ResolvedMargins r;
  if (const auto* c = std::get_if<ConstantAngle>(&spec.m2)) {
    r.m2 = c->m2;
  } else if (const auto* band = std::get_if<MagLinear>(&spec.m2)) {
    const double slope = (band->u_m - band->l_m) / (band->u_a - band->l_a);
    const double clamped = std::clamp(z_mag, band->l_a, band->u_a);
    r.m2 = slope * (clamped - band->l_a) + band->l_m;
    r.dm2_dmag = (z_mag > band->l_a && z_mag < band->u_a) ? slope : 0.0;
  } else if (const auto* ada = std::get_if<AdaNorm>(&spec.m2)) {
    r.m2 = -ada->m * bn.normalized(z_mag);
  }
  if (const auto* c = std::get_if<ConstantBoundary>(&spec.m3)) {
    r.m3 = c->m3;
  } else if (const auto* ada = std::get_if<AdaNorm>(&spec.m3)) {
    r.m3 = ada->m * (bn.normalized(z_mag) + 1.0);
  }
  return r;
}

/// Same spec with every magnitude-dependent margin frozen at its value for
/// this magnitude. Differentiating the frozen spec is what "detached" means.
inline MarginSpec freeze_margins(const MarginSpec& spec, double z_mag, const BatchNormState& bn) {
  const ResolvedMargins r = resolve_margins(spec, z_mag, bn);
  MarginSpec frozen = spec;
  frozen.m2 = ConstantAngle{r.m2};
  frozen.m3 = ConstantBoundary{r.m3};
  return frozen;
}

inline void check_theta(double theta) {
  require(std::isfinite(theta) && theta >= 0.0 && theta <= std::numbers::pi, ErrorCode::InvalidTheta,
          "theta outside [0, pi]: " + std::to_string(theta));
}

/// F(M, theta) = cos(m1 theta + m2) - m3, with exact evaluation past pi - m2.
inline double positive_modulation(const MarginSpec& spec, double theta, const ResolvedMargins& r) {
  check_theta(theta);
  return std::cos(spec.m1 * theta + r.m2) - r.m3;
}

inline double positive_modulation(const MarginSpec& spec, double theta, double z_mag,
                                  const BatchNormState& bn) {
  require(z_mag > 0.0, ErrorCode::NonPositiveMagnitude, "feature magnitude must be positive");
  return positive_modulation(spec, theta, resolve_margins(spec, z_mag, bn));
}

/// dF / dcos(theta). For m1 != 1 the general form carries cot(m1 theta),
/// which has a pole where sin(m1 theta) vanishes.
inline double positive_modulation_dcos(const MarginSpec& spec, double theta, const ResolvedMargins& r) {
  const double sin_theta = std::sin(theta);
  if (spec.m1 == 1.0) {
    return std::cos(r.m2) + std::cos(theta) * std::sin(r.m2) / sin_theta;
  }
  const double sin_m1 = std::sin(spec.m1 * theta);
  require(std::abs(sin_m1) >= 1e-8, ErrorCode::PoleInDerivative,
          "sin(m1 * theta) too close to zero for the cot form");
  const double dcos_m1 = spec.m1 * sin_m1 / sin_theta;
  const double f = std::cos(r.m2) + std::cos(spec.m1 * theta) / sin_m1 * std::sin(r.m2);
  return dcos_m1 * f;
}

/// dF / d|z|, nonzero only for non-detached magnitude-dependent margins.
inline double positive_modulation_dmag(const MarginSpec& spec, double theta, const ResolvedMargins& r) {
  return -std::sin(spec.m1 * theta + r.m2) * r.dm2_dmag - r.dm3_dmag;
}

/// N(t, cos). `misclassified` is the gate "positive logit < cos_j".
inline double negative_modulation(const MarginSpec& spec, double cos_theta, bool misclassified) {
  if (!misclassified) return cos_theta;
  if (const auto* mv = std::get_if<MVSoftmaxNegative>(&spec.negative)) {
    return mv->t * cos_theta + mv->t - 1.0;
  }
  if (const auto* cur = std::get_if<CurricularNegative>(&spec.negative)) {
    return (cur->t + cos_theta) * cos_theta;
  }
  return cos_theta;
}

inline double negative_modulation_dcos(const MarginSpec& spec, double cos_theta, bool misclassified) {
  if (!misclassified) return 1.0;
  if (const auto* mv = std::get_if<MVSoftmaxNegative>(&spec.negative)) return mv->t;
  if (const auto* cur = std::get_if<CurricularNegative>(&spec.negative)) return cur->t + 2.0 * cos_theta;
  return 1.0;
}

/// Numerically stable softmax; returns log-sum-exp through `lse` if asked.
inline std::vector<double> softmax(std::span<const double> logits, double* lse = nullptr) {
  require(!logits.empty(), ErrorCode::InvalidArgument, "softmax of an empty vector");
  double hi = logits[0];
  for (double v : logits) hi = std::max(hi, v);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - hi);
    sum += p[k];
  }
  for (double& v : p) v /= sum;
  if (lse) *lse = hi + std::log(sum);
  return p;
}

/// -log softmax(logits)[label], accurate when the label dominates.
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  double rest = 0.0;
  bool label_is_max = true;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (k != label && logits[k] > logits[label]) label_is_max = false;
  }
  if (label_is_max) {
    for (std::size_t k = 0; k < logits.size(); ++k) {
      if (k != label) rest += std::exp(logits[k] - logits[label]);
    }
    return std::log1p(rest);
  }
  double lse = 0.0;
  softmax(logits, &lse);
  return lse - logits[label];
}

/// Forward pass of the class-center loss for a single sample.
struct SampleEvaluation {
  std::size_t label = 0;
  double z_mag = 0.0;
  std::vector<double> raw_cosines;  // unclamped, used for gradients
  std::vector<double> cosines;      // clamped
  double theta = 0.0;               // angle to the actual proxy
  ResolvedMargins margins;
  std::vector<double> modulated;    // Fnc_k
  std::vector<bool> gated;          // negative modulation active
  std::vector<double> probabilities;
  double loss = 0.0;
};

inline SampleEvaluation evaluate_sample(const MarginSpec& spec, const FeatureVector& z, std::size_t label,
                                        const ProxyMatrix& proxies, const BatchNormState& bn) {
  const std::size_t C = proxies.classes();
  require(label < C, ErrorCode::InvalidArgument, "label out of range");
  require(z.size() == static_cast<Eigen::Index>(proxies.dim()), ErrorCode::InvalidArgument,
          "feature dimension does not match proxies");
  SampleEvaluation ev;
  ev.label = label;
  ev.z_mag = z.norm();
  require(ev.z_mag > 0.0, ErrorCode::ZeroVector, "feature is the zero vector");
  ev.raw_cosines.resize(C);
  ev.cosines.resize(C);
  for (std::size_t k = 0; k < C; ++k) {
    ev.raw_cosines[k] = raw_cosine(z, proxies.row(k));
    ev.cosines[k] = clamp_cosine(ev.raw_cosines[k]);
  }
  ev.theta = std::acos(ev.cosines[label]);
  ev.margins = resolve_margins(spec, ev.z_mag, bn);
  const double positive = positive_modulation(spec, ev.theta, ev.margins);
  ev.modulated.resize(C);
  ev.gated.assign(C, false);
  std::vector<double> logits(C);
  for (std::size_t k = 0; k < C; ++k) {
    if (k == label) {
      ev.modulated[k] = positive;
    } else {
      ev.gated[k] = positive < ev.cosines[k];
      ev.modulated[k] = negative_modulation(spec, ev.cosines[k], ev.gated[k]);
    }
    logits[k] = spec.s * ev.modulated[k];
  }
  ev.probabilities = softmax(logits);
  ev.loss = cross_entropy(logits, label);
  return ev;
}

inline std::vector<double> class_probabilities(const MarginSpec& spec, const FeatureVector& z, std::size_t label,
                                               const ProxyMatrix& proxies, const BatchNormState& bn = {}) {
  return evaluate_sample(spec, z, label, proxies, bn).probabilities;
}

struct BatchLoss {
  std::vector<double> per_sample;
  double mean = 0.0;
};

/// Fixed-order mean, so batch results are reproducible bit for bit.
inline double ordered_mean(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
}

inline BatchLoss softmax_loss(const MarginSpec& spec, const FeatureBatch& batch, const ProxyMatrix& proxies,
                              const BatchNormState& bn) {
  batch.validate(proxies);
  BatchLoss out;
  out.per_sample.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.per_sample[i] = evaluate_sample(spec, batch.features[i], batch.labels[i], proxies, bn).loss;
  }
  out.mean = ordered_mean(out.per_sample);
  return out;
}

inline BatchLoss softmax_loss(const MarginSpec& spec, const FeatureBatch& batch, const ProxyMatrix& proxies) {
  return softmax_loss(spec, batch, proxies, BatchNormState::from_batch(batch));
}

/// Margin-free probability of the actual class. Callers treat it as a
/// constant: nothing differentiates through it.
inline double guidance_value(const FeatureVector& z, std::size_t label, const ProxyMatrix& proxies, double s) {
  require(s > 0.0, ErrorCode::InvalidArgument, "scale s must be positive");
  require(label < proxies.classes(), ErrorCode::InvalidArgument, "label out of range");
  std::vector<double> logits(proxies.classes());
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = s * cosine_similarity(z, proxies.row(k));
  return softmax(logits)[label];
}

enum class StrategyClass { ConstantMargin, SoftMarginNoMVP, SoftMarginMVP, HardMargin };

constexpr std::string_view to_string(StrategyClass c) {
  switch (c) {
    case StrategyClass::ConstantMargin: return "ConstantMargin";
    case StrategyClass::SoftMarginNoMVP: return "SoftMarginNoMVP";
    case StrategyClass::SoftMarginMVP: return "SoftMarginMVP";
    case StrategyClass::HardMargin: return "HardMargin";
  }
  return "Unknown";
}

/// Margin-strategy taxonomy. `has_mvp_reg` says whether a magnitude
/// regularizer is attached; with constant margins that regularizer can only
/// act through a detached guidance value, which is the hard-margin case.
inline StrategyClass classify_margin_strategy(const MarginSpec& spec, bool has_mvp_reg) {
  if (spec.constant_margins()) {
    return has_mvp_reg ? StrategyClass::HardMargin : StrategyClass::ConstantMargin;
  }
  return has_mvp_reg ? StrategyClass::SoftMarginMVP : StrategyClass::SoftMarginNoMVP;
}

}  // namespace qcplan

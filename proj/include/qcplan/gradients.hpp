#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"
#include "qcplan/margin.hpp"
#include "qcplan/regularizer.hpp"

namespace qcplan {

// All gradients are formed in cos(theta) coordinates; theta itself is never
// differentiated through acos.

/// P_y - 1 as minus the mass on the other classes; 1 - P_y cancels to zero
/// once a sample is well separated.
inline double actual_class_residual(const SampleEvaluation& ev) {
  double rest = 0.0;
  for (std::size_t k = 0; k < ev.probabilities.size(); ++k) {
    if (k != ev.label) rest += ev.probabilities[k];
  }
  return -rest;
}

/// dL_sm / dcos_k for every class: s (P_k - 1{k = y}) dFnc_k/dcos_k.
inline std::vector<double> logit_cosine_weights(const MarginSpec& spec, const SampleEvaluation& ev) {
  std::vector<double> w(ev.probabilities.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double residual = k == ev.label ? actual_class_residual(ev) : ev.probabilities[k];
    const double dfnc = k == ev.label ? positive_modulation_dcos(spec, ev.theta, ev.margins)
                                      : negative_modulation_dcos(spec, ev.cosines[k], ev.gated[k]);
    w[k] = spec.s * residual * dfnc;
  }
  return w;
}

struct ProxyGradients {
  FeatureVector g_ac;
  std::vector<FeatureVector> g_mc;  // indexed by class; the actual class slot is zero
};

inline ProxyGradients grad_sm_wrt_proxies(const MarginSpec& spec, const FeatureVector& z, std::size_t label,
                                          const ProxyMatrix& proxies, const BatchNormState& bn = {}) {
  const SampleEvaluation ev = evaluate_sample(spec, z, label, proxies, bn);
  const std::vector<double> w = logit_cosine_weights(spec, ev);
  ProxyGradients out;
  out.g_mc.assign(proxies.classes(), FeatureVector::Zero(z.size()));
  for (std::size_t k = 0; k < proxies.classes(); ++k) {
    FeatureVector g = w[k] * cosine_gradient(proxies.row(k), z);
    if (k == label) {
      out.g_ac = std::move(g);
    } else {
      out.g_mc[k] = std::move(g);
    }
  }
  return out;
}

struct FeatureGradients {
  FeatureVector g_theta;      // tangential
  FeatureVector g_mag_minus;  // radial, from magnitude-dependent margins
};

inline FeatureGradients grad_sm_wrt_feature(const MarginSpec& spec, const FeatureVector& z, std::size_t label,
                                            const ProxyMatrix& proxies, const BatchNormState& bn = {}) {
  const SampleEvaluation ev = evaluate_sample(spec, z, label, proxies, bn);
  const std::vector<double> w = logit_cosine_weights(spec, ev);
  FeatureGradients out;
  out.g_theta = FeatureVector::Zero(z.size());
  for (std::size_t k = 0; k < proxies.classes(); ++k) out.g_theta += w[k] * cosine_gradient(z, proxies.row(k));
  // only the actual class has a magnitude-dependent modulation
  const double dmag = spec.s * actual_class_residual(ev) *
                      positive_modulation_dmag(spec, ev.theta, ev.margins);
  out.g_mag_minus = dmag * (z / ev.z_mag);
  return out;
}

/// Unweighted radial gradient of L_reg; p_d is a constant here.
inline FeatureVector grad_reg_wrt_feature(const RegParams& params, const FeatureVector& z, double p_d) {
  const double mag = z.norm();
  require(mag > 0.0, ErrorCode::NonPositiveMagnitude, "feature is the zero vector");
  return reg_loss_dmag(params, mag, p_d) * (z / mag);
}

/// Gradient decomposition of L_sm + lambda_g L_reg for one sample.
/// g_mag_plus already carries the lambda_g weight.
struct GradientBreakdown {
  FeatureVector g_ac;
  std::vector<FeatureVector> g_mc;
  FeatureVector g_theta;
  FeatureVector g_mag_minus;
  FeatureVector g_mag_plus;
  FeatureVector g_mag;
  double guidance = 0.0;

  FeatureVector feature_gradient() const { return g_theta + g_mag; }
};

inline GradientBreakdown gradient_breakdown(const MarginSpec& spec, const std::optional<RegParams>& params,
                                            const FeatureVector& z, std::size_t label, const ProxyMatrix& proxies,
                                            const BatchNormState& bn = {}) {
  GradientBreakdown out;
  ProxyGradients pg = grad_sm_wrt_proxies(spec, z, label, proxies, bn);
  out.g_ac = std::move(pg.g_ac);
  out.g_mc = std::move(pg.g_mc);
  FeatureGradients fg = grad_sm_wrt_feature(spec, z, label, proxies, bn);
  out.g_theta = std::move(fg.g_theta);
  out.g_mag_minus = std::move(fg.g_mag_minus);
  out.guidance = guidance_value(z, label, proxies, spec.s);
  if (params) {
    out.g_mag_plus = params->lambda_g * grad_reg_wrt_feature(*params, z, out.guidance);
  } else {
    out.g_mag_plus = FeatureVector::Zero(z.size());
  }
  out.g_mag = out.g_mag_minus + out.g_mag_plus;
  return out;
}

/// |g_theta(scale z)| / |g_theta(z)| for a constant-margin spec; NaN when the
/// feature is aligned with every proxy so that g_theta vanishes.
inline double inverse_scaling_check(const MarginSpec& spec, const FeatureVector& z, std::size_t label,
                                   const ProxyMatrix& proxies, double scale = 2.0) {
  require(spec.constant_margins(), ErrorCode::InvalidArgument, "scaling law needs constant margins");
  require(scale > 0.0, ErrorCode::InvalidArgument, "scale must be positive");
  const double base = grad_sm_wrt_feature(spec, z, label, proxies).g_theta.norm();
  const double scaled = grad_sm_wrt_feature(spec, scale * z, label, proxies).g_theta.norm();
  if (base <= 1e-300 || scaled <= 1e-300) return std::numeric_limits<double>::quiet_NaN();
  return scaled / base;
}

struct CouplingReport {
  bool sm_scale_invariant = false;
  double sm_scale_deviation = 0.0;
  bool reg_rotation_invariant = true;
  double reg_rotation_deviation = 0.0;
  double cross_partial = 0.0;
};

inline constexpr double kCouplingTolerance = 1e-9;

/// Random orthogonal map from the QR factor of a Gaussian matrix.
inline Eigen::MatrixXd random_orthogonal(Eigen::Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

/// Probes whether direction and magnitude are optimized by separate terms:
/// L_sm invariant under scaling of z, L_reg invariant under rotation of z at
/// fixed p_d, and the mixed partial d2 L_sm / (d|z| d phi) along the
/// tangential direction toward the actual proxy.
inline CouplingReport coupling_probe(const MarginSpec& spec, const std::optional<RegParams>& params,
                                     const FeatureVector& z, std::size_t label, const ProxyMatrix& proxies,
                                     const BatchNormState& bn = {}, std::uint64_t seed = 7) {
  CouplingReport out;
  auto sm = [&](const FeatureVector& v) { return evaluate_sample(spec, v, label, proxies, bn).loss; };
  const double base = sm(z);
  for (double c : {0.5, 2.0, 5.0}) out.sm_scale_deviation = std::max(out.sm_scale_deviation, std::abs(sm(c * z) - base));
  out.sm_scale_invariant = out.sm_scale_deviation < kCouplingTolerance;

  if (params) {
    const double p_d = guidance_value(z, label, proxies, spec.s);
    const double reg = reg_loss(*params, z.norm(), p_d);
    for (std::uint64_t trial = 0; trial < 4; ++trial) {
      const FeatureVector rotated = random_orthogonal(z.size(), seed + trial) * z;
      out.reg_rotation_deviation =
          std::max(out.reg_rotation_deviation, std::abs(reg_loss(*params, rotated.norm(), p_d) - reg));
    }
    out.reg_rotation_invariant = out.reg_rotation_deviation < kCouplingTolerance;
  }

  // polar coordinates (r, phi) in the plane of z and the actual proxy
  const double r0 = z.norm();
  const FeatureVector u = z / r0;
  FeatureVector v = proxies.row(label);
  v -= u.dot(v) * u;
  if (v.norm() < 1e-12) {
    v = FeatureVector::Zero(z.size());
    Eigen::Index axis = 0;
    u.cwiseAbs().minCoeff(&axis);
    v(axis) = 1.0;
    v -= u.dot(v) * u;
  }
  v.normalize();
  auto polar = [&](double r, double phi) -> double {
    return sm(r * (std::cos(phi) * u + std::sin(phi) * v));
  };
  const double hr = 1e-3 * r0;
  const double hp = 1e-3;
  out.cross_partial = (polar(r0 + hr, hp) - polar(r0 + hr, -hp) - polar(r0 - hr, hp) + polar(r0 - hr, -hp)) /
                      (4.0 * hr * hp);
  return out;
}

struct FDReport {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double step = 0.0;
};

/// Central differences with h = 1e-6 max(1, |x_i|). Each coordinate's error
/// is taken relative to the larger infinity norm of the two gradients.
inline FDReport finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& loss,
                                        const Eigen::VectorXd& point, const Eigen::VectorXd& analytic) {
  require(point.size() == analytic.size(), ErrorCode::InvalidArgument, "gradient size mismatch");
  const double f0 = loss(point);
  require(std::isfinite(f0), ErrorCode::NonFiniteLoss, "loss is not finite at the check point");
  Eigen::VectorXd numeric(point.size());
  Eigen::VectorXd steps(point.size());
  Eigen::VectorXd x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(point(i)));
    x(i) = point(i) + h;
    const double fp = loss(x);
    x(i) = point(i) - h;
    const double fm = loss(x);
    x(i) = point(i);
    require(std::isfinite(fp) && std::isfinite(fm), ErrorCode::NonFiniteLoss, "loss is not finite near the point");
    numeric(i) = (fp - fm) / (2.0 * h);
    steps(i) = h;
  }
  const double scale = std::max({analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>(),
                                 std::numeric_limits<double>::min()});
  FDReport report;
  report.step = steps.size() ? steps(0) : 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double err = std::abs(analytic(i) - numeric(i)) / scale;
    if (err > report.max_rel_error || i == 0) {
      report.max_rel_error = err;
      report.worst_coordinate = static_cast<std::size_t>(i);
      report.step = steps(i);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Randomized gradient suite over the whole loss family.

struct LossCase {
  std::string name;
  MarginSpec spec;
  std::optional<RegParams> reg;
};

inline std::vector<LossCase> loss_family() {
  return {
      {"margin-free", MarginSpec::margin_free(32.0), std::nullopt},
      {"sphereface", MarginSpec::sphereface(1.35, 32.0), std::nullopt},
      {"cosface", MarginSpec::cosface(0.35, 32.0), std::nullopt},
      {"arcface", MarginSpec::arcface(0.5, 32.0), std::nullopt},
      {"mv-softmax", MarginSpec::mv_softmax(0.5, 1.2, 32.0), std::nullopt},
      {"curricular", MarginSpec::curricular(0.5, 0.3, 32.0), std::nullopt},
      {"magface", MarginSpec::magface(MagLinear{}, 32.0), std::nullopt},
      {"adaface", MarginSpec::adaface(0.4, 32.0), std::nullopt},
      {"qcface", MarginSpec::arcface(0.5, 32.0), RegParams::balanced(1.0, 100.0)},
  };
}

/// Concatenation [z; w_0; ...; w_{C-1}].
inline Eigen::VectorXd pack_parameters(const FeatureVector& z, const ProxyMatrix& proxies) {
  const Eigen::Index d = z.size();
  Eigen::VectorXd x(d * (1 + static_cast<Eigen::Index>(proxies.classes())));
  x.head(d) = z;
  for (std::size_t k = 0; k < proxies.classes(); ++k) {
    x.segment(d * (1 + static_cast<Eigen::Index>(k)), d) = proxies.row(k);
  }
  return x;
}

inline std::pair<FeatureVector, ProxyMatrix> unpack_parameters(const Eigen::VectorXd& x, Eigen::Index d) {
  const Eigen::Index C = x.size() / d - 1;
  Eigen::MatrixXd w(C, d);
  for (Eigen::Index k = 0; k < C; ++k) w.row(k) = x.segment(d * (1 + k), d).transpose();
  return {x.head(d), ProxyMatrix(std::move(w))};
}

/// Only AdaNorm margins are detached; MagLinear stays differentiable.
inline MarginSpec detach_normalized_margins(const MarginSpec& spec, double z_mag, const BatchNormState& bn) {
  MarginSpec out = spec;
  const ResolvedMargins r = resolve_margins(spec, z_mag, bn);
  if (std::holds_alternative<AdaNorm>(spec.m2)) out.m2 = ConstantAngle{r.m2};
  if (std::holds_alternative<AdaNorm>(spec.m3)) out.m3 = ConstantBoundary{r.m3};
  return out;
}

/// The loss as autodiff with stop-gradients would see it: detached pieces
/// (AdaNorm margins, p_d) frozen at their values at the base point.
inline std::function<double(const Eigen::VectorXd&)> detached_objective(const LossCase& lc, const FeatureVector& z,
                                                                         std::size_t label, const ProxyMatrix& proxies,
                                                                         const BatchNormState& bn) {
  const MarginSpec spec = detach_normalized_margins(lc.spec, z.norm(), bn);
  const double p_d = guidance_value(z, label, proxies, lc.spec.s);
  const Eigen::Index d = z.size();
  return [spec, p_d, d, label, bn, reg = lc.reg](const Eigen::VectorXd& x) {
    auto [zz, ww] = unpack_parameters(x, d);
    double value = evaluate_sample(spec, zz, label, ww, bn).loss;
    if (reg) value += reg->lambda_g * reg_loss(*reg, zz.norm(), p_d);
    return value;
  };
}

inline Eigen::VectorXd analytic_gradient(const LossCase& lc, const FeatureVector& z, std::size_t label,
                                         const ProxyMatrix& proxies, const BatchNormState& bn) {
  const GradientBreakdown g = gradient_breakdown(lc.spec, lc.reg, z, label, proxies, bn);
  const Eigen::Index d = z.size();
  Eigen::VectorXd out(d * (1 + static_cast<Eigen::Index>(proxies.classes())));
  out.head(d) = g.feature_gradient();
  for (std::size_t k = 0; k < proxies.classes(); ++k) {
    out.segment(d * (1 + static_cast<Eigen::Index>(k)), d) = k == label ? g.g_ac : g.g_mc[k];
  }
  return out;
}

struct GradientInstance {
  FeatureVector z;
  std::size_t label = 0;
  ProxyMatrix proxies;
  BatchNormState bn;
};

/// Random (z, label, proxies) with C in [2, 8] and d in [2, 16], rejecting
/// points where the loss is not smooth: near-aligned vectors, negative gates
/// close to switching, the cot pole for m1 != 1, MagLinear clamp edges.
inline GradientInstance random_gradient_instance(const LossCase& lc, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> classes(2, 8);
  std::uniform_int_distribution<int> dims(2, 16);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const int C = classes(rng);
    const int d = dims(rng);
    GradientInstance inst;
    Eigen::MatrixXd w(C, d);
    for (int k = 0; k < C; ++k) {
      for (int j = 0; j < d; ++j) w(k, j) = normal(rng);
      w.row(k) *= (0.5 + 1.5 * unit(rng)) / w.row(k).norm();
    }
    inst.proxies = ProxyMatrix(std::move(w));
    inst.z = FeatureVector(d);
    for (int j = 0; j < d; ++j) inst.z(j) = normal(rng);
    inst.z *= (15.0 + 85.0 * unit(rng)) / inst.z.norm();
    inst.label = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, C - 1)(rng));
    inst.bn = BatchNormState{50.0 + 20.0 * unit(rng), 10.0 + 20.0 * unit(rng)};

    const SampleEvaluation ev = evaluate_sample(lc.spec, inst.z, inst.label, inst.proxies, inst.bn);
    bool smooth = true;
    for (std::size_t k = 0; k < ev.raw_cosines.size(); ++k) {
      if (std::abs(ev.raw_cosines[k]) > 1.0 - 1e-3) smooth = false;
      if (k != inst.label && std::abs(ev.modulated[inst.label] - ev.cosines[k]) < 1e-3) smooth = false;
    }
    if (lc.spec.m1 != 1.0 && std::abs(std::sin(lc.spec.m1 * ev.theta)) < 1e-2) smooth = false;
    if (const auto* band = std::get_if<MagLinear>(&lc.spec.m2)) {
      if (ev.z_mag < band->l_a + 1.0 || ev.z_mag > band->u_a - 1.0) smooth = false;
    }
    if (std::holds_alternative<AdaNorm>(lc.spec.m2) || std::holds_alternative<AdaNorm>(lc.spec.m3)) {
      if (std::abs(std::abs((ev.z_mag - inst.bn.mean) / inst.bn.std) - 1.0) < 1e-3) smooth = false;
    }
    if (smooth) return inst;
  }
  throw Error(ErrorCode::InvalidArgument, "could not draw a smooth gradient instance");
}

struct GradientCheckRow {
  std::string loss;
  std::size_t instance = 0;
  std::size_t classes = 0;
  std::size_t dim = 0;
  FDReport report;
  bool passed = false;
};

inline constexpr double kGradientTolerance = 1e-6;

/// Runs `instances` random FD checks for every case. `mutation`, when set,
/// perturbs the analytic gradient before comparison; the CLI uses it to
/// prove that the check can fail.
inline std::vector<GradientCheckRow> run_gradient_suite(const std::vector<LossCase>& cases, std::size_t instances,
                                                        std::uint64_t seed, double mutation = 0.0) {
  std::vector<GradientCheckRow> rows;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ULL * (c + 1));
    for (std::size_t i = 0; i < instances; ++i) {
      const GradientInstance inst = random_gradient_instance(cases[c], rng);
      Eigen::VectorXd analytic = analytic_gradient(cases[c], inst.z, inst.label, inst.proxies, inst.bn);
      if (mutation != 0.0) analytic(0) += mutation * analytic.lpNorm<Eigen::Infinity>();
      const Eigen::VectorXd point = pack_parameters(inst.z, inst.proxies);
      GradientCheckRow row;
      row.loss = cases[c].name;
      row.instance = i;
      row.classes = inst.proxies.classes();
      row.dim = inst.proxies.dim();
      row.report =
          finite_difference_check(detached_objective(cases[c], inst.z, inst.label, inst.proxies, inst.bn), point,
                                  analytic);
      row.passed = row.report.max_rel_error < kGradientTolerance;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace qcplan

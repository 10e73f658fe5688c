#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"
#include "qcplan/gradients.hpp"
#include "qcplan/margin.hpp"
#include "qcplan/regularizer.hpp"
#include "qcplan/synthetic.hpp"

namespace qcplan {

enum class ParamMode { FrozenDirection, LinearEncoder };

constexpr std::string_view to_string(ParamMode m) {
  return m == ParamMode::FrozenDirection ? "frozen_direction" : "linear_encoder";
}

enum class Phase { Warmup, Main };

constexpr std::string_view to_string(Phase p) { return p == Phase::Warmup ? "warmup" : "main"; }

struct TrainConfig {
  ParamMode mode = ParamMode::LinearEncoder;
  std::size_t warmup_epochs = 10;
  std::size_t main_epochs = 30;
  double lr = 0.006;
  std::vector<std::size_t> lr_milestones;
  double lr_decay = 0.1;
  std::size_t batch_size = 32;
  MarginSpec spec = MarginSpec::arcface(0.5, 6.0);
  RegParams reg = RegParams::balanced(10.0, 110.0, OffsetMode::Tracking, 300.0);
  std::uint64_t seed = 1;

  std::size_t total_epochs() const { return warmup_epochs + main_epochs; }

  void validate() const {
    require(main_epochs >= 1, ErrorCode::ConfigError, "train.main_epochs must be >= 1");
    require(std::isfinite(lr) && lr >= 0.0, ErrorCode::ConfigError, "train.lr must be >= 0");
    require(batch_size >= 1, ErrorCode::ConfigError, "train.batch_size must be >= 1");
    require(std::isfinite(lr_decay) && lr_decay > 0.0, ErrorCode::ConfigError, "train.lr_decay must be positive");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      require(lr_milestones[i] < total_epochs(), ErrorCode::ConfigError, "lr milestone beyond the last epoch");
      require(i == 0 || lr_milestones[i] > lr_milestones[i - 1], ErrorCode::ConfigError,
              "lr milestones must be strictly increasing");
    }
    spec.validate();
    reg.validate();
  }

  double lr_at(std::size_t epoch) const {
    double out = lr;
    for (std::size_t m : lr_milestones) {
      if (epoch >= m) out *= lr_decay;
    }
    return out;
  }
};

/// The warm-up objective: the configured angular margin in plain ArcFace form.
inline MarginSpec warmup_spec(const MarginSpec& spec) {
  const auto* c = std::get_if<ConstantAngle>(&spec.m2);
  return MarginSpec::arcface(c ? c->m2 : 0.5, spec.s);
}

struct HistoryRow {
  std::size_t epoch = 0;
  Phase phase = Phase::Warmup;
  double mean_lsm = 0.0;
  double mean_lreg = 0.0;
  double mean_pd = 0.0;
  double lr = 0.0;
};

/// Dataset-wide losses for the current parameters.
struct Evaluation {
  double mean_lsm = 0.0;
  double mean_lreg = 0.0;
  double mean_pd = 0.0;
};

struct PlanState {
  ParamMode mode = ParamMode::LinearEncoder;
  ProxyMatrix proxies;
  // FrozenDirection
  std::vector<FeatureVector> directions;
  std::vector<double> magnitudes;
  // LinearEncoder: z = encoder x + bias
  Eigen::MatrixXd encoder;
  FeatureVector bias;

  std::size_t epoch = 0;
  Evaluation initial;
  std::vector<HistoryRow> history;

  std::size_t samples(const SyntheticData& data) const {
    return mode == ParamMode::FrozenDirection ? directions.size() : static_cast<std::size_t>(data.inputs.rows());
  }

  FeatureVector embedding(std::size_t i, const SyntheticData& data) const {
    if (mode == ParamMode::FrozenDirection) return magnitudes[i] * directions[i];
    return encoder * data.inputs.row(static_cast<Eigen::Index>(i)).transpose() + bias;
  }

  FeatureBatch embeddings(const SyntheticData& data) const {
    FeatureBatch out;
    const std::size_t n = samples(data);
    out.features.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.features.push_back(embedding(i, data));
    out.labels = data.batch.labels;
    out.meta = data.batch.meta;
    return out;
  }
};

inline PlanState init_state(const TrainConfig& cfg, const SyntheticData& data) {
  cfg.validate();
  const std::size_t C = 1 + *std::max_element(data.true_labels.begin(), data.true_labels.end());
  require(C >= 2, ErrorCode::ConfigError, "training needs at least two classes");
  const Eigen::Index d = data.prototypes.cols();
  std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A55A5A5A5AULL);

  PlanState state;
  state.mode = cfg.mode;
  Eigen::MatrixXd w(static_cast<Eigen::Index>(C), d);
  for (Eigen::Index k = 0; k < w.rows(); ++k) w.row(k) = detail::normal_vector(rng, d).normalized().transpose();
  state.proxies = ProxyMatrix(std::move(w));

  const double mid = 0.5 * (cfg.reg.l_a + cfg.reg.u_a);
  if (cfg.mode == ParamMode::FrozenDirection) {
    state.directions = data.batch.features;
    state.magnitudes.assign(state.directions.size(), mid);
  } else {
    // random orthonormal rows scaled so that signal inputs land near the middle of the band
    const Eigen::Index in = data.inputs.cols();
    state.encoder = detail::orthonormal_columns(rng, in, d).transpose() * (mid / data.input_scale);
    state.bias = FeatureVector::Zero(d);
  }
  return state;
}

inline Evaluation evaluate_state(const PlanState& state, const TrainConfig& cfg, const SyntheticData& data,
                                 Phase phase) {
  const FeatureBatch batch = state.embeddings(data);
  const MarginSpec spec = phase == Phase::Warmup ? warmup_spec(cfg.spec) : cfg.spec;
  const BatchNormState bn = BatchNormState::from_batch(batch);
  std::vector<double> lsm(batch.size()), lreg(batch.size()), pd(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleEvaluation ev = evaluate_sample(spec, batch.features[i], batch.labels[i], state.proxies, bn);
    lsm[i] = ev.loss;
    pd[i] = guidance_value(batch.features[i], batch.labels[i], state.proxies, spec.s);
    lreg[i] = reg_loss(cfg.reg, ev.z_mag, pd[i]);
  }
  return {ordered_mean(lsm), ordered_mean(lreg), ordered_mean(pd)};
}

namespace detail {

inline bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

inline std::string describe_step(const PlanState& state, Phase phase, const std::vector<std::size_t>& indices) {
  std::ostringstream os;
  os << "non-finite gradient at epoch " << state.epoch << " (" << to_string(phase) << "), batch samples";
  for (std::size_t i : indices) os << ' ' << i;
  return os.str();
}

}  // namespace detail

/// One SGD step on the mean loss over `indices`. Per-sample gradients are
/// summed in index order, then applied in a single update.
inline void train_step(PlanState& state, const TrainConfig& cfg, const SyntheticData& data,
                       const std::vector<std::size_t>& indices, Phase phase, double lr) {
  require(!indices.empty(), ErrorCode::InvalidArgument, "empty batch");
  const MarginSpec spec = phase == Phase::Warmup ? warmup_spec(cfg.spec) : cfg.spec;
  const std::optional<RegParams> reg =
      phase == Phase::Main && cfg.reg.lambda_g > 0.0 ? std::optional<RegParams>(cfg.reg) : std::nullopt;

  std::vector<FeatureVector> z;
  z.reserve(indices.size());
  std::vector<double> mags;
  for (std::size_t i : indices) {
    require(i < state.samples(data), ErrorCode::InvalidArgument, "batch index out of range");
    z.push_back(state.embedding(i, data));
    mags.push_back(z.back().norm());
    require(std::isfinite(mags.back()), ErrorCode::NonFiniteGradient,
            "embedding overflowed; " + detail::describe_step(state, phase, indices));
  }
  const BatchNormState bn = BatchNormState::from_magnitudes(mags);
  const double inv_b = 1.0 / static_cast<double>(indices.size());

  Eigen::MatrixXd grad_w = Eigen::MatrixXd::Zero(state.proxies.matrix().rows(), state.proxies.matrix().cols());
  Eigen::MatrixXd grad_a;
  FeatureVector grad_b;
  std::vector<double> grad_mag;
  if (state.mode == ParamMode::LinearEncoder) {
    grad_a = Eigen::MatrixXd::Zero(state.encoder.rows(), state.encoder.cols());
    grad_b = FeatureVector::Zero(state.bias.size());
  } else {
    grad_mag.assign(indices.size(), 0.0);
  }

  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    const std::size_t y = data.batch.labels[i];
    const GradientBreakdown g = gradient_breakdown(spec, reg, z[j], y, state.proxies, bn);
    for (std::size_t k = 0; k < state.proxies.classes(); ++k) {
      grad_w.row(static_cast<Eigen::Index>(k)) += inv_b * (k == y ? g.g_ac : g.g_mc[k]).transpose();
    }
    const FeatureVector gz = inv_b * g.feature_gradient();
    if (state.mode == ParamMode::LinearEncoder) {
      grad_a.noalias() += gz * data.inputs.row(static_cast<Eigen::Index>(i));
      grad_b += gz;
    } else {
      // directions are the backbone's output: only the radial part moves
      grad_mag[j] = gz.dot(state.directions[i]);
    }
  }

  bool finite = detail::all_finite(grad_w);
  if (state.mode == ParamMode::LinearEncoder) {
    finite = finite && detail::all_finite(grad_a) && grad_b.allFinite();
  } else {
    for (double g : grad_mag) finite = finite && std::isfinite(g);
  }
  require(finite, ErrorCode::NonFiniteGradient, detail::describe_step(state, phase, indices));
  if (lr == 0.0) return;

  // a finite gradient can still overflow once scaled; nothing moves in that case
  grad_w *= lr;
  bool step_finite = detail::all_finite(grad_w);
  if (state.mode == ParamMode::LinearEncoder) {
    grad_a *= lr;
    grad_b *= lr;
    step_finite = step_finite && detail::all_finite(grad_a) && grad_b.allFinite();
  } else {
    for (double& g : grad_mag) step_finite = step_finite && std::isfinite(g *= lr);
  }
  require(step_finite, ErrorCode::NonFiniteGradient, "update overflowed; " + detail::describe_step(state, phase, indices));

  state.proxies.mutable_matrix() -= grad_w;
  if (state.mode == ParamMode::LinearEncoder) {
    state.encoder -= grad_a;
    state.bias -= grad_b;
  } else {
    for (std::size_t j = 0; j < indices.size(); ++j) state.magnitudes[indices[j]] -= grad_mag[j];
  }
}

/// Warm-up epochs with the ArcFace-form loss, then the full objective.
/// `state` must come from init_state; on a numerical abort it holds the
/// parameters from before the failing step. `on_epoch` sees each history row.
inline void run_schedule(const TrainConfig& cfg, const SyntheticData& data, PlanState& state,
                         const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  const std::size_t n = state.samples(data);
  state.initial = evaluate_state(state, cfg, data, cfg.warmup_epochs > 0 ? Phase::Warmup : Phase::Main);
  std::mt19937_64 order_rng(cfg.seed ^ 0x3C6EF372FE94F82BULL);
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < cfg.total_epochs(); ++e) {
    state.epoch = e;
    const Phase phase = e < cfg.warmup_epochs ? Phase::Warmup : Phase::Main;
    const double lr = cfg.lr_at(e);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    detail::shuffle(order, order_rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      train_step(state, cfg, data, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                            order.begin() + static_cast<std::ptrdiff_t>(stop)),
                 phase, lr);
    }
    const Evaluation ev = evaluate_state(state, cfg, data, phase);
    state.history.push_back({e, phase, ev.mean_lsm, ev.mean_lreg, ev.mean_pd, lr});
    if (on_epoch) on_epoch(state.history.back());
  }
  state.epoch = cfg.total_epochs();
}

inline PlanState run_schedule(const TrainConfig& cfg, const SyntheticData& data,
                              const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  PlanState state = init_state(cfg, data);
  run_schedule(cfg, data, state, on_epoch);
  return state;
}

/// Mean L_reg when the full objective takes over: the last warm-up row, or
/// the initial evaluation when there is no warm-up.
inline double main_phase_start_lreg(const PlanState& state, const TrainConfig& cfg) {
  if (cfg.warmup_epochs == 0 || state.history.size() < cfg.warmup_epochs) return state.initial.mean_lreg;
  return state.history[cfg.warmup_epochs - 1].mean_lreg;
}

/// Epochs where mean L_sm and mean L_reg both rose by more than `threshold`
/// relative to the previous row (the first row compares to the initial state).
inline std::vector<std::size_t> joint_loss_rises(const PlanState& state, double threshold = 0.10) {
  std::vector<std::size_t> out;
  double prev_sm = state.initial.mean_lsm;
  double prev_reg = state.initial.mean_lreg;
  for (const HistoryRow& row : state.history) {
    if (row.mean_lsm > (1.0 + threshold) * prev_sm && row.mean_lreg > (1.0 + threshold) * prev_reg) {
      out.push_back(row.epoch);
    }
    prev_sm = row.mean_lsm;
    prev_reg = row.mean_lreg;
  }
  return out;
}

/// Per-sample outcome of a run.
struct SampleRecord {
  std::size_t sample_id = 0;
  std::size_t label = 0;
  double noise_sigma = 0.0;
  bool mislabeled = false;
  double p_d = 0.0;
  double magnitude = 0.0;
  double cos_to_proxy = 0.0;
};

inline std::vector<SampleRecord> sample_records(const PlanState& state, const TrainConfig& cfg,
                                                const SyntheticData& data) {
  std::vector<SampleRecord> out;
  const std::size_t n = state.samples(data);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const FeatureVector z = state.embedding(i, data);
    const std::size_t y = data.batch.labels[i];
    out.push_back({i, y, data.batch.meta[i].noise_sigma, data.batch.meta[i].mislabeled,
                   guidance_value(z, y, state.proxies, cfg.spec.s), z.norm(),
                   cosine_similarity(z, state.proxies.row(y))});
  }
  return out;
}

}  // namespace qcplan

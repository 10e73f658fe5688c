#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/margin.hpp"
#include "qcplan/planner.hpp"
#include "qcplan/regularizer.hpp"
#include "qcplan/synthetic.hpp"

namespace qcplan {

using json = nlohmann::json;

inline const std::vector<std::string>& emit_tokens() {
  static const std::vector<std::string> tokens{"history", "magnitudes", "projection", "metrics"};
  return tokens;
}

/// Everything a run needs. `train.spec` and `train.reg` are not stored
/// separately; training_config() copies them from `loss` and `reg`.
struct ExperimentConfig {
  MarginSpec loss = MarginSpec::arcface(0.5, 6.0);
  RegParams reg = RegParams::balanced(10.0, 110.0, OffsetMode::Tracking, 300.0);
  SyntheticSpec data;
  TrainConfig train;
  std::string output_dir = "runs/default";
  std::vector<std::string> emit{"history", "magnitudes"};

  TrainConfig training_config() const {
    TrainConfig t = train;
    t.spec = loss;
    t.reg = reg;
    return t;
  }

  void validate() const {
    try {
      loss.validate();
      reg.validate();
      data.validate();
      training_config().validate();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::ConfigError) throw;
      throw Error(ErrorCode::ConfigError, e.what());
    }
    require(!output_dir.empty(), ErrorCode::ConfigError, "output_dir must not be empty");
    for (const auto& token : emit) {
      require(std::find(emit_tokens().begin(), emit_tokens().end(), token) != emit_tokens().end(),
              ErrorCode::ConfigError, "unknown emit token '" + token + "'");
    }
  }
};

/// The configuration the acceptance checks are stated against.
inline ExperimentConfig canonical_config() {
  ExperimentConfig c;
  c.output_dir = "runs/canonical";
  c.train.lr = 0.014;
  c.train.lr_milestones = {10};
  c.train.lr_decay = 0.25;
  c.emit = {"history", "magnitudes", "projection", "metrics"};
  return c;
}

namespace detail {

/// Reads an object field by field and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j.is_object(), ErrorCode::ConfigError, where_ + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  double real(const char* key, double fallback) {
    if (!has(key)) return fallback;
    const json& v = at(key);
    require(v.is_number(), ErrorCode::ConfigError, path(key) + " must be a number");
    return v.get<double>();
  }

  std::uint64_t integer(const char* key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    const json& v = at(key);
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), ErrorCode::ConfigError,
            path(key) + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::string text(const char* key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const json& v = at(key);
    require(v.is_string(), ErrorCode::ConfigError, path(key) + " must be a string");
    return v.get<std::string>();
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      require(seen_.count(item.key()) > 0, ErrorCode::ConfigError,
              "unknown key '" + where_ + "." + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline AngularMarginMode parse_m2(const json& j) {
  Fields f(j, "loss.m2");
  const std::string mode = f.text("mode", "constant");
  AngularMarginMode out;
  if (mode == "constant") {
    out = ConstantAngle{f.real("value", 0.0)};
  } else if (mode == "mag_linear") {
    MagLinear b;
    b.l_m = f.real("l_m", b.l_m);
    b.u_m = f.real("u_m", b.u_m);
    b.l_a = f.real("l_a", b.l_a);
    b.u_a = f.real("u_a", b.u_a);
    out = b;
  } else if (mode == "ada_norm") {
    out = AdaNorm{f.real("m", AdaNorm{}.m)};
  } else {
    throw Error(ErrorCode::ConfigError, "loss.m2.mode must be constant, mag_linear or ada_norm");
  }
  f.finish();
  return out;
}

inline BoundaryMarginMode parse_m3(const json& j) {
  Fields f(j, "loss.m3");
  const std::string mode = f.text("mode", "constant");
  BoundaryMarginMode out;
  if (mode == "constant") {
    out = ConstantBoundary{f.real("value", 0.0)};
  } else if (mode == "ada_norm") {
    out = AdaNorm{f.real("m", AdaNorm{}.m)};
  } else {
    throw Error(ErrorCode::ConfigError, "loss.m3.mode must be constant or ada_norm");
  }
  f.finish();
  return out;
}

inline NegativeMode parse_negative(const json& j) {
  Fields f(j, "loss.negative");
  const std::string mode = f.text("mode", "identity");
  NegativeMode out;
  if (mode == "identity") {
    out = IdentityNegative{};
  } else if (mode == "mv_softmax") {
    out = MVSoftmaxNegative{f.real("t", MVSoftmaxNegative{}.t)};
  } else if (mode == "curricular") {
    out = CurricularNegative{f.real("t", CurricularNegative{}.t)};
  } else {
    throw Error(ErrorCode::ConfigError, "loss.negative.mode must be identity, mv_softmax or curricular");
  }
  f.finish();
  return out;
}

inline json dump_m2(const AngularMarginMode& m) {
  if (const auto* c = std::get_if<ConstantAngle>(&m)) return {{"mode", "constant"}, {"value", c->m2}};
  if (const auto* b = std::get_if<MagLinear>(&m)) {
    return {{"mode", "mag_linear"}, {"l_m", b->l_m}, {"u_m", b->u_m}, {"l_a", b->l_a}, {"u_a", b->u_a}};
  }
  return {{"mode", "ada_norm"}, {"m", std::get<AdaNorm>(m).m}};
}

inline json dump_m3(const BoundaryMarginMode& m) {
  if (const auto* c = std::get_if<ConstantBoundary>(&m)) return {{"mode", "constant"}, {"value", c->m3}};
  return {{"mode", "ada_norm"}, {"m", std::get<AdaNorm>(m).m}};
}

inline json dump_negative(const NegativeMode& m) {
  if (const auto* mv = std::get_if<MVSoftmaxNegative>(&m)) return {{"mode", "mv_softmax"}, {"t", mv->t}};
  if (const auto* c = std::get_if<CurricularNegative>(&m)) return {{"mode", "curricular"}, {"t", c->t}};
  return {{"mode", "identity"}};
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json noise = json::array();
  for (const auto& level : c.data.noise_levels) noise.push_back({{"sigma", level.sigma}, {"fraction", level.fraction}});
  return {
      {"loss",
       {{"m1", c.loss.m1},
        {"m2", detail::dump_m2(c.loss.m2)},
        {"m3", detail::dump_m3(c.loss.m3)},
        {"s", c.loss.s},
        {"negative", detail::dump_negative(c.loss.negative)}}},
      {"reg",
       {{"l_a", c.reg.l_a},
        {"u_a", c.reg.u_a},
        {"k", c.reg.k},
        {"b_mode", c.reg.b_mode == OffsetMode::Tracking ? "tracking" : "zero"},
        {"lambda_g", c.reg.lambda_g}}},
      {"data",
       {{"classes", c.data.classes},
        {"dim", c.data.dim},
        {"n_per_class", c.data.n_per_class},
        {"noise_levels", noise},
        {"mislabel_rate", c.data.mislabel_rate},
        {"input_dim", c.data.input_dim},
        {"input_scale", c.data.input_scale},
        {"nuisance_sigma", c.data.nuisance_sigma},
        {"seed", c.data.seed}}},
      {"train",
       {{"mode", std::string(to_string(c.train.mode))},
        {"warmup_epochs", c.train.warmup_epochs},
        {"main_epochs", c.train.main_epochs},
        {"lr", c.train.lr},
        {"lr_milestones", c.train.lr_milestones},
        {"lr_decay", c.train.lr_decay},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed}}},
      {"output_dir", c.output_dir},
      {"emit", c.emit},
  };
}

/// Missing keys take their defaults; a missing or null reg.k is solved for.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::Fields top(j, "config");
  if (top.has("loss")) {
    detail::Fields f(top.at("loss"), "loss");
    c.loss = MarginSpec{};
    c.loss.m1 = f.real("m1", 1.0);
    c.loss.m2 = f.has("m2") ? detail::parse_m2(f.at("m2")) : AngularMarginMode{ConstantAngle{0.5}};
    c.loss.m3 = f.has("m3") ? detail::parse_m3(f.at("m3")) : BoundaryMarginMode{ConstantBoundary{}};
    c.loss.s = f.real("s", 6.0);
    c.loss.negative = f.has("negative") ? detail::parse_negative(f.at("negative")) : NegativeMode{IdentityNegative{}};
    f.finish();
  }
  if (top.has("reg")) {
    detail::Fields f(top.at("reg"), "reg");
    c.reg.l_a = f.real("l_a", c.reg.l_a);
    c.reg.u_a = f.real("u_a", c.reg.u_a);
    const bool solve = !f.has("k") || f.at("k").is_null();
    if (!solve) c.reg.k = f.real("k", 0.0);
    const std::string mode = f.text("b_mode", "tracking");
    require(mode == "tracking" || mode == "zero", ErrorCode::ConfigError, "reg.b_mode must be tracking or zero");
    c.reg.b_mode = mode == "tracking" ? OffsetMode::Tracking : OffsetMode::Zero;
    c.reg.lambda_g = f.real("lambda_g", c.reg.lambda_g);
    f.finish();
    if (solve) {
      try {
        c.reg.k = solve_k(c.reg.l_a, c.reg.u_a);
      } catch (const Error& e) {
        throw Error(ErrorCode::ConfigError, e.what());
      }
    }
  }
  if (top.has("data")) {
    detail::Fields f(top.at("data"), "data");
    SyntheticSpec& d = c.data;
    d.classes = f.integer("classes", d.classes);
    d.dim = f.integer("dim", d.dim);
    d.n_per_class = f.integer("n_per_class", d.n_per_class);
    if (f.has("noise_levels")) {
      const json& arr = f.at("noise_levels");
      require(arr.is_array(), ErrorCode::ConfigError, "data.noise_levels must be an array");
      d.noise_levels.clear();
      for (const json& item : arr) {
        detail::Fields level(item, "data.noise_levels[]");
        d.noise_levels.push_back({level.real("sigma", 0.0), level.real("fraction", 1.0)});
        level.finish();
      }
    }
    d.mislabel_rate = f.real("mislabel_rate", d.mislabel_rate);
    d.input_dim = f.integer("input_dim", d.input_dim);
    d.input_scale = f.real("input_scale", d.input_scale);
    d.nuisance_sigma = f.real("nuisance_sigma", d.nuisance_sigma);
    d.seed = f.integer("seed", d.seed);
    f.finish();
  }
  if (top.has("train")) {
    detail::Fields f(top.at("train"), "train");
    TrainConfig& t = c.train;
    const std::string mode = f.text("mode", std::string(to_string(t.mode)));
    require(mode == "linear_encoder" || mode == "frozen_direction", ErrorCode::ConfigError,
            "train.mode must be linear_encoder or frozen_direction");
    t.mode = mode == "linear_encoder" ? ParamMode::LinearEncoder : ParamMode::FrozenDirection;
    t.warmup_epochs = f.integer("warmup_epochs", t.warmup_epochs);
    t.main_epochs = f.integer("main_epochs", t.main_epochs);
    t.lr = f.real("lr", t.lr);
    if (f.has("lr_milestones")) {
      const json& arr = f.at("lr_milestones");
      require(arr.is_array(), ErrorCode::ConfigError, "train.lr_milestones must be an array");
      t.lr_milestones.clear();
      for (const json& v : arr) {
        require(v.is_number_unsigned(), ErrorCode::ConfigError, "train.lr_milestones entries must be epochs");
        t.lr_milestones.push_back(v.get<std::size_t>());
      }
    }
    t.lr_decay = f.real("lr_decay", t.lr_decay);
    t.batch_size = f.integer("batch_size", t.batch_size);
    t.seed = f.integer("seed", t.seed);
    f.finish();
  }
  c.output_dir = top.text("output_dir", c.output_dir);
  if (top.has("emit")) {
    const json& arr = top.at("emit");
    require(arr.is_array(), ErrorCode::ConfigError, "emit must be an array");
    c.emit.clear();
    for (const json& v : arr) {
      require(v.is_string(), ErrorCode::ConfigError, "emit entries must be strings");
      c.emit.push_back(v.get<std::string>());
    }
  }
  top.finish();
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::ConfigError, "cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace qcplan

#pragma once

#include <charconv>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qcplan/analysis.hpp"
#include "qcplan/config.hpp"
#include "qcplan/error.hpp"
#include "qcplan/gradients.hpp"
#include "qcplan/io.hpp"
#include "qcplan/planner.hpp"
#include "qcplan/regularizer.hpp"
#include "qcplan/synthetic.hpp"

namespace qcplan {

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitNumeric = 3, kExitMissing = 4 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingArtifact: return kExitMissing;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::PoleInDerivative:
    case ErrorCode::ZeroVector:
    case ErrorCode::DegenerateVariance: return kExitNumeric;
    default: return kExitUsage;
  }
}

/// Runs a command body, turning library errors into exit codes.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

// --- solve-k ---------------------------------------------------------------

inline int cmd_solve_k(double l_a, double u_a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RegParams params = RegParams::balanced(l_a, u_a);
    const double k = params.k;
    CsvWriter w({"k", "p_d", "z_star"});
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      w.row({format_real(k), format_real(p), format_real(expected_magnitude(params, p))});
    }
    out << w.str();
    return kExitOk;
  });
}

// --- check-grad ------------------------------------------------------------

inline int cmd_check_grad(const std::string& config_path, std::size_t instances, bool inject_fault, std::ostream& out,
                          std::ostream& err) {
  return guarded(err, [&] {
    require(instances > 0, ErrorCode::ConfigError, "--instances must be positive");
    ExperimentConfig cfg = load_config(config_path);
    apply_seed_override(cfg, seed_override_from_env());
    std::vector<LossCase> cases = loss_family();
    cases.push_back({"config", cfg.loss, cfg.reg.lambda_g > 0.0 ? std::optional<RegParams>(cfg.reg) : std::nullopt});
    const auto rows = run_gradient_suite(cases, instances, cfg.train.seed, inject_fault ? 1e-3 : 0.0);

    CsvWriter w({"loss", "instance", "classes", "dim", "max_rel_error", "worst_coordinate", "passed"});
    std::size_t failed = 0;
    double worst = 0.0;
    for (const auto& r : rows) {
      w.row({r.loss, std::to_string(r.instance), std::to_string(r.classes), std::to_string(r.dim),
             format_real(r.report.max_rel_error), std::to_string(r.report.worst_coordinate), r.passed ? "1" : "0"});
      failed += r.passed ? 0 : 1;
      worst = std::max(worst, r.report.max_rel_error);
    }
    out << w.str();
    err << rows.size() - failed << "/" << rows.size() << " checks passed, worst relative error "
        << format_real(worst) << " (tolerance " << format_real(kGradientTolerance) << ")\n";
    return failed == 0 ? kExitOk : kExitCheckFailed;
  });
}

// --- analysis artifacts ----------------------------------------------------

/// Verification over all pairs and gallery/probe identification, both by
/// true identity; correlations use the recorded per-sample outcomes.
inline json run_metrics(const PlanState& state, const TrainConfig& cfg, const SyntheticData& data) {
  const FeatureBatch emb = state.embeddings(data);
  const std::size_t n = emb.size();

  std::vector<double> genuine, impostor;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = raw_cosine(emb.features[i], emb.features[j]);
      (data.true_labels[i] == data.true_labels[j] ? genuine : impostor).push_back(s);
    }
  }
  const VerificationReport ver = verification_metrics(genuine, impostor);
  json tar = json::object();
  for (const auto& p : ver.tar_at_far) tar[format_key(p.far)] = p.tar;

  FeatureBatch gallery, probes;
  for (std::size_t i = 0; i < n; i += 2) {
    gallery.features.push_back(emb.features[i]);
    gallery.labels.push_back(data.true_labels[i]);
    gallery.meta.push_back(emb.meta[i]);
  }
  const std::set<std::size_t> known(gallery.labels.begin(), gallery.labels.end());
  for (std::size_t i = 1; i < n; i += 2) {
    if (!known.count(data.true_labels[i])) continue;
    probes.features.push_back(emb.features[i]);
    probes.labels.push_back(data.true_labels[i]);
    probes.meta.push_back(emb.meta[i]);
  }
  json rank = json::object();
  if (probes.size() > 0) {
    for (const auto& [k, acc] : identification_metrics(gallery, probes, {1, 5})) rank[std::to_string(k)] = acc;
  }

  const auto records = sample_records(state, cfg, data);
  std::vector<double> pd, mag, noise;
  for (const auto& r : records) {
    pd.push_back(r.p_d);
    mag.push_back(r.magnitude);
    noise.push_back(r.noise_sigma);
  }
  auto safe_pearson = [](const std::vector<double>& x, const std::vector<double>& y) -> json {
    try {
      return pearson(x, y).pearson_r;
    } catch (const Error&) {
      return nullptr;  // constant column or too few samples
    }
  };
  return {{"tar_at_far", tar},
          {"auc", ver.auc},
          {"rank_k", rank},
          {"pearson_pd_mag", safe_pearson(pd, mag)},
          {"pearson_noise_mag", safe_pearson(noise, mag)}};
}

inline std::pair<std::size_t, std::size_t> parse_pair(const std::string& text) {
  const auto parts = split_list(text);
  require(parts.size() == 2, ErrorCode::ConfigError, "--pair takes two class indices, e.g. 0,1");
  std::pair<std::size_t, std::size_t> out;
  for (int i = 0; i < 2; ++i) {
    std::size_t v = 0;
    const auto res = std::from_chars(parts[i].data(), parts[i].data() + parts[i].size(), v);
    require(res.ec == std::errc() && res.ptr == parts[i].data() + parts[i].size(), ErrorCode::ConfigError,
            "bad class index '" + parts[i] + "'");
    (i == 0 ? out.first : out.second) = v;
  }
  return out;
}

inline void emit_analysis(const fs::path& dir, const std::vector<std::string>& emit, const PlanState& state,
                          const TrainConfig& cfg, const SyntheticData& data, std::pair<std::size_t, std::size_t> pair,
                          RunManifest& manifest) {
  for (const auto& token : emit) {
    if (token == "projection") {
      require(pair.first < state.proxies.classes() && pair.second < state.proxies.classes() && pair.first != pair.second,
              ErrorCode::ConfigError, "class pair must name two distinct classes");
      emit_file(dir, "projection.csv",
                projection_csv(projection_export(state.embeddings(data), state.proxies, pair, cfg.spec.s)), manifest);
    } else if (token == "metrics") {
      emit_file(dir, "metrics.json", run_metrics(state, cfg, data).dump(2) + "\n", manifest);
    }
  }
}

// --- plan ------------------------------------------------------------------

struct RunResult {
  int exit_code = kExitOk;
  PlanState state;
  SyntheticData data;
};

/// One complete run into `dir`. The config is used as given (seed override
/// already applied); `seed_override` is only recorded.
inline RunResult execute_run(const ExperimentConfig& cfg, std::optional<std::uint64_t> seed_override,
                             const fs::path& dir, std::ostream& out, std::ostream& err) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorCode::ConfigError, "cannot create output directory '" + dir.string() + "'");

  RunResult result;
  const TrainConfig train = cfg.training_config();
  result.data = generate_synthetic(cfg.data);
  result.state = init_state(train, result.data);

  RunManifest manifest;
  manifest.config_hash = config_hash(cfg);
  manifest.seed = cfg.train.seed;
  manifest.seed_override = seed_override;
  emit_file(dir, "config.json", serialize_config(cfg), manifest);

  try {
    run_schedule(train, result.data, result.state);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonFiniteGradient && e.code() != ErrorCode::NonFiniteLoss) throw;
    const fs::path dump = dir / "failure_state.json";
    json j = state_to_json(result.state);
    j["error"] = e.what();
    write_file(dump, j.dump(1) + "\n");
    err << "error: " << e.what() << "\n";
    out << "state dump: " << dump.string() << "\n";
    result.exit_code = kExitNumeric;
    return result;
  }

  emit_file(dir, "state.json", state_file(result.state), manifest);
  const auto has = [&](const char* t) { return std::find(cfg.emit.begin(), cfg.emit.end(), t) != cfg.emit.end(); };
  if (has("history")) emit_file(dir, "history.csv", history_csv(result.state.history), manifest);
  if (has("magnitudes")) {
    emit_file(dir, "magnitudes.csv", magnitudes_csv(sample_records(result.state, train, result.data)), manifest);
  }
  emit_analysis(dir, cfg.emit, result.state, train, result.data, {0, 1}, manifest);
  write_manifest(dir, manifest);
  return result;
}

inline ExperimentConfig effective_config(const std::string& config_path, const std::optional<std::string>& output_dir,
                                         std::optional<std::uint64_t>& seed_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (output_dir) cfg.output_dir = *output_dir;
  seed_override = seed_override_from_env();
  apply_seed_override(cfg, seed_override);
  return cfg;
}

inline int cmd_plan(const std::string& config_path, const std::optional<std::string>& output_dir, std::ostream& out,
                    std::ostream& err) {
  return guarded(err, [&] {
    std::optional<std::uint64_t> seed;
    const ExperimentConfig cfg = effective_config(config_path, output_dir, seed);
    const RunResult r = execute_run(cfg, seed, cfg.output_dir, out, err);
    if (r.exit_code == kExitOk) {
      const HistoryRow& last = r.state.history.back();
      out << "run written to " << cfg.output_dir << " (" << r.state.history.size() << " epochs, final mean p_d "
          << format_real(last.mean_pd) << ")\n";
    }
    return r.exit_code;
  });
}

// --- analyze ---------------------------------------------------------------

inline int cmd_analyze(const std::string& run_dir, const std::string& emit, const std::optional<std::string>& pair,
                       std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<std::string> tokens;
    for (const auto& t : split_list(emit)) {
      require(t == "projection" || t == "metrics", ErrorCode::ConfigError,
              "unknown emit token '" + t + "' (expected projection or metrics)");
      if (std::find(tokens.begin(), tokens.end(), t) == tokens.end()) tokens.push_back(t);
    }
    const auto class_pair = pair ? parse_pair(*pair) : std::make_pair<std::size_t, std::size_t>(0, 1);
    const fs::path dir(run_dir);
    require(fs::is_regular_file(dir / "state.json"), ErrorCode::MissingArtifact,
            "no final state in '" + run_dir + "' (state.json missing)");
    require(fs::is_regular_file(dir / "config.json"), ErrorCode::MissingArtifact,
            "no config in '" + run_dir + "' (config.json missing)");
    const ExperimentConfig cfg = parse_config(read_file(dir / "config.json"));
    const PlanState state = state_from_json(json::parse(read_file(dir / "state.json")));
    const SyntheticData data = generate_synthetic(cfg.data);
    require(state.samples(data) == data.batch.size(), ErrorCode::MissingArtifact, "state does not match its config");

    RunManifest manifest;
    if (fs::is_regular_file(dir / "manifest.json")) {
      manifest = RunManifest::from_json(json::parse(read_file(dir / "manifest.json")));
    } else {
      manifest.config_hash = config_hash(cfg);
      manifest.seed = cfg.train.seed;
    }
    emit_analysis(dir, tokens, state, cfg.training_config(), data, class_pair, manifest);
    write_manifest(dir, manifest);
    for (const auto& t : tokens) out << "wrote " << (dir / (t == "projection" ? "projection.csv" : "metrics.json")).string() << "\n";
    return kExitOk;
  });
}

// --- sweep -----------------------------------------------------------------

inline int cmd_sweep(const std::string& config_path, const std::string& param, const std::string& values,
                     const std::optional<std::string>& output_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::optional<std::uint64_t> seed;
    const ExperimentConfig base = effective_config(config_path, output_dir, seed);
    const json base_json = to_json(base);

    const json::json_pointer ptr("/" + [&] {
      std::string p = param;
      std::replace(p.begin(), p.end(), '.', '/');
      return p;
    }());
    require(!param.empty() && base_json.contains(ptr) && base_json.at(ptr).is_number(), ErrorCode::ConfigError,
            "--param '" + param + "' does not name a numeric config field");
    const bool integral = base_json.at(ptr).is_number_integer();

    const auto list = split_list(values);
    std::vector<std::pair<std::string, json>> parsed;
    for (const auto& v : list) {
      json value;
      if (integral) {
        std::uint64_t x = 0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
        require(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorCode::ConfigError,
                "'" + v + "' is not a valid value for integer field " + param);
        value = x;
      } else {
        double x = 0.0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
        require(res.ec == std::errc() && res.ptr == v.data() + v.size() && std::isfinite(x), ErrorCode::ConfigError,
                "'" + v + "' is not a valid number");
        value = x;
      }
      parsed.emplace_back(v, value);
    }

    // validate every child before running any
    std::vector<ExperimentConfig> children;
    for (const auto& [text, value] : parsed) {
      json j = base_json;
      j[ptr] = value;
      if (param == "reg.l_a" || param == "reg.u_a") j["reg"]["k"] = nullptr;  // re-balance for the new bounds
      ExperimentConfig child = config_from_json(j);
      child.output_dir = (fs::path(base.output_dir) / (param + "=" + text)).string();
      apply_seed_override(child, seed);
      children.push_back(std::move(child));
    }

    CsvWriter summary({"param", "value", "run_dir", "final_mean_pd", "final_mean_lsm", "final_mean_lreg",
                       "pearson_pd_mag"});
    int code = kExitOk;
    for (std::size_t i = 0; i < children.size(); ++i) {
      const RunResult r = execute_run(children[i], seed, children[i].output_dir, out, err);
      if (r.exit_code != kExitOk) {
        code = r.exit_code;
        summary.row({param, parsed[i].first, children[i].output_dir, "", "", "", ""});
        continue;
      }
      const HistoryRow& last = r.state.history.back();
      std::vector<double> pd, mag;
      for (const auto& s : sample_records(r.state, children[i].training_config(), r.data)) {
        pd.push_back(s.p_d);
        mag.push_back(s.magnitude);
      }
      std::string corr;
      try {
        corr = format_real(pearson(pd, mag).pearson_r);
      } catch (const Error&) {
      }
      summary.row({param, parsed[i].first, children[i].output_dir, format_real(last.mean_pd),
                   format_real(last.mean_lsm), format_real(last.mean_lreg), corr});
    }
    std::error_code ec;
    fs::create_directories(base.output_dir, ec);
    write_file(fs::path(base.output_dir) / "summary.csv", summary.str());
    out << children.size() << " runs, summary at " << (fs::path(base.output_dir) / "summary.csv").string() << "\n";
    return code;
  });
}

}  // namespace qcplan

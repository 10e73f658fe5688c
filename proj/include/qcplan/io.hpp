#pragma once

#include <openssl/evp.h>

#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "qcplan/analysis.hpp"
#include "qcplan/config.hpp"
#include "qcplan/error.hpp"
#include "qcplan/planner.hpp"

namespace qcplan {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

/// 17 significant digits: enough to round-trip any double.
inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

/// Shortest round-trip form, for JSON keys such as FAR targets.
inline std::string format_key(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, ErrorCode::InvalidArgument,
          "SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::MissingArtifact, "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::ConfigError, "cannot write '" + path.string() + "'");
  out << bytes;
  require(out.good(), ErrorCode::ConfigError, "write to '" + path.string() + "' failed");
}

/// QCP_SEED_OVERRIDE, if set; anything but a decimal 64-bit integer is a config error.
inline std::optional<std::uint64_t> seed_override_from_env() {
  const char* raw = std::getenv("QCP_SEED_OVERRIDE");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string s(raw);
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v, 10);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorCode::ConfigError,
          "QCP_SEED_OVERRIDE must be a decimal 64-bit integer, got '" + s + "'");
  return v;
}

inline void apply_seed_override(ExperimentConfig& cfg, std::optional<std::uint64_t> seed) {
  if (!seed) return;
  cfg.data.seed = *seed;
  cfg.train.seed = *seed;
}

/// The hash ignores output_dir: where a run lives is not part of what it computes.
inline std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> seed_override;
  std::string tool_version = kToolVersion;
  std::map<std::string, std::string> files;  // name -> sha256

  json to_json() const {
    json j{{"config_hash", config_hash},
           {"seed", seed},
           {"seed_override", seed_override ? json(*seed_override) : json(nullptr)},
           {"tool_version", tool_version},
           {"files", files}};
    return j;
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("seed_override").is_null()) m.seed_override = j.at("seed_override").get<std::uint64_t>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.files = j.at("files").get<std::map<std::string, std::string>>();
    return m;
  }
};

/// Writes a run file and records its checksum.
inline void emit_file(const fs::path& dir, const std::string& name, const std::string& bytes, RunManifest& manifest) {
  write_file(dir / name, bytes);
  manifest.files[name] = sha256_hex(bytes);
}

inline void write_manifest(const fs::path& dir, const RunManifest& manifest) {
  write_file(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
}

// --- run files -------------------------------------------------------------

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  CsvWriter w({"epoch", "phase", "mean_lsm", "mean_lreg", "mean_pd", "lr"});
  for (const auto& r : rows) {
    w.row({std::to_string(r.epoch), std::string(to_string(r.phase)), format_real(r.mean_lsm), format_real(r.mean_lreg),
           format_real(r.mean_pd), format_real(r.lr)});
  }
  return w.str();
}

inline std::string magnitudes_csv(const std::vector<SampleRecord>& records) {
  CsvWriter w({"sample_id", "class", "noise_sigma", "mislabeled", "p_d", "magnitude", "cos_to_proxy"});
  for (const auto& r : records) {
    w.row({std::to_string(r.sample_id), std::to_string(r.label), format_real(r.noise_sigma), r.mislabeled ? "1" : "0",
           format_real(r.p_d), format_real(r.magnitude), format_real(r.cos_to_proxy)});
  }
  return w.str();
}

inline std::string projection_csv(const std::vector<ProjectionRow>& rows) {
  CsvWriter w({"sample_id", "x", "y", "magnitude", "p_d"});
  for (const auto& r : rows) {
    w.row({r.sample_id, format_real(r.x), format_real(r.y), format_real(r.magnitude),
           r.p_d ? format_real(*r.p_d) : std::string()});
  }
  return w.str();
}

namespace detail {

inline json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  require(j.is_array(), ErrorCode::MissingArtifact, "state matrix must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    require(static_cast<Eigen::Index>(j[i].size()) == cols, ErrorCode::MissingArtifact, "ragged state matrix");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
  return v;
}

}  // namespace detail

inline json state_to_json(const PlanState& s) {
  json j{{"mode", std::string(to_string(s.mode))},
         {"epoch", s.epoch},
         {"proxies", detail::matrix_json(s.proxies.matrix())},
         {"initial", {{"mean_lsm", s.initial.mean_lsm}, {"mean_lreg", s.initial.mean_lreg}, {"mean_pd", s.initial.mean_pd}}}};
  if (s.mode == ParamMode::LinearEncoder) {
    j["encoder"] = detail::matrix_json(s.encoder);
    j["bias"] = detail::vector_json(s.bias);
  } else {
    json dirs = json::array();
    for (const auto& d : s.directions) dirs.push_back(detail::vector_json(d));
    j["directions"] = std::move(dirs);
    j["magnitudes"] = s.magnitudes;
  }
  json hist = json::array();
  for (const auto& r : s.history) {
    hist.push_back({{"epoch", r.epoch},
                    {"phase", std::string(to_string(r.phase))},
                    {"mean_lsm", r.mean_lsm},
                    {"mean_lreg", r.mean_lreg},
                    {"mean_pd", r.mean_pd},
                    {"lr", r.lr}});
  }
  j["history"] = std::move(hist);
  return j;
}

inline PlanState state_from_json(const json& j) {
  try {
    PlanState s;
    s.mode = j.at("mode").get<std::string>() == "frozen_direction" ? ParamMode::FrozenDirection : ParamMode::LinearEncoder;
    s.epoch = j.at("epoch").get<std::size_t>();
    s.proxies = ProxyMatrix(detail::matrix_from_json(j.at("proxies")));
    const json& init = j.at("initial");
    s.initial = {init.at("mean_lsm").get<double>(), init.at("mean_lreg").get<double>(), init.at("mean_pd").get<double>()};
    if (s.mode == ParamMode::LinearEncoder) {
      s.encoder = detail::matrix_from_json(j.at("encoder"));
      s.bias = detail::vector_from_json(j.at("bias"));
    } else {
      for (const json& d : j.at("directions")) s.directions.push_back(detail::vector_from_json(d));
      s.magnitudes = j.at("magnitudes").get<std::vector<double>>();
    }
    for (const json& r : j.at("history")) {
      s.history.push_back({r.at("epoch").get<std::size_t>(),
                           r.at("phase").get<std::string>() == "warmup" ? Phase::Warmup : Phase::Main,
                           r.at("mean_lsm").get<double>(), r.at("mean_lreg").get<double>(),
                           r.at("mean_pd").get<double>(), r.at("lr").get<double>()});
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MissingArtifact, std::string("malformed state: ") + e.what());
  }
}

inline std::string state_file(const PlanState& s) { return state_to_json(s).dump(1) + "\n"; }

}  // namespace qcplan

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qcplan/error.hpp"
#include "qcplan/geometry.hpp"
#include "qcplan/margin.hpp"

namespace qcplan {

struct MagnitudeHistogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  double group_key = 0.0;  // noise sigma of the subset
  std::size_t clipped = 0;  // out-of-range magnitudes folded into the end bins
};

inline void check_edges(const std::vector<double>& edges) {
  require(edges.size() >= 2, ErrorCode::BadEdges, "need at least two bin edges");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    require(std::isfinite(edges[i]), ErrorCode::BadEdges, "non-finite bin edge");
    require(i == 0 || edges[i] > edges[i - 1], ErrorCode::BadEdges, "bin edges must be strictly ascending");
  }
}

/// Bin index for x with half-open bins [e_i, e_{i+1}) and a closed last bin.
inline std::size_t bin_index(const std::vector<double>& edges, double x, bool& clipped) {
  clipped = x < edges.front() || x > edges.back();
  if (x <= edges.front()) return 0;
  if (x >= edges.back()) return edges.size() - 2;
  const auto it = std::upper_bound(edges.begin(), edges.end(), x);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

/// One histogram per noise sigma in `groups` (every sigma present in the
/// batch when `groups` is empty).
inline std::vector<MagnitudeHistogram> magnitude_histogram(const FeatureBatch& batch, const std::vector<double>& edges,
                                                           std::vector<double> groups = {}) {
  check_edges(edges);
  if (groups.empty()) {
    std::set<double> seen;
    for (const auto& m : batch.meta) seen.insert(m.noise_sigma);
    groups.assign(seen.begin(), seen.end());
  }
  std::vector<MagnitudeHistogram> out;
  for (double g : groups) {
    MagnitudeHistogram h;
    h.bin_edges = edges;
    h.counts.assign(edges.size() - 1, 0);
    h.group_key = g;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.meta[i].noise_sigma != g) continue;
      bool clipped = false;
      ++h.counts[bin_index(edges, batch.features[i].norm(), clipped)];
      if (clipped) ++h.clipped;
    }
    out.push_back(std::move(h));
  }
  return out;
}

struct CorrelationReport {
  double pearson_r = 0.0;
  std::size_t n = 0;
  std::string x_name;
  std::string y_name;
};

inline CorrelationReport pearson(const std::vector<double>& x, const std::vector<double>& y, std::string x_name = "x",
                                 std::string y_name = "y") {
  require(x.size() == y.size(), ErrorCode::InvalidArgument, "pearson inputs differ in length");
  require(x.size() >= 3, ErrorCode::InvalidArgument, "pearson needs at least three points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::DegenerateVariance, "pearson input has zero variance");
  const double r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  return {r, x.size(), std::move(x_name), std::move(y_name)};
}

inline const std::vector<double>& default_far_grid() {
  static const std::vector<double> grid{1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  return grid;
}

struct FarPoint {
  double far = 0.0;
  double tar = 0.0;
  double threshold = 0.0;
  double achieved_far = 0.0;
};

struct VerificationReport {
  std::vector<FarPoint> tar_at_far;  // in the order of the FAR grid
  double auc = 0.0;
};

/// Area under the ROC by sweeping every distinct threshold, trapezoids
/// across ties. Counts stay integral until the final division.
inline double auc_threshold_sweep(const std::vector<double>& genuine, const std::vector<double>& impostor) {
  require(!genuine.empty() && !impostor.empty(), ErrorCode::EmptyScores, "AUC needs genuine and impostor scores");
  std::vector<std::pair<double, int>> all;
  all.reserve(genuine.size() + impostor.size());
  for (double s : genuine) all.emplace_back(s, 1);
  for (double s : impostor) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double tp = 0.0, fp = 0.0, twice_area = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    double dtp = 0.0, dfp = 0.0;
    const double s = all[i].first;
    for (; i < all.size() && all[i].first == s; ++i) (all[i].second ? dtp : dfp) += 1.0;
    twice_area += dfp * (2.0 * tp + dtp);
    tp += dtp;
    fp += dfp;
  }
  return twice_area / (2.0 * tp * fp);
}

/// P(genuine > impostor) + P(tie) / 2 by direct pair counting.
inline double auc_mann_whitney(const std::vector<double>& genuine, const std::vector<double>& impostor) {
  require(!genuine.empty() && !impostor.empty(), ErrorCode::EmptyScores, "AUC needs genuine and impostor scores");
  double twice_wins = 0.0;
  for (double g : genuine) {
    for (double i : impostor) twice_wins += g > i ? 2.0 : (g == i ? 1.0 : 0.0);
  }
  return twice_wins / (2.0 * static_cast<double>(genuine.size()) * static_cast<double>(impostor.size()));
}

/// Scores at or above the threshold are accepted. For each target FAR the
/// threshold is the smallest observed score whose impostor acceptance stays
/// within the target; when none qualifies, everything is rejected.
inline VerificationReport verification_metrics(const std::vector<double>& genuine, const std::vector<double>& impostor,
                                               const std::vector<double>& far_grid = default_far_grid()) {
  require(!genuine.empty() && !impostor.empty(), ErrorCode::EmptyScores, "verification needs both score lists");
  std::vector<double> imp = impostor;
  std::sort(imp.begin(), imp.end(), std::greater<>());
  std::vector<double> gen = genuine;
  std::sort(gen.begin(), gen.end(), std::greater<>());
  std::vector<double> candidates = gen;
  candidates.insert(candidates.end(), imp.begin(), imp.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  auto count_at_least = [](const std::vector<double>& desc, double t) {
    return static_cast<std::size_t>(
        std::upper_bound(desc.begin(), desc.end(), t, std::greater<>()) - desc.begin());
  };

  VerificationReport out;
  const double n_imp = static_cast<double>(imp.size());
  for (double far : far_grid) {
    require(far > 0.0 && far <= 1.0, ErrorCode::InvalidArgument, "FAR targets must lie in (0, 1]");
    // allowed false accepts; the epsilon absorbs FAR values like 1/3 given in decimal
    const auto allowed = static_cast<std::size_t>(std::floor(far * n_imp * (1.0 + 1e-12)));
    FarPoint p;
    p.far = far;
    p.threshold = std::nextafter(candidates.back(), std::numeric_limits<double>::infinity());
    // acceptance falls as the threshold rises: binary search the ascending candidates
    auto it = std::partition_point(candidates.begin(), candidates.end(),
                                   [&](double t) { return count_at_least(imp, t) > allowed; });
    if (it != candidates.end()) p.threshold = *it;
    p.tar = static_cast<double>(count_at_least(gen, p.threshold)) / static_cast<double>(gen.size());
    p.achieved_far = static_cast<double>(count_at_least(imp, p.threshold)) / n_imp;
    out.tar_at_far.push_back(p);
  }
  out.auc = auc_threshold_sweep(genuine, impostor);
  return out;
}

/// Rank-k accuracy; a class scores by its best-matching gallery exemplar and
/// ties with the true class count in the probe's favour.
inline std::map<std::size_t, double> identification_metrics(const FeatureBatch& gallery, const FeatureBatch& probes,
                                                            const std::vector<std::size_t>& ranks) {
  require(gallery.size() > 0, ErrorCode::EmptyGallery, "gallery is empty");
  require(probes.size() > 0, ErrorCode::InvalidArgument, "no probes");
  std::vector<std::size_t> classes(gallery.labels.begin(), gallery.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t c = 0; c < classes.size(); ++c) slot[classes[c]] = c;

  std::vector<std::size_t> rank_of(probes.size());
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const auto truth = slot.find(probes.labels[p]);
    require(truth != slot.end(), ErrorCode::InvalidArgument,
            "probe class " + std::to_string(probes.labels[p]) + " has no gallery exemplar");
    std::vector<double> best(classes.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      double& b = best[slot[gallery.labels[g]]];
      b = std::max(b, raw_cosine(probes.features[p], gallery.features[g]));
    }
    std::size_t better = 0;
    for (double v : best) better += v > best[truth->second] ? 1 : 0;
    rank_of[p] = better + 1;
  }

  std::map<std::size_t, double> out;
  for (std::size_t k : ranks) {
    require(k >= 1, ErrorCode::InvalidArgument, "ranks start at 1");
    std::size_t hits = 0;
    for (std::size_t r : rank_of) hits += r <= k ? 1 : 0;
    out[k] = static_cast<double>(hits) / static_cast<double>(probes.size());
  }
  return out;
}

struct ProjectionRow {
  std::string sample_id;  // "proxy:<class>" for the two proxy rays
  double x = 0.0;
  double y = 0.0;
  double magnitude = 0.0;
  std::optional<double> p_d;
};

/// Samples of the two classes, plus both proxies, in the plane of the proxies.
inline std::vector<ProjectionRow> projection_export(const FeatureBatch& batch, const ProxyMatrix& proxies,
                                                    std::pair<std::size_t, std::size_t> class_pair, double s) {
  require(class_pair.first != class_pair.second, ErrorCode::InvalidArgument, "class pair must be distinct");
  require(class_pair.first < proxies.classes() && class_pair.second < proxies.classes(), ErrorCode::InvalidArgument,
          "class pair out of range");
  const ProxyPlane plane = ProxyPlane::from(proxies.row(class_pair.first), proxies.row(class_pair.second));
  std::vector<ProjectionRow> out;
  for (std::size_t k : {class_pair.first, class_pair.second}) {
    const FeatureVector w = proxies.row(k);
    const PlaneCoords c = plane.project(w);
    out.push_back({"proxy:" + std::to_string(k), c.x, c.y, w.norm(), std::nullopt});
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.labels[i] != class_pair.first && batch.labels[i] != class_pair.second) continue;
    const PlaneCoords c = plane.project(batch.features[i]);
    out.push_back({std::to_string(i), c.x, c.y, batch.features[i].norm(),
                   guidance_value(batch.features[i], batch.labels[i], proxies, s)});
  }
  return out;
}

}  // namespace qcplan

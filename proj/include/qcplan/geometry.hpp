#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qcplan/error.hpp"

namespace qcplan {

/// Embedding coordinates of one sample (z) or one class proxy (w).
using FeatureVector = Eigen::VectorXd;

/// Cosines are kept inside [-1 + eps, 1 - eps] before any acos.
inline constexpr double kCosineClamp = 1e-12;

/// Proxies closer than this to (anti)parallel have no well-defined 2-plane.
inline constexpr double kCollinearTolerance = 1e-9;

inline double magnitude(const FeatureVector& v) { return v.norm(); }

inline void require_finite(const FeatureVector& v, const char* what) {
  require(v.allFinite(), ErrorCode::InvalidArgument, std::string(what) + " has non-finite entries");
}

/// Unclamped a.b / (|a||b|). Gradient formulas use this form so that
/// exactly aligned vectors give exactly zero tangential components.
inline double raw_cosine(const FeatureVector& a, const FeatureVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  require(na > 0.0 && nb > 0.0, ErrorCode::ZeroVector, "cosine of a zero vector");
  require(a.size() == b.size(), ErrorCode::InvalidArgument, "dimension mismatch");
  return a.dot(b) / (na * nb);
}

inline double clamp_cosine(double c) {
  return std::clamp(c, -1.0 + kCosineClamp, 1.0 - kCosineClamp);
}

inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  return clamp_cosine(raw_cosine(a, b));
}

inline double angle(const FeatureVector& a, const FeatureVector& b) {
  return std::acos(cosine_similarity(a, b));
}

/// d cos(a, b) / d a. Tangential to a.
inline FeatureVector cosine_gradient(const FeatureVector& a, const FeatureVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  require(na > 0.0 && nb > 0.0, ErrorCode::ZeroVector, "cosine gradient of a zero vector");
  const double c = a.dot(b) / (na * nb);
  return (b / nb - c * a / na) / na;
}

struct PlaneCoords {
  double x = 0.0;
  double y = 0.0;
};

/// Orthonormal basis {e1, e2} of span(w1, w2) with e1 along w1.
struct ProxyPlane {
  FeatureVector e1;
  FeatureVector e2;

  static ProxyPlane from(const FeatureVector& w1, const FeatureVector& w2) {
    const double n1 = w1.norm();
    const double n2 = w2.norm();
    require(n1 > 0.0 && n2 > 0.0, ErrorCode::ZeroVector, "proxy plane needs nonzero proxies");
    require(w1.size() == w2.size(), ErrorCode::InvalidArgument, "dimension mismatch");
    require(std::abs(w1.dot(w2) / (n1 * n2)) < 1.0 - kCollinearTolerance,
            ErrorCode::CollinearProxies, "proxies are (anti)parallel");
    ProxyPlane plane;
    plane.e1 = w1 / n1;
    FeatureVector r = w2 - plane.e1.dot(w2) * plane.e1;
    // second pass keeps e2 orthogonal to machine precision
    r -= plane.e1.dot(r) * plane.e1;
    plane.e2 = r / r.norm();
    return plane;
  }

  PlaneCoords project(const FeatureVector& z) const {
    require(z.size() == e1.size(), ErrorCode::InvalidArgument, "dimension mismatch");
    return {e1.dot(z), e2.dot(z)};
  }

  FeatureVector lift(PlaneCoords p) const { return p.x * e1 + p.y * e2; }
};

/// Non-normalized projection of z onto the plane spanned by two proxies.
inline PlaneCoords gram_schmidt_project(const FeatureVector& z, const FeatureVector& w1,
                                        const FeatureVector& w2) {
  return ProxyPlane::from(w1, w2).project(z);
}

/// One learnable class center per row.
class ProxyMatrix {
 public:
  ProxyMatrix() = default;

  explicit ProxyMatrix(Eigen::MatrixXd rows) : rows_(std::move(rows)) { validate(); }

  static ProxyMatrix from_rows(const std::vector<FeatureVector>& rows) {
    require(!rows.empty(), ErrorCode::InvalidArgument, "proxy matrix needs at least one row");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == m.cols(), ErrorCode::InvalidArgument, "ragged proxy rows");
      m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    }
    return ProxyMatrix(std::move(m));
  }

  std::size_t classes() const { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(rows_.cols()); }

  FeatureVector row(std::size_t k) const { return rows_.row(static_cast<Eigen::Index>(k)).transpose(); }
  double row_norm(std::size_t k) const { return rows_.row(static_cast<Eigen::Index>(k)).norm(); }

  const Eigen::MatrixXd& matrix() const { return rows_; }
  Eigen::MatrixXd& mutable_matrix() { return rows_; }

  // Single-class matrices are accepted so softmax edge cases can be exercised;
  // training entry points insist on C >= 2 themselves.
  void validate() const {
    require(rows_.rows() >= 1 && rows_.cols() >= 1, ErrorCode::InvalidArgument, "empty proxy matrix");
    require(rows_.allFinite(), ErrorCode::InvalidArgument, "non-finite proxy entries");
    for (Eigen::Index k = 0; k < rows_.rows(); ++k) {
      require(rows_.row(k).norm() > 0.0, ErrorCode::ZeroVector,
              "proxy row " + std::to_string(k) + " is the zero vector");
    }
  }

 private:
  Eigen::MatrixXd rows_;
};

struct SampleMeta {
  double noise_sigma = 0.0;
  bool mislabeled = false;
};

struct FeatureBatch {
  std::vector<FeatureVector> features;
  std::vector<std::size_t> labels;
  std::vector<SampleMeta> meta;

  std::size_t size() const { return features.size(); }

  void validate(const ProxyMatrix& proxies) const {
    require(!features.empty(), ErrorCode::InvalidArgument, "empty batch");
    require(features.size() == labels.size() && labels.size() == meta.size(),
            ErrorCode::InvalidArgument, "features, labels and meta differ in length");
    for (std::size_t i = 0; i < features.size(); ++i) {
      require(features[i].size() == static_cast<Eigen::Index>(proxies.dim()),
              ErrorCode::InvalidArgument, "feature dimension does not match proxies");
      require(features[i].allFinite(), ErrorCode::InvalidArgument, "non-finite feature entries");
      require(labels[i] < proxies.classes(), ErrorCode::InvalidArgument,
              "label " + std::to_string(labels[i]) + " out of range");
      require(meta[i].noise_sigma >= 0.0, ErrorCode::InvalidArgument, "negative noise sigma");
    }
  }
};

}  // namespace qcplan

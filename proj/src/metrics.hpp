#pragma once

#include <optional>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

namespace slicemend {

// One feature vector per row.
struct FeatureSet {
  Eigen::MatrixXd vectors;
  std::string source_tag;
};

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // unbiased, regularisation already added
  double regularization = 0.0;
};

// Sample mean and (N-1)-normalised covariance. When the covariance is not
// numerically positive definite, 1e-6 x its mean diagonal is added to the
// diagonal and reported in `regularization`.
GaussianSummary fit_gaussian(const FeatureSet& set);

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

// KL(N_a || N_b)
double gaussian_kl(const GaussianSummary& a, const GaussianSummary& b);
double gaussian_kl(const FeatureSet& a, const FeatureSet& b);

// Mean of the strict upper triangle of a symmetric, zero-diagonal matrix.
double mean_pairwise_diversity(const Eigen::MatrixXd& distances);

// Mean cosine similarity of row i of `u` with row i of `v`.
double mean_consistency(const Eigen::MatrixXd& u, const Eigen::MatrixXd& v);

// Binary layout: "FVEC1", u32 N, u32 D (little endian), N*D float32.
FeatureSet read_fvec(const std::string& path);
void write_fvec(const std::string& path, const Eigen::MatrixXd& vectors);

struct MetricsInputs {
  FeatureSet real;
  FeatureSet generated;
  std::optional<Eigen::MatrixXd> distances;
  std::optional<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> pairs;
};

nlohmann::json metrics_report(const MetricsInputs& in);

}  // namespace slicemend

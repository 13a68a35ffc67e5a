#include "metrics.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "errors.hpp"
#include "exact.hpp"

namespace slicemend {

namespace {

constexpr double kRegularizationScale = 1e-6;
constexpr double kConditionFloor = 1e-10;
constexpr double kNegativeEigenTolerance = 1e-8;

void require_finite(const Eigen::MatrixXd& m, const std::string& what) {
  if (!m.allFinite()) fail(ErrorKind::kDomain, what + " contains non-finite values");
}

void require_comparable(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.mean.size() != b.mean.size()) {
    fail(ErrorKind::kDomain, "feature dimensions differ: " + std::to_string(a.mean.size()) +
                                 " vs " + std::to_string(b.mean.size()));
  }
}

// Square root of a symmetric positive semi-definite matrix.
Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success) fail(ErrorKind::kNumeric, "eigendecomposition failed");
  Eigen::VectorXd ev = eig.eigenvalues();
  const double radius = ev.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < 0) {
      if (ev[i] < -kNegativeEigenTolerance * radius) {
        fail(ErrorKind::kNumeric, "matrix has a negative eigenvalue " + format_shortest(ev[i]));
      }
      ev[i] = 0;
    }
  }
  return eig.eigenvectors() * ev.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

GaussianSummary fit_gaussian(const FeatureSet& set) {
  const auto& x = set.vectors;
  const std::string tag = set.source_tag.empty() ? "feature set" : set.source_tag;
  if (x.rows() < 2) fail(ErrorKind::kDomain, tag + ": at least 2 vectors are needed");
  if (x.cols() < 1) fail(ErrorKind::kDomain, tag + ": feature dimension is zero");
  require_finite(x, tag);
  GaussianSummary g;
  g.mean = x.colwise().mean().transpose();
  Eigen::MatrixXd centered = x.rowwise() - g.mean.transpose();
  g.covariance = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  g.covariance = 0.5 * (g.covariance + g.covariance.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.covariance, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(hi > 0) || lo <= kConditionFloor * hi) {
    double mean_diag = g.covariance.diagonal().mean();
    g.regularization = kRegularizationScale * (mean_diag > 0 ? mean_diag : 1.0);
    g.covariance.diagonal().array() += g.regularization;
  }
  return g;
}

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  require_comparable(a, b);
  const double mean_term = (a.mean - b.mean).squaredNorm();
  Eigen::MatrixXd sa = sym_sqrt(a.covariance);
  Eigen::MatrixXd product = sa * b.covariance * sa;
  product = 0.5 * (product + product.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(product, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) fail(ErrorKind::kNumeric, "eigendecomposition failed");
  const Eigen::VectorXd& ev = eig.eigenvalues();
  const double radius = ev.cwiseAbs().maxCoeff();
  double trace_sqrt = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -kNegativeEigenTolerance * radius) {
      fail(ErrorKind::kNumeric, "covariance product has a negative eigenvalue " +
                                    format_shortest(ev[i]));
    }
    trace_sqrt += std::sqrt(std::max(ev[i], 0.0));
  }
  const double d = mean_term + a.covariance.trace() + b.covariance.trace() - 2 * trace_sqrt;
  return std::max(d, 0.0);
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  if (a.vectors.cols() != b.vectors.cols()) {
    fail(ErrorKind::kDomain, "feature dimensions differ");
  }
  return frechet_distance(fit_gaussian(a), fit_gaussian(b));
}

double gaussian_kl(const GaussianSummary& a, const GaussianSummary& b) {
  require_comparable(a, b);
  Eigen::LLT<Eigen::MatrixXd> lb(b.covariance);
  Eigen::LLT<Eigen::MatrixXd> la(a.covariance);
  if (lb.info() != Eigen::Success) fail(ErrorKind::kNumeric, "second covariance is singular");
  if (la.info() != Eigen::Success) fail(ErrorKind::kNumeric, "first covariance is singular");
  const auto dim = static_cast<double>(a.mean.size());
  const double trace_term = lb.solve(a.covariance).trace();
  const Eigen::VectorXd diff = b.mean - a.mean;
  const double quad = diff.dot(lb.solve(diff));
  auto logdet = [](const Eigen::LLT<Eigen::MatrixXd>& l) {
    return 2.0 * l.matrixLLT().diagonal().array().log().sum();
  };
  const double kl = 0.5 * (trace_term + quad - dim + logdet(lb) - logdet(la));
  if (!std::isfinite(kl)) fail(ErrorKind::kNumeric, "KL divergence is not finite");
  return std::max(kl, 0.0);
}

double gaussian_kl(const FeatureSet& a, const FeatureSet& b) {
  if (a.vectors.cols() != b.vectors.cols()) {
    fail(ErrorKind::kDomain, "feature dimensions differ");
  }
  return gaussian_kl(fit_gaussian(a), fit_gaussian(b));
}

double mean_pairwise_diversity(const Eigen::MatrixXd& d) {
  if (d.rows() != d.cols()) fail(ErrorKind::kDomain, "distance matrix must be square");
  if (d.rows() < 2) fail(ErrorKind::kDomain, "distance matrix needs at least 2 items");
  require_finite(d, "distance matrix");
  const Eigen::Index n = d.rows();
  double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(d(i, i)) > 1e-9) fail(ErrorKind::kDomain, "distance matrix diagonal must be zero");
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (std::abs(d(i, j) - d(j, i)) > 1e-9) {
        fail(ErrorKind::kDomain, "distance matrix is not symmetric at (" + std::to_string(i) +
                                     "," + std::to_string(j) + ")");
      }
      sum += d(i, j);
    }
  }
  return sum / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

double mean_consistency(const Eigen::MatrixXd& u, const Eigen::MatrixXd& v) {
  if (u.rows() == 0) fail(ErrorKind::kDomain, "no embedding pairs");
  if (u.rows() != v.rows() || u.cols() != v.cols()) {
    fail(ErrorKind::kDomain, "embedding pair shapes differ");
  }
  require_finite(u, "embeddings");
  require_finite(v, "embeddings");
  double sum = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double nu = u.row(i).norm();
    const double nv = v.row(i).norm();
    if (nu == 0 || nv == 0) {
      fail(ErrorKind::kDomain, "embedding pair " + std::to_string(i) + " has a zero-norm vector");
    }
    sum += u.row(i).dot(v.row(i)) / (nu * nv);
  }
  return sum / static_cast<double>(u.rows());
}

// ---------------------------------------------------------------------------
// FVEC1

namespace {

constexpr char kMagic[5] = {'F', 'V', 'E', 'C', '1'};

std::uint32_t load_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

void store_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

}  // namespace

FeatureSet read_fvec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 13 || std::memcmp(bytes.data(), kMagic, 5) != 0) {
    fail(ErrorKind::kParse, path + ": not an FVEC1 file");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t n = load_u32(p + 5);
  const std::uint64_t d = load_u32(p + 9);
  if (bytes.size() != 13 + n * d * 4) {
    fail(ErrorKind::kParse, path + ": size does not match header N=" + std::to_string(n) +
                                " D=" + std::to_string(d));
  }
  FeatureSet set;
  set.source_tag = path;
  set.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const unsigned char* q = p + 13;
  for (std::uint64_t i = 0; i < n; ++i) {
    for (std::uint64_t j = 0; j < d; ++j, q += 4) {
      set.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::bit_cast<float>(load_u32(q));
    }
  }
  return set;
}

void write_fvec(const std::string& path, const Eigen::MatrixXd& vectors) {
  std::string out(kMagic, 5);
  store_u32(out, static_cast<std::uint32_t>(vectors.rows()));
  store_u32(out, static_cast<std::uint32_t>(vectors.cols()));
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
      store_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(vectors(i, j))));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::kIo, "cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail(ErrorKind::kIo, "write failed for " + path);
}

nlohmann::json metrics_report(const MetricsInputs& in) {
  if (in.real.vectors.cols() != in.generated.vectors.cols()) {
    fail(ErrorKind::kDomain, "real and generated feature dimensions differ");
  }
  GaussianSummary real = fit_gaussian(in.real);
  GaussianSummary gen = fit_gaussian(in.generated);
  nlohmann::json out = {
      {"format_version", kFormatVersion},
      {"type", "generation_metrics"},
      {"n_real", in.real.vectors.rows()},
      {"n_generated", in.generated.vectors.rows()},
      {"dim", in.real.vectors.cols()},
      {"frechet_distance", frechet_distance(real, gen)},
      {"gaussian_kl", gaussian_kl(real, gen)},
      {"kl_direction", "real||generated"},
      {"kl_estimator", "gaussian_closed_form"},
      {"regularization", {{"real", real.regularization}, {"generated", gen.regularization}}}};
  out["mean_pairwise_diversity"] =
      in.distances ? nlohmann::json(mean_pairwise_diversity(*in.distances)) : nlohmann::json(nullptr);
  out["mean_consistency"] = in.pairs ? nlohmann::json(mean_consistency(in.pairs->first, in.pairs->second))
                                     : nlohmann::json(nullptr);
  return out;
}

}  // namespace slicemend

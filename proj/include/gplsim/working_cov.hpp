#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <optional>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "gplsim/errors.hpp"
#include "gplsim/model.hpp"

namespace gplsim {

enum class CorrFamily { independence, exchangeable, ar1 };

inline std::string_view corr_name(CorrFamily c) {
  switch (c) {
    case CorrFamily::independence: return "independence";
    case CorrFamily::exchangeable: return "exchangeable";
    case CorrFamily::ar1: return "ar1";
  }
  return "?";
}

inline CorrFamily parse_corr(std::string_view s) {
  if (s == "independence" || s == "ind") return CorrFamily::independence;
  if (s == "exchangeable" || s == "exc" || s == "exch") return CorrFamily::exchangeable;
  if (s == "ar1" || s == "AR1" || s == "ar") return CorrFamily::ar1;
  throw ConfigError("unknown working correlation '" + std::string(s) + "'");
}

/// Short tag used in file names and tables (ind / exc / ar1).
inline std::string_view corr_tag(CorrFamily c) {
  switch (c) {
    case CorrFamily::independence: return "ind";
    case CorrFamily::exchangeable: return "exc";
    case CorrFamily::ar1: return "ar1";
  }
  return "?";
}

inline constexpr double kRhoMargin = 1e-6;

struct WorkingCovSpec {
  CorrFamily corr = CorrFamily::independence;
  double rho = 0.0;
  OutcomeFamily family{};
  double dispersion = 1.0;
};

/// Open interval of admissible rho for clusters of size up to `max_m`,
/// shrunk by kRhoMargin.
inline std::pair<double, double> rho_range(CorrFamily corr, Eigen::Index max_m) {
  switch (corr) {
    case CorrFamily::independence: return {0.0, 0.0};
    case CorrFamily::exchangeable: {
      const double lower = max_m > 1 ? -1.0 / static_cast<double>(max_m - 1) : -1.0;
      return {lower + kRhoMargin, 1.0 - kRhoMargin};
    }
    case CorrFamily::ar1: return {-1.0 + kRhoMargin, 1.0 - kRhoMargin};
  }
  return {0.0, 0.0};
}

inline MatrixXd correlation_matrix(const WorkingCovSpec& spec, Eigen::Index m) {
  if (m < 1) throw DomainError("correlation_matrix: cluster size must be >= 1");
  if (spec.corr == CorrFamily::independence) return MatrixXd::Identity(m, m);
  const auto [lo, hi] = rho_range(spec.corr, m);
  if (m > 1 && !(spec.rho >= lo && spec.rho <= hi))
    throw DomainError("rho = " + std::to_string(spec.rho) + " outside the valid range for " +
                      std::string(corr_name(spec.corr)) + " with m = " + std::to_string(m));
  MatrixXd R(m, m);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index k = 0; k < m; ++k) {
      if (j == k) R(j, k) = 1.0;
      else if (spec.corr == CorrFamily::exchangeable) R(j, k) = spec.rho;
      else R(j, k) = std::pow(spec.rho, static_cast<double>(std::abs(j - k)));
    }
  return R;
}

/// Factored working covariance of one subject. The independence case keeps
/// only the diagonal; every other case carries a dense Cholesky factor.
class CovFactor {
 public:
  CovFactor() = default;

  static CovFactor make(const WorkingCovSpec& spec, const VectorXd& mu) {
    CovFactor f;
    const Eigen::Index m = mu.size();
    f.sd_.resize(m);
    for (Eigen::Index j = 0; j < m; ++j) f.sd_(j) = std::sqrt(spec.dispersion * spec.family.variance(mu(j)));
    if (spec.corr == CorrFamily::independence || m == 1) {
      f.diagonal_ = true;
      if (!(f.sd_.array() > 0.0).all()) throw NumericalError("working covariance has a zero variance");
      return f;
    }
    f.diagonal_ = false;
    MatrixXd V = f.sd_.asDiagonal() * correlation_matrix(spec, m) * f.sd_.asDiagonal();
    f.llt_.compute(V);
    if (f.llt_.info() != Eigen::Success || !(f.llt_.matrixLLT().diagonal().array() > 0.0).all())
      throw NumericalError("Cholesky of the working covariance failed");
    return f;
  }

  bool diagonal() const { return diagonal_; }
  Eigen::Index size() const { return sd_.size(); }

  /// L^{-1} M where V = L L'.
  MatrixXd whiten(const MatrixXd& M) const {
    if (diagonal_) return sd_.cwiseInverse().asDiagonal() * M;
    return llt_.matrixL().solve(M);
  }
  VectorXd whiten(const VectorXd& v) const {
    if (diagonal_) return v.cwiseQuotient(sd_);
    return llt_.matrixL().solve(v);
  }

  VectorXd solve(const VectorXd& b) const {
    if (diagonal_) return b.cwiseQuotient(sd_.cwiseAbs2());
    return llt_.solve(b);
  }

  MatrixXd dense() const {
    if (diagonal_) return sd_.cwiseAbs2().asDiagonal();
    return llt_.reconstructedMatrix();
  }

 private:
  bool diagonal_ = true;
  VectorXd sd_;
  Eigen::LLT<MatrixXd> llt_;
};

/// Hands out subject factors for one fixed spec. When v(mu) is constant
/// (Gaussian) the factor depends only on the cluster size and is shared.
class CovFactorCache {
 public:
  explicit CovFactorCache(const WorkingCovSpec& spec)
      : spec_(spec), shared_(spec.family.tag() == FamilyTag::gaussian) {}

  const CovFactor& get(const VectorXd& mu) {
    if (!shared_) {
      scratch_ = CovFactor::make(spec_, mu);
      return scratch_;
    }
    const auto m = static_cast<std::size_t>(mu.size());
    if (m >= by_size_.size()) by_size_.resize(m + 1);
    if (!by_size_[m]) by_size_[m] = CovFactor::make(spec_, mu);
    return *by_size_[m];
  }

 private:
  WorkingCovSpec spec_;
  bool shared_;
  CovFactor scratch_;
  std::vector<std::optional<CovFactor>> by_size_;
};

struct AssembledCov {
  MatrixXd V;
  Eigen::LLT<MatrixXd> chol;
};

/// V = dispersion * A^{1/2} R A^{1/2} with A = diag(v(mu)), always as a
/// dense matrix with its Cholesky factor.
inline AssembledCov assemble_V(const WorkingCovSpec& spec, const VectorXd& mu) {
  const Eigen::Index m = mu.size();
  VectorXd sd(m);
  for (Eigen::Index j = 0; j < m; ++j) sd(j) = std::sqrt(spec.dispersion * spec.family.variance(mu(j)));
  AssembledCov out;
  out.V = sd.asDiagonal() * correlation_matrix(spec, m) * sd.asDiagonal();
  out.chol.compute(out.V);
  if (out.chol.info() != Eigen::Success || !(out.chol.matrixLLT().diagonal().array() > 0.0).all())
    throw NumericalError("Cholesky of the working covariance failed");
  return out;
}

/// Pearson residuals (y - mu)/sqrt(v(mu)) of one subject.
inline VectorXd pearson_residuals(const OutcomeFamily& family, const VectorXd& y, const VectorXd& mu) {
  VectorXd e(y.size());
  for (Eigen::Index j = 0; j < y.size(); ++j) e(j) = (y(j) - mu(j)) / std::sqrt(family.variance(mu(j)));
  return e;
}

/// Pearson mean square sum(e^2) / (N - dof); returns `fallback` when the
/// denominator is not positive.
inline double pearson_dispersion(const std::vector<VectorXd>& residuals, double dof, double fallback = 1.0) {
  double ss = 0.0;
  double N = 0.0;
  for (const auto& e : residuals) {
    ss += e.squaredNorm();
    N += static_cast<double>(e.size());
  }
  const double denom = N - dof;
  if (!(denom > 0.0) || !(ss > 0.0)) return fallback;
  return ss / denom;
}

/// Moment update of rho from Pearson residuals. `dof` is subtracted from
/// every moment denominator (pass 0 to disable). Both moments are
/// normalized by the Pearson mean square; the result is clipped into the
/// admissible range, and degenerate denominators leave rho unchanged.
inline double update_rho(const WorkingCovSpec& spec, const std::vector<VectorXd>& residuals, double dof) {
  if (spec.corr == CorrFamily::independence) return 0.0;
  Eigen::Index max_m = 1;
  double num = 0.0;
  double pairs = 0.0;
  for (const auto& e : residuals) {
    const Eigen::Index m = e.size();
    max_m = std::max(max_m, m);
    if (spec.corr == CorrFamily::exchangeable) {
      // sum_{j<k} e_j e_k = ((sum e)^2 - sum e^2) / 2
      const double s = e.sum();
      num += 0.5 * (s * s - e.squaredNorm());
      pairs += 0.5 * static_cast<double>(m * (m - 1));
    } else {
      for (Eigen::Index j = 0; j + 1 < m; ++j) num += e(j) * e(j + 1);
      pairs += static_cast<double>(m - 1);
    }
  }
  const double scale = pearson_dispersion(residuals, dof, 0.0);
  const double denom = (pairs - dof) * scale;
  if (!(denom > 0.0)) return spec.rho;
  const auto [lo, hi] = rho_range(spec.corr, max_m);
  return std::clamp(num / denom, lo, hi);
}

}  // namespace gplsim

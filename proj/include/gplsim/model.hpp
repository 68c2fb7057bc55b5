#pragma once

// Data model shared by every estimator: subject blocks, the finite-dimensional
// parameter theta = (beta, phi), the sphere map phi -> alpha, and the three
// outcome families.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "gplsim/errors.hpp"

namespace gplsim {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SubjectBlock {
  std::string id;
  VectorXd y;  // m_i
  MatrixXd X;  // m_i x p
  MatrixXd Z;  // m_i x q

  Eigen::Index size() const { return y.size(); }
};

enum class FamilyTag { gaussian, bernoulli, poisson };

/// Canonical-link outcome family: identity/Gaussian, logit/Bernoulli,
/// log/Poisson. Means are clamped away from the variance singularities
/// before v(mu) and deviances are evaluated.
class OutcomeFamily {
 public:
  static constexpr double kMeanFloor = 1e-10;

  constexpr OutcomeFamily() = default;
  constexpr explicit OutcomeFamily(FamilyTag tag) : tag_(tag) {}

  constexpr FamilyTag tag() const { return tag_; }

  std::string_view name() const {
    switch (tag_) {
      case FamilyTag::gaussian: return "gaussian";
      case FamilyTag::bernoulli: return "bernoulli";
      case FamilyTag::poisson: return "poisson";
    }
    return "?";
  }

  static OutcomeFamily parse(std::string_view s) {
    if (s == "gaussian") return OutcomeFamily(FamilyTag::gaussian);
    if (s == "bernoulli" || s == "binomial") return OutcomeFamily(FamilyTag::bernoulli);
    if (s == "poisson") return OutcomeFamily(FamilyTag::poisson);
    throw ConfigError("unknown outcome family '" + std::string(s) + "'");
  }

  double link(double mu) const {
    switch (tag_) {
      case FamilyTag::gaussian: return mu;
      case FamilyTag::bernoulli: return std::log(mu / (1.0 - mu));
      case FamilyTag::poisson: return std::log(mu);
    }
    return mu;
  }

  double inverse_link(double xi) const {
    switch (tag_) {
      case FamilyTag::gaussian: return xi;
      case FamilyTag::bernoulli:
        return xi >= 0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
      case FamilyTag::poisson: return std::exp(std::min(xi, 700.0));
    }
    return xi;
  }

  /// d mu / d xi
  double mean_deriv(double xi) const {
    switch (tag_) {
      case FamilyTag::gaussian: return 1.0;
      case FamilyTag::bernoulli: {
        const double mu = inverse_link(xi);
        return mu * (1.0 - mu);
      }
      case FamilyTag::poisson: return inverse_link(xi);
    }
    return 1.0;
  }

  double clamp_mean(double mu) const {
    switch (tag_) {
      case FamilyTag::gaussian: return mu;
      case FamilyTag::bernoulli: return std::clamp(mu, kMeanFloor, 1.0 - kMeanFloor);
      case FamilyTag::poisson: return std::max(mu, kMeanFloor);
    }
    return mu;
  }

  /// v(mu), evaluated at the clamped mean.
  double variance(double mu) const {
    switch (tag_) {
      case FamilyTag::gaussian: return 1.0;
      case FamilyTag::bernoulli: {
        const double m = clamp_mean(mu);
        return m * (1.0 - m);
      }
      case FamilyTag::poisson: return clamp_mean(mu);
    }
    return 1.0;
  }

  bool has_fixed_dispersion() const { return tag_ != FamilyTag::gaussian; }

  /// Checks the response support: {0,1} for Bernoulli, nonnegative integers
  /// for Poisson.
  bool valid_response(double y) const {
    switch (tag_) {
      case FamilyTag::gaussian: return std::isfinite(y);
      case FamilyTag::bernoulli: return y == 0.0 || y == 1.0;
      case FamilyTag::poisson: return y >= 0.0 && std::floor(y) == y;
    }
    return false;
  }

 private:
  FamilyTag tag_ = FamilyTag::gaussian;
};

/// Unit deviance d(y, mu) >= 0. Throws DomainError for a mean outside the
/// family's open range.
inline double unit_deviance(const OutcomeFamily& family, double y, double mu) {
  switch (family.tag()) {
    case FamilyTag::gaussian:
      return (y - mu) * (y - mu);
    case FamilyTag::poisson: {
      if (!(mu > 0.0)) throw DomainError("poisson deviance needs mu > 0");
      if (y == 0.0) return 2.0 * mu;
      return 2.0 * (y * std::log(y / mu) - (y - mu));
    }
    case FamilyTag::bernoulli: {
      if (!(mu > 0.0 && mu < 1.0)) throw DomainError("bernoulli deviance needs mu in (0,1)");
      double d = 0.0;
      if (y > 0.0) d -= y * std::log(mu);
      if (y < 1.0) d -= (1.0 - y) * std::log1p(-mu);
      return 2.0 * d;
    }
  }
  return 0.0;
}

/// Index direction alpha, ||alpha|| = 1 and alpha_1 > 0.
struct IndexDirection {
  VectorXd alpha;
};

inline IndexDirection alpha_from_phi(const VectorXd& phi) {
  const double s = phi.squaredNorm();
  if (!(s < 1.0)) throw DomainError("alpha_from_phi: ||phi|| must be < 1");
  IndexDirection out;
  out.alpha.resize(phi.size() + 1);
  out.alpha(0) = std::sqrt(1.0 - s);
  out.alpha.tail(phi.size()) = phi;
  return out;
}

inline VectorXd phi_from_alpha(const VectorXd& alpha) {
  if (alpha.size() < 1) throw DomainError("phi_from_alpha: empty alpha");
  if (std::abs(alpha.norm() - 1.0) > 1e-8) throw DomainError("phi_from_alpha: alpha is not unit norm");
  if (!(alpha(0) > 0.0)) throw DomainError("phi_from_alpha: alpha_1 must be positive");
  return alpha.tail(alpha.size() - 1);
}

/// theta = (beta, phi); d = p + q - 1.
class Theta {
 public:
  Theta() = default;
  Theta(VectorXd beta, VectorXd phi) : beta_(std::move(beta)), phi_(std::move(phi)) {
    if (!(phi_.squaredNorm() < 1.0)) throw DomainError("Theta: ||phi|| must be < 1");
  }

  static Theta from_vector(const VectorXd& v, Eigen::Index p) {
    return Theta(v.head(p), v.tail(v.size() - p));
  }

  const VectorXd& beta() const { return beta_; }
  const VectorXd& phi() const { return phi_; }
  Eigen::Index p() const { return beta_.size(); }
  Eigen::Index dim() const { return beta_.size() + phi_.size(); }

  VectorXd as_vector() const {
    VectorXd v(dim());
    v << beta_, phi_;
    return v;
  }

  IndexDirection alpha() const { return alpha_from_phi(phi_); }

 private:
  VectorXd beta_;
  VectorXd phi_;
};

/// Longest admissible ||phi||; the optimizers project back inside it.
inline constexpr double kPhiRadius = 1.0 - 1e-6;

/// Pulls phi (the trailing q-1 entries of a stacked theta vector) back
/// inside the ball of radius kPhiRadius.
inline void project_phi(VectorXd& theta, Eigen::Index p) {
  const Eigen::Index nphi = theta.size() - p;
  if (nphi == 0) return;
  const double r = theta.tail(nphi).norm();
  if (r > kPhiRadius) theta.tail(nphi) *= kPhiRadius / r;
}

/// Subjects with identical column layouts. Order of `subjects` is the
/// reduction order of every sum over subjects.
class LongitudinalDataset {
 public:
  LongitudinalDataset() = default;
  LongitudinalDataset(std::vector<SubjectBlock> subjects, Eigen::Index p, Eigen::Index q)
      : subjects_(std::move(subjects)), p_(p), q_(q) {
    if (q_ < 1) throw DomainError("dataset needs at least one index covariate");
    if (subjects_.size() < 2) throw DomainError("dataset needs at least two subjects");
    std::unordered_set<std::string> ids;
    for (const auto& s : subjects_) {
      if (s.size() < 1) throw DomainError("subject '" + s.id + "' has no observations");
      if (s.X.rows() != s.size() || s.Z.rows() != s.size())
        throw DomainError("subject '" + s.id + "' has inconsistent row counts");
      if (s.X.cols() != p_ || s.Z.cols() != q_)
        throw DomainError("subject '" + s.id + "' has inconsistent column counts");
      if (!ids.insert(s.id).second) throw DomainError("duplicate subject id '" + s.id + "'");
      total_obs_ += s.size();
      max_cluster_ = std::max(max_cluster_, s.size());
    }
  }

  const std::vector<SubjectBlock>& subjects() const { return subjects_; }
  const SubjectBlock& operator[](std::size_t i) const { return subjects_[i]; }
  std::size_t n() const { return subjects_.size(); }
  Eigen::Index p() const { return p_; }
  Eigen::Index q() const { return q_; }
  Eigen::Index d() const { return p_ + q_ - 1; }
  Eigen::Index total_obs() const { return total_obs_; }
  Eigen::Index max_cluster() const { return max_cluster_; }

  void validate_for(const OutcomeFamily& family) const {
    for (const auto& s : subjects_)
      for (Eigen::Index j = 0; j < s.size(); ++j)
        if (!family.valid_response(s.y(j)))
          throw DomainError("subject '" + s.id + "': response " + std::to_string(s.y(j)) +
                            " outside the support of the " + std::string(family.name()) +
                            " family");
  }

  /// New dataset built from the listed subjects (repeats allowed); repeated
  /// subjects get fresh ids so nothing downstream deduplicates them.
  LongitudinalDataset subset(const std::vector<std::size_t>& idx, bool fresh_ids = false) const {
    std::vector<SubjectBlock> out;
    out.reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      SubjectBlock b = subjects_.at(idx[k]);
      if (fresh_ids) b.id = b.id + "#" + std::to_string(k);
      out.push_back(std::move(b));
    }
    return LongitudinalDataset(std::move(out), p_, q_);
  }

 private:
  std::vector<SubjectBlock> subjects_;
  Eigen::Index p_ = 0;
  Eigen::Index q_ = 0;
  Eigen::Index total_obs_ = 0;
  Eigen::Index max_cluster_ = 0;
};

}  // namespace gplsim

#pragma once

// Baselines: observation-level (naive) EL, GEE with sandwich Wald
// intervals, and GEE with a low-order polynomial link.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "gplsim/el.hpp"
#include "gplsim/errors.hpp"
#include "gplsim/profile.hpp"

namespace gplsim {

inline double normal_quantile(double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0,1)");
  if (level == 0.95) return 1.96;
  return boost::math::quantile(boost::math::normal(), 0.5 + level / 2.0);
}

/// Independence version of a problem: naive EL always weights observations
/// as independent, whatever working correlation was requested.
inline ProfileProblem independence_problem(const ProfileProblem& problem) {
  WorkingCovSpec spec = problem.spec();
  spec.corr = CorrFamily::independence;
  spec.rho = 0.0;
  return ProfileProblem(problem.data(), problem.proto(), spec, problem.config());
}

/// Observation-level EL at theta with independence-profiled gamma.
inline ELResult naive_el(const ProfileProblem& problem, const Theta& theta) {
  const ProfileProblem ind = independence_problem(problem);
  return bel_statistic(ind, theta, ELUnits::observation);
}

struct SandwichCov {
  MatrixXd H_n;  // d(n^{-1} sum g_i)/d theta
  MatrixXd S_n;  // sum g_i g_i' / n
  MatrixXd cov;  // H^{-1} S H^{-T} / n
};

struct WaldInterval {
  std::string component;
  double estimate = 0.0;
  double se = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
};

struct WaldResult {
  FitResult fit;
  SandwichCov sandwich;
  std::vector<WaldInterval> theta_intervals;  // beta1..p, phi1..q-1
  std::vector<WaldInterval> alpha_intervals;  // alpha1..q (alpha1 by the delta method)

  const WaldInterval& find(const std::string& name) const {
    for (const auto& w : theta_intervals)
      if (w.component == name) return w;
    for (const auto& w : alpha_intervals)
      if (w.component == name) return w;
    throw ConfigError("no Wald interval for " + name);
  }
};

struct SandwichOptions {
  double step_scale = 16.0;  // bread step in units of the Jacobian step
};

/// Sandwich at a fitted theta. The bread is a Richardson-extrapolated
/// central difference of the fully profiled mean score.
inline SandwichCov sandwich_at(const ProfileProblem& problem, const FitResult& fit, const SandwichOptions& opt = {}) {
  const Eigen::Index d = fit.theta_hat.dim();
  const Eigen::Index p = problem.data().p();
  const double n = static_cast<double>(problem.data().n());
  const VectorXd theta = fit.theta_hat.as_vector();
  const VectorXd warm = fit.sieve_hat.gamma();
  auto mean_score = [&](const VectorXd& t) -> VectorXd {
    return problem.evaluate(t, &warm, true).score() / n;
  };
  auto central = [&](Eigen::Index k, double h) -> VectorXd {
    VectorXd tp = theta, tm = theta;
    tp(k) += h;
    tm(k) -= h;
    if (tp.tail(d - p).squaredNorm() >= 1.0 || tm.tail(d - p).squaredNorm() >= 1.0)
      throw DomainError("sandwich: finite-difference step leaves the parameter space");
    return (mean_score(tp) - mean_score(tm)) / (2.0 * h);
  };
  SandwichCov out;
  out.H_n.resize(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double h = fd_step(theta(k), problem.config().fd_scale) * opt.step_scale;
    out.H_n.col(k) = (4.0 * central(k, 0.5 * h) - central(k, h)) / 3.0;
  }
  const MatrixXd& g = fit.per_subject_g;
  out.S_n = g.transpose() * g / n;
  Eigen::JacobiSVD<MatrixXd> svd(out.H_n);
  const auto& sv = svd.singularValues();
  if (!(sv(d - 1) > 0.0) || sv(0) / sv(d - 1) > 1e12)
    throw SingularBread("sandwich bread is singular (condition " + std::to_string(sv(0) / sv(d - 1)) + ")");
  const Eigen::PartialPivLU<MatrixXd> lu(out.H_n);
  const MatrixXd A = lu.solve(out.S_n);
  out.cov = lu.solve(A.transpose()).transpose() / n;
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

inline std::string theta_component_name(Eigen::Index k, Eigen::Index p) {
  return k < p ? "beta" + std::to_string(k + 1) : "phi" + std::to_string(k - p + 1);
}

inline WaldResult wald_from_fit(const ProfileProblem& problem, FitResult fit, double level,
                                const SandwichOptions& opt = {}) {
  WaldResult out;
  out.sandwich = sandwich_at(problem, fit, opt);
  const double z = normal_quantile(level);
  const Eigen::Index p = problem.data().p();
  const Eigen::Index d = fit.theta_hat.dim();
  const VectorXd theta = fit.theta_hat.as_vector();
  const MatrixXd& cov = out.sandwich.cov;
  for (Eigen::Index k = 0; k < d; ++k) {
    const double se = std::sqrt(std::max(cov(k, k), 0.0));
    out.theta_intervals.push_back({theta_component_name(k, p), theta(k), se, theta(k) - z * se, theta(k) + z * se});
  }
  const VectorXd& alpha = fit.alpha_hat.alpha;
  // alpha1 = sqrt(1 - |phi|^2): gradient -phi / alpha1 on the phi block.
  const Eigen::Index nphi = d - p;
  double var1 = 0.0;
  if (nphi > 0) {
    const VectorXd grad = -fit.theta_hat.phi() / alpha(0);
    var1 = grad.dot(cov.bottomRightCorner(nphi, nphi) * grad);
  }
  const double se1 = std::sqrt(std::max(var1, 0.0));
  out.alpha_intervals.push_back({"alpha1", alpha(0), se1, alpha(0) - z * se1, alpha(0) + z * se1});
  for (Eigen::Index j = 1; j < alpha.size(); ++j) {
    const WaldInterval& w = out.theta_intervals[p + j - 1];
    out.alpha_intervals.push_back({"alpha" + std::to_string(j + 1), w.estimate, w.se, w.lo, w.hi});
  }
  out.fit = std::move(fit);
  return out;
}

/// GEE point estimate (the profile fit itself) with sandwich Wald intervals.
inline WaldResult gee_wald(const ProfileProblem& problem, const Theta& theta_init, double level = 0.95,
                           const SandwichOptions& opt = {}) {
  return wald_from_fit(problem, fit(problem, theta_init), level, opt);
}

/// The same estimator with the monomial link basis {1, u, ..., u^degree}.
inline ProfileProblem polynomial_problem(const LongitudinalDataset& data, const WorkingCovSpec& spec,
                                         const FitConfig& config, int degree = 2) {
  return ProfileProblem(data, Sieve::monomial(degree), spec, config);
}

inline WaldResult gee_poly(const LongitudinalDataset& data, const WorkingCovSpec& spec, const FitConfig& config,
                           const Theta& theta_init, int degree = 2, double level = 0.95) {
  const ProfileProblem problem = polynomial_problem(data, spec, config, degree);
  return gee_wald(problem, theta_init, level);
}

}  // namespace gplsim

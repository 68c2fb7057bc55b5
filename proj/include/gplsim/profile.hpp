#pragma once

// Profile estimating equations for the partially linear single-index model.
//
// For a fixed theta the spline coefficients gamma are profiled out by GEE
// Fisher scoring (the inner step); the outer step solves
//     sum_i G_i(theta)' V_i^{-1} (Y_i - mu_i(theta)) = 0,
// where G_i is the total derivative of the profiled mean, obtained by
// central differences that re-run the inner fit at every displacement.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "gplsim/errors.hpp"
#include "gplsim/model.hpp"
#include "gplsim/splines.hpp"
#include "gplsim/working_cov.hpp"

namespace gplsim {

struct FitConfig {
  int max_outer = 100;
  int max_inner = 50;
  double tol_theta = 1e-6;  // relative step norm
  double tol_gamma = 1e-8;  // inner score, scaled by n
  double score_tol = 1e-4;  // outer score at convergence, scaled by n
  double fd_scale = 1.0;    // multiplies h_k = cbrt(eps) (1 + |theta_k|)
  double backtrack = 0.5;
  int max_halvings = 20;
  bool update_rho = true;
  bool rho_dof_correction = true;  // subtract d in the moment denominators
  bool freeze_rho = false;         // hold rho when re-profiling at a candidate theta
  int max_rho_sweeps = 25;

  void validate() const {
    if (max_outer < 1 || max_inner < 1 || max_halvings < 1 || max_rho_sweeps < 1)
      throw ConfigError("FitConfig: iteration counts must be >= 1");
    if (!(tol_theta > 0 && tol_gamma > 0 && score_tol > 0 && fd_scale > 0))
      throw ConfigError("FitConfig: tolerances must be positive");
    if (!(backtrack > 0 && backtrack < 1)) throw ConfigError("FitConfig: backtrack must lie in (0,1)");
  }
};

/// Finite-difference step for coordinate value x.
inline double fd_step(double x, double scale = 1.0) {
  return std::cbrt(std::numeric_limits<double>::epsilon()) * (1.0 + std::abs(x)) * scale;
}

/// Everything the profile machinery computes at one theta.
struct ProfilePoint {
  VectorXd theta;          // stacked (beta, phi)
  Sieve sieve;             // rescaled at theta, with gamma-hat(theta)
  double rho = 0.0;
  double dispersion = 1.0;
  bool degenerate_index = false;
  std::vector<VectorXd> mu;   // mu-hat_i(theta)
  std::vector<MatrixXd> G;    // m_i x d profiled Jacobians
  MatrixXd g;                 // n x d, row i = g_i(theta)
  MatrixXd info;              // sum_i G_i' V_i^{-1} G_i

  VectorXd score() const { return g.colwise().sum().transpose(); }
  double merit() const { return score().squaredNorm(); }
};

struct MeritStep {
  double before = 0.0;
  double after = 0.0;
};

struct FitResult {
  Theta theta_hat;
  IndexDirection alpha_hat;
  Sieve sieve_hat;
  WorkingCovSpec spec;  // with the fitted rho and dispersion
  double rho_hat = 0.0;
  double dispersion_hat = 1.0;
  bool converged = false;
  int n_outer = 0;
  MatrixXd per_subject_g;                 // n x d
  std::vector<MatrixXd> profiled_jacobians;
  std::vector<VectorXd> fitted_means;
  MatrixXd info;
  double deviance = 0.0;
  bool degenerate_index = false;
  std::vector<MeritStep> merit_trace;     // accepted outer steps

  /// Sup norm of the summed score, at unit dispersion.
  double score_inf_norm() const {
    return per_subject_g.rows() ? per_subject_g.colwise().sum().cwiseAbs().maxCoeff() * dispersion_hat : 0.0;
  }
  int K() const { return sieve_hat.K(); }
};

namespace detail {

inline std::vector<MatrixXd> design_matrices(const LongitudinalDataset& data, const VectorXd& alpha,
                                             const Sieve& sieve) {
  std::vector<MatrixXd> Bs(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    const VectorXd u = index_values(data[i], alpha);
    MatrixXd B(u.size(), sieve.K());
    for (Eigen::Index j = 0; j < u.size(); ++j) sieve.basis_row_into(u(j), B.row(j));
    Bs[i] = std::move(B);
  }
  return Bs;
}

inline std::vector<VectorXd> offsets(const LongitudinalDataset& data, const VectorXd& beta) {
  std::vector<VectorXd> o(data.n());
  for (std::size_t i = 0; i < data.n(); ++i)
    o[i] = data.p() > 0 ? VectorXd(data[i].X * beta) : VectorXd::Zero(data[i].size());
  return o;
}

inline VectorXd mean_of(const OutcomeFamily& fam, const VectorXd& xi) {
  VectorXd mu(xi.size());
  for (Eigen::Index j = 0; j < xi.size(); ++j) mu(j) = fam.inverse_link(xi(j));
  return mu;
}

/// Solves H x = s, adding the ridge 1e-8 trace(H)/K when H is
/// ill-conditioned (reciprocal condition below 1e-12).
inline VectorXd guarded_solve(const MatrixXd& H, const VectorXd& s) {
  Eigen::LLT<MatrixXd> llt(H);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-12) return llt.solve(s);
  const double ridge = 1e-8 * std::max(H.trace(), 1e-300) / static_cast<double>(H.rows());
  MatrixXd Hr = H;
  Hr.diagonal().array() += ridge;
  llt.compute(Hr);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-15)) throw SingularDesign("inner normal matrix is singular");
  return llt.solve(s);
}

}  // namespace detail

/// GEE Fisher scoring for gamma at fixed theta with the offset X_i beta.
/// `Bs` are the design matrices at theta. Gaussian fits are a single
/// weighted least-squares solve.
inline VectorXd inner_fit_gamma(const LongitudinalDataset& data, const std::vector<MatrixXd>& Bs,
                                const std::vector<VectorXd>& offsets, const WorkingCovSpec& spec,
                                const FitConfig& config, const VectorXd& gamma_start) {
  const Eigen::Index K = gamma_start.size();
  const OutcomeFamily& fam = spec.family;
  VectorXd gamma = gamma_start;
  double last_step = std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(data.n());
  CovFactorCache factors(spec);
  for (int it = 0; it < config.max_inner; ++it) {
    MatrixXd H = MatrixXd::Zero(K, K);
    VectorXd s = VectorXd::Zero(K);
    for (std::size_t i = 0; i < data.n(); ++i) {
      const VectorXd xi = offsets[i] + Bs[i] * gamma;
      VectorXd mu(xi.size());
      MatrixXd D = Bs[i];
      for (Eigen::Index j = 0; j < xi.size(); ++j) {
        mu(j) = fam.inverse_link(xi(j));
        D.row(j) *= fam.mean_deriv(xi(j));
      }
      const CovFactor& V = factors.get(mu);
      const MatrixXd W = V.whiten(D);
      const VectorXd r = V.whiten(VectorXd(data[i].y - mu));
      H.noalias() += W.transpose() * W;
      s.noalias() += W.transpose() * r;
    }
    if (!s.allFinite() || !H.allFinite()) throw NonConvergence("inner fit produced non-finite values");
    const double score = s.cwiseAbs().maxCoeff();
    if (it > 0 && score <= config.tol_gamma * n && last_step <= 1e-9 * (1.0 + gamma.cwiseAbs().maxCoeff()))
      return gamma;
    const VectorXd step = detail::guarded_solve(H, s);
    gamma += step;
    last_step = step.cwiseAbs().maxCoeff();
    if (fam.tag() == FamilyTag::gaussian) return gamma;
  }
  throw NonConvergence("inner spline fit did not converge in " + std::to_string(config.max_inner) +
                       " iterations");
}

/// The estimation problem at a fixed sieve prototype (basis kind and K) and
/// working-covariance family. Evaluations are pure functions of theta.
class ProfileProblem {
 public:
  ProfileProblem(const LongitudinalDataset& data, Sieve proto, WorkingCovSpec spec, FitConfig config)
      : data_(&data), proto_(std::move(proto)), spec_(spec), config_(config) {
    config_.validate();
    if (spec_.corr == CorrFamily::independence) spec_.rho = 0.0;
  }

  const LongitudinalDataset& data() const { return *data_; }
  const Sieve& proto() const { return proto_; }
  const WorkingCovSpec& spec() const { return spec_; }
  const FitConfig& config() const { return config_; }
  Eigen::Index d() const { return data_->d(); }

  bool rho_is_estimated() const {
    return spec_.corr != CorrFamily::independence && config_.update_rho;
  }

  /// Sieve rescaled to the index range at theta.
  Sieve sieve_at(const VectorXd& theta, bool* degenerate = nullptr) const {
    const Theta th = Theta::from_vector(theta, data_->p());
    const IndexRange r = index_range(*data_, th.alpha().alpha);
    if (degenerate) *degenerate = r.degenerate;
    return proto_.with_range(r.lo, r.hi);
  }

  struct InnerFit {
    Sieve sieve;
    std::vector<VectorXd> mu;
    bool degenerate = false;
  };

  /// gamma-hat(theta) at fixed (rho, dispersion) and the implied means.
  /// `frame` replaces the sieve rescaled to the index range at theta.
  InnerFit inner(const VectorXd& theta, const WorkingCovSpec& spec, const VectorXd* warm,
                 const Sieve* frame = nullptr) const {
    InnerFit out;
    out.sieve = frame ? *frame : sieve_at(theta, &out.degenerate);
    const Theta th = Theta::from_vector(theta, data_->p());
    const auto Bs = detail::design_matrices(*data_, th.alpha().alpha, out.sieve);
    const auto offs = detail::offsets(*data_, th.beta());
    const VectorXd start = (warm && warm->size() == out.sieve.K()) ? *warm : initial_gamma(offs);
    out.sieve.set_gamma(inner_fit_gamma(*data_, Bs, offs, spec, config_, start));
    out.mu.resize(data_->n());
    for (std::size_t i = 0; i < data_->n(); ++i)
      out.mu[i] = detail::mean_of(spec.family, offs[i] + Bs[i] * out.sieve.gamma());
    return out;
  }

  /// Full profile evaluation at theta. With `reprofile_rho` the working
  /// correlation (and Gaussian dispersion) are re-estimated at theta by
  /// alternating with the inner fit; otherwise `fixed` supplies them.
  ProfilePoint evaluate(const VectorXd& theta, const VectorXd* warm_gamma, bool reprofile_rho,
                        const WorkingCovSpec* fixed = nullptr) const {
    WorkingCovSpec spec = fixed ? *fixed : spec_;
    InnerFit base = inner(theta, spec, warm_gamma);
    if (reprofile_rho) {
      const double dof = config_.rho_dof_correction ? static_cast<double>(d()) : 0.0;
      if (rho_is_estimated() && !config_.freeze_rho) {
        for (int sweep = 0; sweep < config_.max_rho_sweeps; ++sweep) {
          const double rho_new = update_rho(spec, residuals(base.mu, spec.family), dof);
          const bool done = std::abs(rho_new - spec.rho) < 1e-10;
          spec.rho = rho_new;
          if (done) break;
          const VectorXd warm = base.sieve.gamma();
          base = inner(theta, spec, &warm);
        }
      }
      spec.dispersion = spec.family.has_fixed_dispersion()
                            ? 1.0
                            : pearson_dispersion(residuals(base.mu, spec.family), dof, 1.0);
    }
    return finish(theta, std::move(base), spec);
  }

  /// Profiled Jacobians G_i(theta) at fixed (rho, dispersion), with the
  /// rescaling map held at theta's index range. Indices pushed past the
  /// range by a difference step follow the end polynomial pieces.
  std::vector<MatrixXd> jacobians(const VectorXd& theta, const WorkingCovSpec& spec,
                                  const InnerFit& base) const {
    const Eigen::Index dd = d();
    const Eigen::Index p = data_->p();
    std::vector<MatrixXd> G(data_->n());
    for (std::size_t i = 0; i < data_->n(); ++i) G[i].resize(data_->subjects()[i].size(), dd);
    const Sieve frame = base.sieve.unclamped();
    const VectorXd& warm = base.sieve.gamma();
    for (Eigen::Index k = 0; k < dd; ++k) {
      const double h = fd_step(theta(k), config_.fd_scale);
      VectorXd tp = theta, tm = theta;
      tp(k) += h;
      tm(k) -= h;
      const bool plus_ok = phi_ok(tp, p);
      const bool minus_ok = phi_ok(tm, p);
      if (!plus_ok && !minus_ok) throw DomainError("no admissible finite-difference step at the boundary");
      const InnerFit fp = plus_ok ? inner(tp, spec, &warm, &frame) : InnerFit{};
      const InnerFit fm = minus_ok ? inner(tm, spec, &warm, &frame) : InnerFit{};
      const double width = (plus_ok ? tp(k) : theta(k)) - (minus_ok ? tm(k) : theta(k));
      for (std::size_t i = 0; i < data_->n(); ++i) {
        const VectorXd& up = plus_ok ? fp.mu[i] : base.mu[i];
        const VectorXd& dn = minus_ok ? fm.mu[i] : base.mu[i];
        G[i].col(k) = (up - dn) / width;
      }
    }
    return G;
  }

  static std::vector<VectorXd> residuals(const std::vector<VectorXd>& mu, const OutcomeFamily& fam,
                                         const LongitudinalDataset& data) {
    std::vector<VectorXd> e(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) e[i] = pearson_residuals(fam, data[i].y, mu[i]);
    return e;
  }

  std::vector<VectorXd> residuals(const std::vector<VectorXd>& mu, const OutcomeFamily& fam) const {
    return residuals(mu, fam, *data_);
  }

 private:
  static bool phi_ok(const VectorXd& theta, Eigen::Index p) {
    return theta.tail(theta.size() - p).squaredNorm() < 1.0;
  }

  VectorXd initial_gamma(const std::vector<VectorXd>& offs) const {
    // Constant link at the family mean of y - offset on the link scale.
    const OutcomeFamily& fam = spec_.family;
    double ysum = 0.0, osum = 0.0, N = 0.0;
    for (std::size_t i = 0; i < data_->n(); ++i) {
      ysum += data_->subjects()[i].y.sum();
      osum += offs[i].sum();
      N += static_cast<double>(offs[i].size());
    }
    double ybar = ysum / N;
    if (fam.tag() == FamilyTag::bernoulli) ybar = std::clamp(ybar, 0.01, 0.99);
    if (fam.tag() == FamilyTag::poisson) ybar = std::max(ybar, 0.01);
    double c = fam.link(ybar) - (fam.tag() == FamilyTag::gaussian ? osum / N : 0.0);
    VectorXd g = VectorXd::Zero(proto_.K());
    if (proto_.kind() == BasisKind::cubic_bspline) g.setConstant(c);  // partition of unity
    else g(0) = c;
    return g;
  }

  ProfilePoint finish(const VectorXd& theta, InnerFit base, const WorkingCovSpec& spec) const {
    ProfilePoint pt;
    pt.theta = theta;
    pt.rho = spec.rho;
    pt.dispersion = spec.dispersion;
    pt.degenerate_index = base.degenerate;
    pt.G = jacobians(theta, spec, base);
    const Eigen::Index dd = d();
    pt.g.resize(static_cast<Eigen::Index>(data_->n()), dd);
    pt.info = MatrixXd::Zero(dd, dd);
    CovFactorCache factors(spec);
    for (std::size_t i = 0; i < data_->n(); ++i) {
      const CovFactor& V = factors.get(base.mu[i]);
      const MatrixXd W = V.whiten(pt.G[i]);
      const VectorXd r = V.whiten(VectorXd(data_->subjects()[i].y - base.mu[i]));
      pt.g.row(static_cast<Eigen::Index>(i)) = (W.transpose() * r).transpose();
      pt.info.noalias() += W.transpose() * W;
    }
    pt.mu = std::move(base.mu);
    pt.sieve = std::move(base.sieve);
    return pt;
  }

  const LongitudinalDataset* data_;
  Sieve proto_;
  WorkingCovSpec spec_;
  FitConfig config_;
};

/// mu-hat_i(theta) and gamma-hat(theta) at the problem's working covariance.
struct ProfiledMean {
  std::vector<VectorXd> mu;
  Sieve sieve;
  bool degenerate_index = false;
};

inline ProfiledMean profiled_mean(const ProfileProblem& problem, const Theta& theta) {
  auto fit = problem.inner(theta.as_vector(), problem.spec(), nullptr);
  return {std::move(fit.mu), std::move(fit.sieve), fit.degenerate};
}

inline std::vector<MatrixXd> profiled_jacobian(const ProfileProblem& problem, const Theta& theta) {
  const VectorXd t = theta.as_vector();
  const auto base = problem.inner(t, problem.spec(), nullptr);
  return problem.jacobians(t, problem.spec(), base);
}

/// g_i = G_i' V_i^{-1} (Y_i - mu_i) for one subject.
inline VectorXd subject_estimating_function(const SubjectBlock& block, const MatrixXd& G, const VectorXd& mu,
                                            const WorkingCovSpec& spec) {
  const CovFactor V = CovFactor::make(spec, mu);
  return G.transpose() * V.solve(VectorXd(block.y - mu));
}

/// Sum of unit deviances of the fitted means.
inline double total_deviance(const LongitudinalDataset& data, const OutcomeFamily& fam,
                             const std::vector<VectorXd>& mu) {
  double dev = 0.0;
  for (std::size_t i = 0; i < data.n(); ++i)
    for (Eigen::Index j = 0; j < mu[i].size(); ++j)
      dev += unit_deviance(fam, data[i].y(j), fam.clamp_mean(mu[i](j)));
  return dev;
}

/// Independence GLM with intercept on [1, X, Z] by IRLS; returns the
/// coefficient vector (intercept first) or nullopt when it fails.
inline std::optional<VectorXd> working_glm(const LongitudinalDataset& data, const OutcomeFamily& fam) {
  const Eigen::Index N = data.total_obs();
  const Eigen::Index cols = 1 + data.p() + data.q();
  MatrixXd A(N, cols);
  VectorXd y(N);
  Eigen::Index r = 0;
  for (const auto& s : data.subjects()) {
    for (Eigen::Index j = 0; j < s.size(); ++j, ++r) {
      A(r, 0) = 1.0;
      A.block(r, 1, 1, data.p()) = s.X.row(j);
      A.block(r, 1 + data.p(), 1, data.q()) = s.Z.row(j);
      y(r) = s.y(j);
    }
  }
  VectorXd coef = VectorXd::Zero(cols);
  double ybar = y.mean();
  if (fam.tag() == FamilyTag::bernoulli) ybar = std::clamp(ybar, 0.01, 0.99);
  if (fam.tag() == FamilyTag::poisson) ybar = std::max(ybar, 0.01);
  coef(0) = fam.link(ybar);
  for (int it = 0; it < 50; ++it) {
    const VectorXd xi = A * coef;
    VectorXd w(N), z(N);
    for (Eigen::Index k = 0; k < N; ++k) {
      const double mu = fam.clamp_mean(fam.inverse_link(xi(k)));
      const double dmu = std::max(fam.mean_deriv(xi(k)), 1e-10);
      w(k) = dmu * dmu / fam.variance(mu);
      z(k) = xi(k) + (y(k) - mu) / dmu;
    }
    MatrixXd H = A.transpose() * w.asDiagonal() * A;
    H.diagonal().array() += 1e-10 * std::max(H.trace(), 1.0) / static_cast<double>(cols);
    const VectorXd next = H.ldlt().solve(A.transpose() * w.asDiagonal() * z);
    if (!next.allFinite()) return std::nullopt;
    const double change = (next - coef).cwiseAbs().maxCoeff();
    coef = next;
    if (change < 1e-10 * (1.0 + coef.cwiseAbs().maxCoeff())) return coef;
  }
  return coef.allFinite() ? std::optional<VectorXd>(coef) : std::nullopt;
}

/// Starting theta: beta from a working GLM that ignores the nonlinearity,
/// alpha from its (normalized, first-coordinate-positive) index coefficients.
inline Theta initial_theta(const LongitudinalDataset& data, const OutcomeFamily& fam) {
  const auto coef = working_glm(data, fam);
  VectorXd beta = VectorXd::Zero(data.p());
  VectorXd phi = VectorXd::Zero(data.q() - 1);
  if (!coef) return Theta(beta, phi);
  beta = coef->segment(1, data.p());
  VectorXd a = coef->tail(data.q());
  const double norm = a.norm();
  if (data.q() > 1 && norm > 1e-8) {
    a /= norm;
    if (a(0) < 0) a = -a;
    if (a(0) < 1e-3) {
      a(0) = 1e-3;
      a.normalize();
    }
    phi = a.tail(data.q() - 1);
  }
  return Theta(beta, phi);
}

namespace detail {

inline FitResult make_result(const ProfileProblem& problem, ProfilePoint&& pt, bool converged, int n_outer,
                             std::vector<MeritStep> trace) {
  const LongitudinalDataset& data = problem.data();
  FitResult res;
  res.theta_hat = Theta::from_vector(pt.theta, data.p());
  res.alpha_hat = res.theta_hat.alpha();
  res.spec = problem.spec();
  res.spec.rho = pt.rho;
  res.spec.dispersion = pt.dispersion;
  res.rho_hat = pt.rho;
  res.dispersion_hat = pt.dispersion;
  res.converged = converged;
  res.n_outer = n_outer;
  res.deviance = total_deviance(data, problem.spec().family, pt.mu);
  res.per_subject_g = std::move(pt.g);
  res.profiled_jacobians = std::move(pt.G);
  res.fitted_means = std::move(pt.mu);
  res.info = std::move(pt.info);
  res.sieve_hat = std::move(pt.sieve);
  res.degenerate_index = pt.degenerate_index;
  res.merit_trace = std::move(trace);
  return res;
}

/// Central-difference Jacobian of U(theta) = sum_i g_i(theta) at fixed
/// working covariance.
inline MatrixXd score_jacobian_fd(const ProfileProblem& problem, const ProfilePoint& at,
                                  const WorkingCovSpec& spec) {
  const Eigen::Index d = at.theta.size();
  const Eigen::Index p = problem.data().p();
  MatrixXd J(d, d);
  const VectorXd warm = at.sieve.gamma();
  for (Eigen::Index k = 0; k < d; ++k) {
    const double h = fd_step(at.theta(k), problem.config().fd_scale);
    VectorXd tp = at.theta, tm = at.theta;
    tp(k) += h;
    tm(k) -= h;
    project_phi(tp, p);
    project_phi(tm, p);
    const VectorXd up = problem.evaluate(tp, &warm, false, &spec).score();
    const VectorXd dn = problem.evaluate(tm, &warm, false, &spec).score();
    J.col(k) = (up - dn) / (tp(k) - tm(k));
  }
  return J;
}

}  // namespace detail

/// Profile fitting: inner gamma step, optional moment update of rho, and a
/// damped Fisher-scoring step for theta on the merit ||sum_i g_i||^2, with
/// a finite-difference Newton step as fallback when backtracking stalls.
inline FitResult fit(const ProfileProblem& problem, const Theta& theta_init) {
  const FitConfig& cfg = problem.config();
  const LongitudinalDataset& data = problem.data();
  const Eigen::Index p = data.p();
  const double n = static_cast<double>(data.n());

  VectorXd theta = theta_init.as_vector();
  project_phi(theta, p);
  ProfilePoint cur = problem.evaluate(theta, nullptr, true);
  std::vector<MeritStep> trace;
  bool converged = false;
  // Convergence is judged on the score at unit dispersion.
  auto score_size = [](const ProfilePoint& pt) { return pt.score().cwiseAbs().maxCoeff() * pt.dispersion; };
  int it = 0;
  for (; it < cfg.max_outer; ++it) {
    const VectorXd U = cur.score();
    const double merit0 = U.squaredNorm();
    if (score_size(cur) <= 1e-3 * cfg.score_tol * n) {
      converged = true;
      break;
    }
    WorkingCovSpec fixed = problem.spec();
    fixed.rho = cur.rho;
    fixed.dispersion = cur.dispersion;

    auto line_search = [&](const VectorXd& dir, VectorXd& accepted_theta,
                           std::optional<ProfilePoint>& accepted) -> bool {
      double step = 1.0;
      const VectorXd warm = cur.sieve.gamma();
      for (int h = 0; h < cfg.max_halvings; ++h, step *= cfg.backtrack) {
        VectorXd trial = theta + step * dir;
        project_phi(trial, p);
        try {
          ProfilePoint pt = problem.evaluate(trial, &warm, false, &fixed);
          if (pt.merit() < merit0) {
            accepted_theta = trial;
            accepted.emplace(std::move(pt));
            return true;
          }
        } catch (const NonConvergence&) {
        } catch (const SingularDesign&) {
        }
      }
      return false;
    };

    VectorXd next_theta;
    std::optional<ProfilePoint> next;
    Eigen::LDLT<MatrixXd> ldlt(cur.info);
    VectorXd dir = ldlt.solve(U);
    bool ok = dir.allFinite() && line_search(dir, next_theta, next);
    if (!ok) {
      const MatrixXd J = detail::score_jacobian_fd(problem, cur, fixed);
      dir = -J.fullPivLu().solve(U);
      ok = dir.allFinite() && line_search(dir, next_theta, next);
      // Levenberg-Marquardt on the merit, for kinks where Newton directions fail
      const MatrixXd JtJ = J.transpose() * J;
      const VectorXd JtU = J.transpose() * U;
      const double scale = std::max(JtJ.diagonal().maxCoeff(), 1e-300);
      for (double mu = 1e-4; !ok && mu <= 1e2; mu *= 10.0) {
        MatrixXd H = JtJ;
        H.diagonal().array() += mu * scale;
        dir = -H.ldlt().solve(JtU);
        ok = dir.allFinite() && line_search(dir, next_theta, next);
      }
    }
    if (!ok) {
      converged = score_size(cur) <= cfg.score_tol * n;
      break;
    }
    trace.push_back({merit0, next->merit()});
    const double rel_step = (next_theta - theta).norm() / (1.0 + theta.norm());
    theta = next_theta;
    if (problem.rho_is_estimated() || !problem.spec().family.has_fixed_dispersion()) {
      const VectorXd warm = next->sieve.gamma();
      cur = problem.evaluate(theta, &warm, true, &fixed);
    } else {
      cur = std::move(*next);
    }
    if (rel_step <= cfg.tol_theta && score_size(cur) <= cfg.score_tol * n) {
      converged = true;
      ++it;
      break;
    }
    // Stalled: under 5% merit reduction over the last 10 steps.
    const std::size_t T = trace.size();
    if (T >= 10 && trace[T - 1].after > 0.95 * trace[T - 10].before) {
      ++it;
      break;
    }
  }
  return detail::make_result(problem, std::move(cur), converged, it, std::move(trace));
}

/// Fit starting from the working-GLM initializer.
inline FitResult fit(const ProfileProblem& problem) {
  return fit(problem, initial_theta(problem.data(), problem.spec().family));
}

/// Restart point for fits that fail from `start`: keeps beta and takes the
/// index direction with the smallest profiled independence deviance among
/// `start`'s direction and 64 fixed pseudo-random ones on the alpha_1 > 0
/// hemisphere, at sieve size K.
inline Theta pilot_theta(const LongitudinalDataset& data, const Theta& start, const WorkingCovSpec& spec,
                         const FitConfig& config, int K) {
  const Eigen::Index q = data.q();
  if (q < 2) return start;
  WorkingCovSpec ind = spec;
  ind.corr = CorrFamily::independence;
  ind.rho = 0.0;
  const ProfileProblem problem(data, Sieve::cubic_bspline(K), ind, config);
  std::mt19937_64 rng(0x5eed);
  std::normal_distribution<double> N01;
  Theta best = start;
  double best_dev = std::numeric_limits<double>::infinity();
  for (int c = 0; c <= 64; ++c) {
    VectorXd a = start.alpha().alpha;
    if (c > 0) {
      for (Eigen::Index k = 0; k < q; ++k) a(k) = N01(rng);
      a.normalize();
      if (a(0) < 0) a = -a;
    }
    if (!(a(0) > 1e-3)) continue;
    const Theta cand(start.beta(), a.tail(q - 1));
    try {
      const double dev = total_deviance(data, ind.family, profiled_mean(problem, cand).mu);
      if (dev < best_dev) {
        best_dev = dev;
        best = cand;
      }
    } catch (const Error&) {
    }
  }
  return best;
}

struct KSelection {
  int K = 0;
  std::vector<int> candidates;
  std::vector<double> bic;  // +inf for failed candidates
  FitResult fit;
};

/// Chooses K by deviance + K log(N) over cubic B-spline sieves, ties
/// toward the smaller K. Returns the winning fit as well. A candidate that
/// fails from `theta_init` is refitted from the nearest converged candidate;
/// when none converges, every candidate is retried from `pilot_theta`.
/// Converged candidates take precedence over the rest.
inline KSelection select_K(const LongitudinalDataset& data, const Theta& theta_init, const WorkingCovSpec& spec,
                           const FitConfig& config, std::vector<int> candidates) {
  if (candidates.empty()) throw ConfigError("select_K: empty candidate set");
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  for (int K : candidates)
    if (K < 4) throw ConfigError("select_K: every candidate must be >= 4");
  KSelection sel;
  sel.candidates = candidates;
  const std::size_t nc = candidates.size();
  std::vector<std::optional<FitResult>> fits(nc);
  std::string last_error;
  auto attempt = [&](std::size_t c, const Theta& start) -> std::optional<FitResult> {
    try {
      ProfileProblem problem(data, Sieve::cubic_bspline(candidates[c]), spec, config);
      return fit(problem, start);
    } catch (const Error& e) {
      last_error = e.what();
      return std::nullopt;
    }
  };
  for (std::size_t c = 0; c < nc; ++c) fits[c] = attempt(c, theta_init);
  auto converged = [&](std::size_t c) { return fits[c] && fits[c]->converged; };
  auto retry_from = [&](std::size_t c, const Theta& start) {
    auto retry = attempt(c, start);
    if (retry && (retry->converged || !fits[c])) fits[c] = std::move(retry);
  };
  auto borrow = [&]() {
    for (std::size_t c = 0; c < nc; ++c) {
      if (converged(c)) continue;
      std::optional<std::size_t> donor;
      for (std::size_t o = 0; o < nc; ++o)
        if (converged(o) &&
            (!donor || std::abs(candidates[o] - candidates[c]) < std::abs(candidates[*donor] - candidates[c])))
          donor = o;
      if (donor) retry_from(c, fits[*donor]->theta_hat);
    }
  };
  borrow();
  bool none = true;
  for (std::size_t c = 0; c < nc; ++c) none = none && !converged(c);
  if (none) {
    const Theta pilot = pilot_theta(data, theta_init, spec, config, candidates.front());
    if (pilot.as_vector() != theta_init.as_vector()) {
      for (std::size_t c = 0; c < nc && none; ++c) {
        retry_from(c, pilot);
        none = !converged(c);
      }
      borrow();
    }
  }
  const double logN = std::log(static_cast<double>(data.total_obs()));
  bool any_converged = false;
  for (std::size_t c = 0; c < nc; ++c) {
    sel.bic.push_back(fits[c] ? fits[c]->deviance + candidates[c] * logN : std::numeric_limits<double>::infinity());
    any_converged = any_converged || converged(c);
  }
  std::optional<std::size_t> pick;
  for (std::size_t c = 0; c < nc; ++c)
    if (fits[c] && (converged(c) || !any_converged) && (!pick || sel.bic[c] < sel.bic[*pick])) pick = c;
  const bool have = pick.has_value();
  if (have) {
    sel.K = candidates[*pick];
    sel.fit = std::move(*fits[*pick]);
  }
  if (!have) throw ConfigError("select_K: every candidate failed (" + last_error + ")");
  return sel;
}

}  // namespace gplsim

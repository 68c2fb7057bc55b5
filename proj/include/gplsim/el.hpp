#pragma once

// Empirical likelihood over estimating-function blocks: the Lagrange
// multiplier solver, the log-EL ratio, and profile intervals for one
// component of theta.

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gplsim/errors.hpp"
#include "gplsim/model.hpp"
#include "gplsim/profile.hpp"
#include "gplsim/working_cov.hpp"

namespace gplsim {

struct LambdaSolution {
  VectorXd lambda;
  bool feasible = false;
  int iterations = 0;
};

struct ELResult {
  VectorXd lambda;
  double ell = std::numeric_limits<double>::infinity();
  VectorXd weights;
  MatrixXd S_n;
  bool feasible = false;
  std::string reason;  // why the statistic is infeasible, if it is
};

inline double chi2_quantile(double level, double dof) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0,1)");
  return boost::math::quantile(boost::math::chi_squared(dof), level);
}

/// Maximizes F(lambda) = sum log(1 + lambda' g_i) by damped Newton ascent,
/// keeping 1 + lambda' g_i > 1/n. Rows of `g` are the units. Columns are
/// rescaled internally, which leaves lambda' g_i unchanged.
inline LambdaSolution solve_lambda(const MatrixXd& g, int max_iter = 100) {
  const Eigen::Index n = g.rows();
  const Eigen::Index d = g.cols();
  LambdaSolution out;
  out.lambda = VectorXd::Zero(d);
  if (n == 0) return out;
  VectorXd scale = (g.colwise().squaredNorm() / static_cast<double>(n)).transpose().cwiseSqrt();
  for (Eigen::Index k = 0; k < d; ++k)
    if (!(scale(k) > 0.0)) scale(k) = 1.0;
  const MatrixXd gs = g * scale.cwiseInverse().asDiagonal();
  const double floor = 1.0 / static_cast<double>(n);
  const double tol = 1e-11 * static_cast<double>(n);

  auto objective = [&](const VectorXd& lam, double& F) {
    const VectorXd w = VectorXd::Ones(n) + gs * lam;
    if (!(w.minCoeff() > floor)) return false;
    F = w.array().log().sum();
    return true;
  };

  VectorXd lam = VectorXd::Zero(d);
  double F = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it;
    const VectorXd w = VectorXd::Ones(n) + gs * lam;
    const VectorXd winv = w.cwiseInverse();
    const VectorXd grad = gs.transpose() * winv;
    if (grad.cwiseAbs().maxCoeff() <= tol) {
      out.feasible = true;
      out.lambda = lam.cwiseQuotient(scale);
      return out;
    }
    const MatrixXd Wg = winv.asDiagonal() * gs;
    const MatrixXd H = Wg.transpose() * Wg;
    Eigen::LDLT<MatrixXd> ldlt(H);
    VectorXd dir = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !dir.allFinite() || grad.dot(dir) <= 0.0) dir = grad;
    double t = 1.0;
    bool accepted = false;
    const double slope = grad.dot(dir);
    // Near the optimum the Armijo test drowns in round-off of F; a full
    // feasible Newton step is then taken as is.
    const bool polish = slope < 1e-12 * static_cast<double>(n);
    for (int h = 0; h < 60; ++h, t *= 0.5) {
      const VectorXd trial = lam + t * dir;
      double Ft = 0.0;
      if (objective(trial, Ft) && (polish || Ft >= F + 1e-4 * t * slope)) {
        lam = trial;
        F = Ft;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // A stalled line search with a tiny gradient is round-off, not infeasibility.
      out.feasible = grad.cwiseAbs().maxCoeff() <= 1e3 * tol;
      out.lambda = lam.cwiseQuotient(scale);
      return out;
    }
    if (lam.cwiseQuotient(scale).norm() > 1e8) {
      out.lambda = lam.cwiseQuotient(scale);
      return out;
    }
  }
  const VectorXd grad = gs.transpose() * (VectorXd::Ones(n) + gs * lam).cwiseInverse();
  out.lambda = lam.cwiseQuotient(scale);
  out.feasible = grad.cwiseAbs().maxCoeff() <= 1e3 * tol;
  return out;
}

/// log-EL ratio 2 sum log(1 + lambda' g_i), with +inf when the origin is
/// outside the convex hull of the g_i.
inline ELResult ell_at(const MatrixXd& g) {
  const Eigen::Index n = g.rows();
  ELResult res;
  res.S_n = n > 0 ? MatrixXd(g.transpose() * g / static_cast<double>(n)) : MatrixXd();
  const LambdaSolution sol = solve_lambda(g);
  res.lambda = sol.lambda;
  res.feasible = sol.feasible;
  if (!sol.feasible) {
    res.reason = "origin outside the convex hull of the estimating functions";
    res.ell = std::numeric_limits<double>::infinity();
    res.weights = VectorXd::Zero(n);
    return res;
  }
  const VectorXd w = VectorXd::Ones(n) + g * sol.lambda;
  res.ell = 2.0 * w.array().log().sum();
  if (res.ell < 0.0) res.ell = 0.0;
  res.weights = (w * static_cast<double>(n)).cwiseInverse();
  return res;
}

/// n gbar' S_n^{-1} gbar.
inline double quadratic_form(const MatrixXd& g) {
  const double n = static_cast<double>(g.rows());
  const VectorXd gbar = g.colwise().mean().transpose();
  const MatrixXd S = g.transpose() * g / n;
  return n * gbar.dot(S.ldlt().solve(gbar));
}

/// Units entering the likelihood: whole subjects (block EL) or single
/// observations treated as independent (naive EL).
enum class ELUnits { block, observation };

/// Estimating functions per unit at a profile point, plus the Fisher
/// approximation of each unit's Jacobian -d g_u / d theta.
struct UnitScores {
  MatrixXd g;
  std::vector<MatrixXd> info;
};

inline UnitScores unit_scores(const ProfilePoint& pt, const LongitudinalDataset& data, const WorkingCovSpec& base,
                              ELUnits units, bool with_info = true) {
  WorkingCovSpec spec = base;
  spec.rho = pt.rho;
  spec.dispersion = pt.dispersion;
  UnitScores out;
  const Eigen::Index d = pt.theta.size();
  if (units == ELUnits::block) {
    out.g = pt.g;
    if (with_info) {
      out.info.resize(data.n());
      CovFactorCache factors(spec);
      for (std::size_t i = 0; i < data.n(); ++i) {
        const CovFactor& V = factors.get(pt.mu[i]);
        const MatrixXd W = V.whiten(pt.G[i]);
        out.info[i] = W.transpose() * W;
      }
    }
    return out;
  }
  out.g.resize(data.total_obs(), d);
  if (with_info) out.info.resize(data.total_obs());
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (Eigen::Index j = 0; j < pt.mu[i].size(); ++j, ++r) {
      const double v = spec.family.variance(pt.mu[i](j));
      const VectorXd Gj = pt.G[i].row(j).transpose();
      out.g.row(r) = (Gj * ((data[i].y(j) - pt.mu[i](j)) / v)).transpose();
      if (with_info) out.info[r] = Gj * Gj.transpose() / v;
    }
  }
  return out;
}

/// Re-profiles gamma (and rho) at the candidate theta, then evaluates the
/// log-EL ratio. Profile failures come back as an infeasible result.
inline ELResult bel_statistic(const ProfileProblem& problem, const Theta& theta, ELUnits units = ELUnits::block,
                              const VectorXd* warm_gamma = nullptr) {
  try {
    const ProfilePoint pt = problem.evaluate(theta.as_vector(), warm_gamma, true);
    return ell_at(unit_scores(pt, problem.data(), problem.spec(), units, false).g);
  } catch (const Error& e) {
    ELResult res;
    res.reason = e.kind() + ": " + e.what();
    return res;
  }
}

/// One coordinate of theta, or of alpha (alpha_k = phi_{k-1} for k >= 2).
/// Indices are 1-based, as in the output tables.
struct Component {
  enum class Kind { beta, phi, alpha };
  Kind kind = Kind::beta;
  int index = 1;

  static Component beta(int k) { return {Kind::beta, k}; }
  static Component phi(int k) { return {Kind::phi, k}; }
  static Component alpha(int k) { return {Kind::alpha, k}; }

  std::string name() const {
    switch (kind) {
      case Kind::beta: return "beta" + std::to_string(index);
      case Kind::phi: return "phi" + std::to_string(index);
      case Kind::alpha: return "alpha" + std::to_string(index);
    }
    return "?";
  }

  static Component parse(const std::string& s) {
    auto num = [&](std::size_t skip) {
      try {
        return std::stoi(s.substr(skip));
      } catch (...) {
        throw ConfigError("bad component '" + s + "'");
      }
    };
    if (s.rfind("beta", 0) == 0) return beta(num(4));
    if (s.rfind("phi", 0) == 0) return phi(num(3));
    if (s.rfind("alpha", 0) == 0) return alpha(num(5));
    throw ConfigError("bad component '" + s + "'");
  }

  /// Position in the stacked theta; throws for alpha_1, which is not a free
  /// coordinate.
  Eigen::Index theta_index(Eigen::Index p, Eigen::Index q) const {
    Eigen::Index k = -1;
    switch (kind) {
      case Kind::beta: k = index - 1; if (index < 1 || index > p) k = -1; break;
      case Kind::phi: k = (index >= 1 && index <= q - 1) ? p + index - 1 : -1; break;
      case Kind::alpha:
        if (index == 1) throw ConfigError("alpha1 is determined by the other alpha coordinates; use the Wald interval");
        k = (index >= 2 && index <= q) ? p + index - 2 : -1;
        break;
    }
    if (k < 0) throw ConfigError("component " + name() + " out of range");
    return k;
  }
};

struct ProfileCIOptions {
  double level = 0.95;
  double step_fraction = 0.25;  // bracketing step in units of se0
  double max_multiple = 10.0;   // bracket search limit in units of se0
  double ell_tol = 5e-4;        // |ell_prof - crit| at returned endpoints
  double t_tol = 1e-10;         // give up refining below this bracket width
  int max_probe_iter = 30;
  int max_refine = 60;
};

struct ProfileCI {
  Component component;
  double estimate = 0.0;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool lo_bounded = false;
  bool hi_bounded = false;
  double ell_lo = std::numeric_limits<double>::quiet_NaN();  // ell_prof at the endpoints
  double ell_hi = std::numeric_limits<double>::quiet_NaN();
  int probes = 0;

  bool bounded() const { return lo_bounded && hi_bounded; }
  double length() const { return hi - lo; }
};

/// ell minimized over all coordinates of theta except `k`, which is held at
/// `t`. The free coordinates start at (and are returned in) `free_theta`.
class ProfileEL {
 public:
  ProfileEL(const ProfileProblem& problem, ELUnits units, Eigen::Index k, int max_iter = 30)
      : problem_(&problem), units_(units), k_(k), max_iter_(max_iter) {}

  struct Probe {
    double ell = std::numeric_limits<double>::infinity();
    bool feasible = false;
    VectorXd theta;
    VectorXd gamma;
  };

  Probe minimize(double t, const VectorXd& start_theta, const VectorXd* warm_gamma) const {
    const Eigen::Index p = problem_->data().p();
    const Eigen::Index d = start_theta.size();
    Probe best;
    VectorXd theta = start_theta;
    theta(k_) = t;
    if (!admissible(theta, p)) return best;
    shrink_free_phi(theta, p);
    std::optional<Eval> cur = evaluate(theta, warm_gamma);
    if (!cur) return best;
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < d; ++j)
      if (j != k_) free.push_back(j);
    const Eigen::Index f = static_cast<Eigen::Index>(free.size());
    for (int it = 0; it < max_iter_ && f > 0; ++it) {
      // Gauss-Newton step for the quadratic approximation of ell, with the
      // EL-weighted gradient when the statistic is finite.
      const MatrixXd& g = cur->scores.g;
      const Eigen::Index n = g.rows();
      MatrixXd J = MatrixXd::Zero(d, d);
      for (const auto& I : cur->scores.info) J -= I;
      J /= static_cast<double>(n);
      const VectorXd gbar = g.colwise().mean().transpose();
      const MatrixXd S = g.transpose() * g / static_cast<double>(n);
      Eigen::LDLT<MatrixXd> Sldlt(S);
      MatrixXd Jf(d, f);
      for (Eigen::Index c = 0; c < f; ++c) Jf.col(c) = J.col(free[c]);
      const MatrixXd SinvJ = Sldlt.solve(Jf);
      const MatrixXd Hq = 2.0 * static_cast<double>(n) * Jf.transpose() * SinvJ;
      VectorXd grad;
      if (cur->el.feasible) {
        // d ell / d theta_c = 2 sum_u lambda' (d g_u / d theta_c) / w_u
        grad = VectorXd::Zero(f);
        const VectorXd w = VectorXd::Ones(n) + g * cur->el.lambda;
        for (Eigen::Index u = 0; u < n; ++u) {
          const VectorXd Il = cur->scores.info[u] * cur->el.lambda;
          for (Eigen::Index c = 0; c < f; ++c) grad(c) -= 2.0 * Il(free[c]) / w(u);
        }
      } else {
        grad = 2.0 * static_cast<double>(n) * SinvJ.transpose() * gbar;
      }
      Eigen::LDLT<MatrixXd> Hldlt(Hq);
      VectorXd step = -Hldlt.solve(grad);
      if (!step.allFinite()) break;
      if (cur->el.feasible && -0.5 * grad.dot(step) < 1e-7) break;
      const double merit0 = cur->merit();
      bool accepted = false;
      double s = 1.0;
      for (int h = 0; h < 12; ++h, s *= 0.5) {
        VectorXd trial = cur->theta;
        for (Eigen::Index c = 0; c < f; ++c) trial(free[c]) += s * step(c);
        shrink_free_phi(trial, p);
        const VectorXd warm = cur->point_gamma;
        std::optional<Eval> cand = evaluate(trial, &warm);
        if (cand && cand->merit() < merit0) {
          cur = std::move(cand);
          accepted = true;
          break;
        }
      }
      if (!accepted) break;
      if (merit0 - cur->merit() <= 1e-9 * (1.0 + std::abs(cur->merit()))) break;
    }
    best.ell = cur->el.feasible ? cur->el.ell : std::numeric_limits<double>::infinity();
    best.feasible = cur->el.feasible;
    best.theta = cur->theta;
    best.gamma = cur->point_gamma;
    return best;
  }

 private:
  struct Eval {
    VectorXd theta;
    VectorXd point_gamma;
    UnitScores scores;
    ELResult el;
    double q = 0.0;
    double merit() const { return el.feasible ? el.ell : 1e10 + q; }
  };

  std::optional<Eval> evaluate(const VectorXd& theta, const VectorXd* warm) const {
    try {
      const ProfilePoint pt = problem_->evaluate(theta, warm, true);
      Eval e;
      e.theta = theta;
      e.point_gamma = pt.sieve.gamma();
      e.scores = unit_scores(pt, problem_->data(), problem_->spec(), units_, true);
      e.el = ell_at(e.scores.g);
      e.q = quadratic_form(e.scores.g);
      if (!std::isfinite(e.q)) e.q = 1e300;
      return e;
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  bool admissible(const VectorXd& theta, Eigen::Index p) const {
    if (k_ < p) return true;
    return std::abs(theta(k_)) < kPhiRadius;
  }

  // Keeps ||phi|| <= kPhiRadius by scaling only the free phi coordinates.
  void shrink_free_phi(VectorXd& theta, Eigen::Index p) const {
    const Eigen::Index nphi = theta.size() - p;
    if (nphi == 0) return;
    if (k_ < p) {
      project_phi(theta, p);
      return;
    }
    const double fixed2 = theta(k_) * theta(k_);
    double free2 = theta.tail(nphi).squaredNorm() - fixed2;
    const double room = kPhiRadius * kPhiRadius - fixed2;
    if (free2 > room && free2 > 0.0) {
      const double c = std::sqrt(std::max(room, 0.0) / free2);
      for (Eigen::Index j = p; j < theta.size(); ++j)
        if (j != k_) theta(j) *= c;
    }
  }

  const ProfileProblem* problem_;
  ELUnits units_;
  Eigen::Index k_;
  int max_iter_;
};

/// Fisher-bread sandwich standard errors, used as a scale hint when no
/// Wald fit is at hand.
inline VectorXd fisher_sandwich_se(const FitResult& fit) {
  const MatrixXd& g = fit.per_subject_g;
  const MatrixXd meat = g.transpose() * g;
  const Eigen::LDLT<MatrixXd> ldlt(fit.info);
  const MatrixXd A = ldlt.solve(meat);
  const MatrixXd cov = ldlt.solve(A.transpose());
  return cov.diagonal().cwiseMax(0.0).cwiseSqrt();
}

/// Profile EL interval {t : min_{other coords} ell <= chi2_1(level)} by
/// outward bracketing from the fitted value and Illinois refinement.
/// `fit` must come from `problem`; se0 sets the bracketing scale.
inline ProfileCI profile_ci(const ProfileProblem& problem, const FitResult& fit, Component comp, double se0,
                            ELUnits units = ELUnits::block, const ProfileCIOptions& opt = {}) {
  const LongitudinalDataset& data = problem.data();
  const Eigen::Index k = comp.theta_index(data.p(), data.q());
  if (!(se0 > 0.0) || !std::isfinite(se0)) throw ConfigError("profile_ci: se0 must be positive and finite");
  const double crit = chi2_quantile(opt.level, 1.0);
  const VectorXd theta_hat = fit.theta_hat.as_vector();
  const ProfileEL prof(problem, units, k, opt.max_probe_iter);

  ProfileCI ci;
  ci.component = comp;
  ci.estimate = theta_hat(k);

  for (int side : {-1, +1}) {
    VectorXd start = theta_hat;
    VectorXd warm = fit.sieve_hat.gamma();
    double t_in = theta_hat(k);
    double f_in = -crit;  // ell_prof(theta_hat) - crit, ell assumed ~0 there
    std::optional<ProfileEL::Probe> out_probe;
    double t_out = 0.0;
    const double step = opt.step_fraction * se0;
    const int max_steps = static_cast<int>(std::ceil(opt.max_multiple / opt.step_fraction));
    for (int s = 1; s <= max_steps; ++s) {
      const double t = theta_hat(k) + side * s * step;
      ProfileEL::Probe pr = prof.minimize(t, start, &warm);
      ++ci.probes;
      const double f = pr.ell - crit;
      if (f > 0.0) {
        t_out = t;
        out_probe = std::move(pr);
        break;
      }
      t_in = t;
      f_in = f;
      start = pr.theta;
      warm = pr.gamma;
    }
    if (!out_probe) continue;  // unbounded on this side

    // Illinois regula falsi on (t_in, t_out); bisection while the outer value
    // is infinite. wi/wo are the possibly halved interpolation weights.
    double f_out = out_probe->ell - crit;
    double wi = f_in, wo = f_out;
    int last_side = 0;
    double t_best = t_in;
    double ell_end = f_in + crit;
    for (int r = 0; r < opt.max_refine; ++r) {
      if (std::abs(f_in) <= opt.ell_tol) { t_best = t_in; ell_end = f_in + crit; break; }
      if (std::abs(f_out) <= opt.ell_tol) { t_best = t_out; ell_end = f_out + crit; break; }
      t_best = std::abs(f_in) <= std::abs(f_out) ? t_in : t_out;
      ell_end = (std::abs(f_in) <= std::abs(f_out) ? f_in : f_out) + crit;
      if (std::abs(t_out - t_in) <= opt.t_tol) break;
      double t = 0.5 * (t_in + t_out);
      if (std::isfinite(wo)) {
        const double rf = t_in - wi * (t_out - t_in) / (wo - wi);
        const double lo_t = std::min(t_in, t_out), hi_t = std::max(t_in, t_out);
        const double margin = 1e-3 * (hi_t - lo_t);
        if (rf > lo_t + margin && rf < hi_t - margin) t = rf;
      }
      ProfileEL::Probe pr = prof.minimize(t, start, &warm);
      ++ci.probes;
      const double f = pr.ell - crit;
      if (f > 0.0) {
        t_out = t;
        f_out = wo = f;
        if (last_side == +1) wi *= 0.5;
        last_side = +1;
      } else {
        t_in = t;
        f_in = wi = f;
        start = pr.theta;
        warm = pr.gamma;
        if (last_side == -1 && std::isfinite(wo)) wo *= 0.5;
        last_side = -1;
      }
      t_best = std::abs(f_in) <= std::abs(f_out) ? t_in : t_out;
      ell_end = (std::abs(f_in) <= std::abs(f_out) ? f_in : f_out) + crit;
    }
    if (side < 0) {
      ci.lo = t_best;
      ci.lo_bounded = true;
      ci.ell_lo = ell_end;
    } else {
      ci.hi = t_best;
      ci.hi_bounded = true;
      ci.ell_hi = ell_end;
    }
  }
  return ci;
}

}  // namespace gplsim

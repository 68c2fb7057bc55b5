#pragma once

// Simulation designs, replication generator, accuracy metrics and the
// replication driver that aggregates them per design cell and method.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gplsim/bootstrap.hpp"
#include "gplsim/competitors.hpp"
#include "gplsim/el.hpp"
#include "gplsim/errors.hpp"
#include "gplsim/parallel.hpp"
#include "gplsim/profile.hpp"

namespace gplsim {

struct SimDesign {
  int n = 100;
  int m = 5;
  OutcomeFamily family{};
  double rho_latent = 0.0;
  double kappa = 0.0;
  double sigma_b = 0.6;
  double sigma_eps = 1.0;
  VectorXd beta0 = (VectorXd(3) << 1.0, -1.0, 0.5).finished();
  VectorXd alpha0 = VectorXd::Constant(3, 1.0 / std::sqrt(3.0));
  bool heavy_tails = false;   // scaled t5 covariates instead of Gaussian
  bool allow_override = false;
  std::uint64_t seed = 20240607;

  void validate() const {
    if (n < 2 || m < 1) throw ConfigError("SimDesign: need n >= 2 and m >= 1");
    if (std::abs(alpha0.norm() - 1.0) > 1e-12 || !(alpha0(0) > 0.0))
      throw ConfigError("SimDesign: alpha0 must be unit norm with a positive first entry");
    if (!(std::abs(rho_latent) < 1.0) || !(std::abs(kappa) < 1.0))
      throw ConfigError("SimDesign: rho and kappa must lie in (-1,1)");
    if (allow_override) return;
    const bool n_ok = n == 100 || n == 200;
    const bool rho_ok = rho_latent == 0.0 || rho_latent == 0.3 || rho_latent == 0.6;
    const bool kappa_ok = kappa == 0.0 || kappa == 0.3;
    if (!n_ok || m != 5 || !rho_ok || !kappa_ok || sigma_b != 0.6 || sigma_eps != 1.0)
      throw ConfigError("SimDesign: value outside the design grid (set allow_override to use it)");
  }

  Theta theta0() const { return Theta(beta0, phi_from_alpha(alpha0)); }
};

inline double eta0(double t) { return std::sin(2.0 * std::numbers::pi * t); }

struct SimReplication {
  LongitudinalDataset data;
  Theta theta0;
  double u_lo = 0.0;  // truth's own min-max rescaling of the index
  double u_hi = 1.0;
};

/// Toeplitz kappa^{|k-l|} correlation of size k.
inline MatrixXd toeplitz_corr(Eigen::Index k, double kappa) {
  MatrixXd C(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) C(a, b) = std::pow(kappa, static_cast<double>(std::abs(a - b)));
  return C;
}

inline SimReplication generate_replication(const SimDesign& design, std::uint64_t rep) {
  design.validate();
  const Eigen::Index p = design.beta0.size();
  const Eigen::Index q = design.alpha0.size();
  const int n = design.n, m = design.m;
  std::mt19937_64 rng(derive_seed(design.seed, rep, 0x5151));
  std::normal_distribution<double> N01(0.0, 1.0);
  std::chi_squared_distribution<double> chi5(5.0);

  const MatrixXd Lw = toeplitz_corr(p + q, design.kappa).llt().matrixL();
  const MatrixXd Lb = toeplitz_corr(m, design.rho_latent).llt().matrixL();

  std::vector<SubjectBlock> subjects(n);
  std::vector<VectorXd> u0(n);
  for (int i = 0; i < n; ++i) {
    SubjectBlock& s = subjects[i];
    s.id = "s" + std::to_string(i + 1);
    s.X.resize(m, p);
    s.Z.resize(m, q);
    for (int j = 0; j < m; ++j) {
      VectorXd e(p + q);
      for (Eigen::Index k = 0; k < p + q; ++k) e(k) = N01(rng);
      VectorXd w = Lw * e;
      if (design.heavy_tails) w *= std::sqrt(3.0 / 5.0) / std::sqrt(chi5(rng) / 5.0);
      s.X.row(j) = w.head(p).transpose();
      s.Z.row(j) = w.tail(q).transpose();
    }
    u0[i] = s.Z * design.alpha0;
  }
  double lo = u0[0].minCoeff(), hi = u0[0].maxCoeff();
  for (const auto& u : u0) {
    lo = std::min(lo, u.minCoeff());
    hi = std::max(hi, u.maxCoeff());
  }
  const OutcomeFamily fam = design.family;
  for (int i = 0; i < n; ++i) {
    SubjectBlock& s = subjects[i];
    VectorXd e(m);
    for (int j = 0; j < m; ++j) e(j) = N01(rng);
    const VectorXd b = design.sigma_b * (Lb * e);
    s.y.resize(m);
    for (int j = 0; j < m; ++j) {
      const double xi = s.X.row(j).dot(design.beta0) + eta0((u0[i](j) - lo) / (hi - lo)) + b(j);
      switch (fam.tag()) {
        case FamilyTag::gaussian: s.y(j) = xi + design.sigma_eps * N01(rng); break;
        case FamilyTag::bernoulli: {
          std::bernoulli_distribution draw(fam.inverse_link(xi));
          s.y(j) = draw(rng) ? 1.0 : 0.0;
          break;
        }
        case FamilyTag::poisson: {
          std::poisson_distribution<long long> draw(fam.inverse_link(xi));
          s.y(j) = static_cast<double>(draw(rng));
          break;
        }
      }
    }
  }
  return {LongitudinalDataset(std::move(subjects), p, q), design.theta0(), lo, hi};
}

/// arccos |a' b| for unit vectors, in [0, pi/2].
inline double angle_error(const VectorXd& alpha_hat, const VectorXd& alpha0) {
  if (alpha_hat.size() != alpha0.size()) throw DomainError("angle_error: length mismatch");
  return std::acos(std::min(1.0, std::abs(alpha_hat.dot(alpha0))));
}

/// Mean squared difference over a common grid.
inline double ise(const VectorXd& eta_hat, const VectorXd& eta_true) {
  if (eta_hat.size() != eta_true.size() || eta_hat.size() == 0) throw DomainError("ise: grid length mismatch");
  return (eta_hat - eta_true).squaredNorm() / static_cast<double>(eta_hat.size());
}

/// ISE of a fitted link against sin(2 pi t) on L points of [0,1], each
/// curve on its own rescaled index.
inline double ise_against_truth(const Sieve& sieve, int L = 200) {
  const VectorXd t = unit_grid(L);
  VectorXd fitted(L), truth(L);
  for (int l = 0; l < L; ++l) {
    fitted(l) = sieve.eval(sieve.unscale(t(l)));
    truth(l) = eta0(t(l));
  }
  return ise(fitted, truth);
}

enum class Method { profile_bel, naive_el, gee_wald, gee_poly };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::profile_bel: return "profile_bel";
    case Method::naive_el: return "naive_el";
    case Method::gee_wald: return "gee_wald";
    case Method::gee_poly: return "gee_poly";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::profile_bel, Method::naive_el, Method::gee_wald, Method::gee_poly})
    if (method_name(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> v{Method::profile_bel, Method::naive_el, Method::gee_wald, Method::gee_poly};
  return v;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool lo_bounded = true;
  bool hi_bounded = true;
  bool bounded() const { return lo_bounded && hi_bounded; }
  bool covers(double x) const { return (!lo_bounded || lo <= x) && (!hi_bounded || x <= hi); }
  double length() const { return hi - lo; }
};

inline Interval to_interval(const ProfileCI& ci) { return {ci.lo, ci.hi, ci.lo_bounded, ci.hi_bounded}; }
inline Interval to_interval(const WaldInterval& w) { return {w.lo, w.hi, true, true}; }

struct MethodOutcome {
  bool ok = false;
  std::string error;
  VectorXd beta;
  VectorXd alpha;
  double angle = 0.0;
  double ise = 0.0;
  int K = 0;
  double rho_hat = 0.0;
  std::map<std::string, Interval> ci;  // keyed by component name
  std::map<std::string, std::string> ci_error;
};

struct StudyOptions {
  CorrFamily working_corr = CorrFamily::ar1;
  std::vector<Method> methods = all_methods();
  std::vector<std::string> ci_targets{"beta1", "beta2", "alpha2"};
  bool with_ci = true;
  double level = 0.95;
  std::vector<int> K_candidates{6, 8, 10, 12};
  int poly_degree = 2;
  FitConfig config{};
  int B = 200;
  int ise_grid = 200;
  unsigned threads = 0;
};

namespace detail {

inline void record_fit(MethodOutcome& out, const FitResult& f, const SimReplication& rep, int ise_grid, int K) {
  out.beta = f.theta_hat.beta();
  out.alpha = f.alpha_hat.alpha;
  out.angle = angle_error(out.alpha, rep.theta0.alpha().alpha);
  out.ise = ise_against_truth(f.sieve_hat, ise_grid);
  out.K = K;
  out.rho_hat = f.rho_hat;
}

/// Sandwich-type scale for the bracketing step of a profile interval:
/// info^{-1} (sum_u g_u g_u') info^{-1} over the likelihood's units.
inline VectorXd unit_scale_se(const ProfileProblem& problem, const FitResult& f, ELUnits units) {
  const VectorXd theta = f.theta_hat.as_vector();
  const VectorXd warm = f.sieve_hat.gamma();
  const ProfilePoint pt = problem.evaluate(theta, &warm, true);
  const UnitScores us = unit_scores(pt, problem.data(), problem.spec(), units, true);
  MatrixXd info = MatrixXd::Zero(theta.size(), theta.size());
  for (const auto& I : us.info) info += I;
  const Eigen::LDLT<MatrixXd> ldlt(info);
  const MatrixXd A = ldlt.solve(MatrixXd(us.g.transpose() * us.g));
  const MatrixXd cov = ldlt.solve(A.transpose());
  return cov.diagonal().cwiseMax(1e-300).cwiseSqrt();
}

inline void profile_intervals(MethodOutcome& out, const ProfileProblem& problem, const FitResult& f, ELUnits units,
                              const std::vector<std::string>& targets, double level, const VectorXd* se_hint) {
  const VectorXd se = se_hint ? *se_hint : unit_scale_se(problem, f, units);
  ProfileCIOptions opt;
  opt.level = level;
  opt.max_probe_iter = 30;
  for (const auto& name : targets) {
    try {
      const Component c = Component::parse(name);
      const Eigen::Index k = c.theta_index(problem.data().p(), problem.data().q());
      out.ci[name] = to_interval(profile_ci(problem, f, c, se(k), units, opt));
    } catch (const Error& e) {
      out.ci_error[name] = e.what();
    }
  }
}

}  // namespace detail

/// Every requested method on one dataset. Profile BEL and GEE-Wald share the
/// fit under the working correlation; naive EL uses its own independence
/// fit (K selected under independence); GEE-Poly fits the quadratic link.
inline std::map<Method, MethodOutcome> analyze_replication(const SimReplication& rep, const WorkingCovSpec& spec,
                                                           const StudyOptions& opt) {
  std::map<Method, MethodOutcome> res;
  const LongitudinalDataset& data = rep.data;
  const Theta init = initial_theta(data, spec.family);
  auto wants = [&](Method m) { return std::find(opt.methods.begin(), opt.methods.end(), m) != opt.methods.end(); };

  std::optional<KSelection> main_sel;
  std::string main_err;
  if (wants(Method::profile_bel) || wants(Method::gee_wald)) {
    try {
      main_sel = select_K(data, init, spec, opt.config, opt.K_candidates);
    } catch (const Error& e) {
      main_err = e.what();
    }
  }
  auto main_problem = [&] { return ProfileProblem(data, Sieve::cubic_bspline(main_sel->K), spec, opt.config); };

  std::optional<WaldResult> wald;
  std::string wald_err;
  if (main_sel && main_sel->fit.converged && wants(Method::gee_wald)) {
    try {
      wald = wald_from_fit(main_problem(), main_sel->fit, opt.level);
    } catch (const Error& e) {
      wald_err = e.what();
    }
  }

  if (wants(Method::profile_bel)) {
    MethodOutcome& out = res[Method::profile_bel];
    if (!main_sel) out.error = main_err;
    else if (!main_sel->fit.converged) out.error = "not converged";
    else {
      out.ok = true;
      detail::record_fit(out, main_sel->fit, rep, opt.ise_grid, main_sel->K);
      if (opt.with_ci) {
        VectorXd se_hint;
        if (wald) {
          se_hint.resize(wald->theta_intervals.size());
          for (std::size_t k = 0; k < wald->theta_intervals.size(); ++k) se_hint(k) = wald->theta_intervals[k].se;
        }
        detail::profile_intervals(out, main_problem(), main_sel->fit, ELUnits::block, opt.ci_targets, opt.level,
                                  wald ? &se_hint : nullptr);
      }
    }
  }

  if (wants(Method::gee_wald)) {
    MethodOutcome& out = res[Method::gee_wald];
    if (!main_sel) out.error = main_err;
    else if (!main_sel->fit.converged) out.error = "not converged";
    else if (!wald) out.error = wald_err;
    else {
      out.ok = true;
      detail::record_fit(out, main_sel->fit, rep, opt.ise_grid, main_sel->K);
      if (opt.with_ci)
        for (const auto& name : opt.ci_targets) out.ci[name] = to_interval(wald->find(name));
    }
  }

  if (wants(Method::naive_el)) {
    MethodOutcome& out = res[Method::naive_el];
    try {
      WorkingCovSpec ind = spec;
      ind.corr = CorrFamily::independence;
      ind.rho = 0.0;
      KSelection sel = (spec.corr == CorrFamily::independence && main_sel)
                           ? *main_sel
                           : select_K(data, init, ind, opt.config, opt.K_candidates);
      if (!sel.fit.converged) throw NonConvergence("not converged");
      out.ok = true;
      detail::record_fit(out, sel.fit, rep, opt.ise_grid, sel.K);
      if (opt.with_ci) {
        const ProfileProblem prob(data, Sieve::cubic_bspline(sel.K), ind, opt.config);
        detail::profile_intervals(out, prob, sel.fit, ELUnits::observation, opt.ci_targets, opt.level, nullptr);
      }
    } catch (const Error& e) {
      out.ok = false;
      out.error = e.what();
    }
  }

  if (wants(Method::gee_poly)) {
    MethodOutcome& out = res[Method::gee_poly];
    try {
      const ProfileProblem prob = polynomial_problem(data, spec, opt.config, opt.poly_degree);
      FitResult f = fit(prob, init);
      if (!f.converged) throw NonConvergence("not converged");
      const int dim = f.sieve_hat.reported_dim();
      if (opt.with_ci) {
        const WaldResult w = wald_from_fit(prob, f, opt.level);
        for (const auto& name : opt.ci_targets) out.ci[name] = to_interval(w.find(name));
      }
      out.ok = true;
      detail::record_fit(out, f, rep, opt.ise_grid, dim);
    } catch (const Error& e) {
      out.ok = false;
      out.error = e.what();
    }
  }
  return res;
}

struct MetricRow {
  std::string family;
  int n = 0;
  double rho = 0.0;
  std::string working_corr;
  std::string method;
  std::string metric;
  double value = 0.0;
};

struct CellResult {
  SimDesign design;
  StudyOptions options;
  std::vector<std::map<Method, MethodOutcome>> reps;
  std::vector<MetricRow> rows;
  std::map<Method, bool> flagged;  // failure rate above 10%

  double metric(Method m, const std::string& name) const {
    for (const auto& r : rows)
      if (r.method == method_name(m) && r.metric == name) return r.value;
    throw ConfigError("metric " + name + " missing for " + method_name(m));
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Aggregates per-replication outcomes. Non-converged fits are excluded
/// from every accuracy and coverage metric; fail_rate reports them.
inline std::vector<MetricRow> summarize(const SimDesign& design, const StudyOptions& opt,
                                        const std::vector<std::map<Method, MethodOutcome>>& reps,
                                        std::map<Method, bool>* flagged = nullptr) {
  std::vector<MetricRow> rows;
  const Theta th0 = design.theta0();
  const VectorXd& a0 = design.alpha0;
  for (Method m : opt.methods) {
    auto add = [&](const std::string& metric, double value) {
      rows.push_back({std::string(design.family.name()), design.n, design.rho_latent,
                      std::string(corr_name(opt.working_corr)), method_name(m), metric, value});
    };
    std::vector<const MethodOutcome*> good;
    for (const auto& rep : reps) {
      auto it = rep.find(m);
      if (it != rep.end() && it->second.ok) good.push_back(&it->second);
    }
    const double fail_rate = reps.empty() ? 0.0 : 1.0 - static_cast<double>(good.size()) / reps.size();
    if (flagged) (*flagged)[m] = fail_rate > 0.10;
    const double G = static_cast<double>(good.size());
    auto bias_rmse = [&](const std::string& name, auto get, double truth) {
      double s = 0.0, s2 = 0.0;
      for (const auto* o : good) {
        const double e = get(*o) - truth;
        s += e;
        s2 += e * e;
      }
      add("bias_" + name, good.empty() ? std::numeric_limits<double>::quiet_NaN() : s / G);
      add("rmse_" + name, good.empty() ? std::numeric_limits<double>::quiet_NaN() : std::sqrt(s2 / G));
    };
    for (Eigen::Index k = 0; k < th0.beta().size(); ++k)
      bias_rmse("beta" + std::to_string(k + 1), [k](const MethodOutcome& o) { return o.beta(k); }, th0.beta()(k));
    for (Eigen::Index k = 1; k < a0.size(); ++k)
      bias_rmse("alpha" + std::to_string(k + 1), [k](const MethodOutcome& o) { return o.alpha(k); }, a0(k));
    double ang = 0.0, is = 0.0;
    std::vector<double> Ks;
    for (const auto* o : good) {
      ang += o->angle;
      is += o->ise;
      Ks.push_back(o->K);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    add("angle", good.empty() ? nan : ang / G);
    add("ise_mean", good.empty() ? nan : is / G);
    if (opt.with_ci) {
      for (const auto& name : opt.ci_targets) {
        const Component c = Component::parse(name);
        double truth = 0.0;
        if (c.kind == Component::Kind::beta) truth = th0.beta()(c.index - 1);
        else if (c.kind == Component::Kind::alpha) truth = a0(c.index - 1);
        else truth = th0.phi()(c.index - 1);
        double cov = 0.0, len = 0.0, nc = 0.0, nl = 0.0;
        for (const auto* o : good) {
          auto it = o->ci.find(name);
          if (it == o->ci.end()) continue;
          nc += 1.0;
          cov += it->second.covers(truth) ? 1.0 : 0.0;
          if (it->second.bounded()) {
            nl += 1.0;
            len += it->second.length();
          }
        }
        add("cover_" + name, nc > 0 ? cov / nc : nan);
        add("len_" + name, nl > 0 ? len / nl : nan);
      }
    }
    add("k_med", median(Ks));
    add("fail_rate", fail_rate);
  }
  return rows;
}

/// B replications of one design cell; replication r uses the substream
/// (design.seed, r) whatever the thread count.
inline CellResult run_cell(const SimDesign& design, const StudyOptions& opt) {
  design.validate();
  CellResult cell;
  cell.design = design;
  cell.options = opt;
  cell.reps.resize(opt.B);
  WorkingCovSpec spec;
  spec.corr = opt.working_corr;
  spec.family = design.family;
  parallel_for(
      static_cast<std::size_t>(opt.B),
      [&](std::size_t r) {
        const SimReplication rep = generate_replication(design, r);
        cell.reps[r] = analyze_replication(rep, spec, opt);
      },
      opt.threads);
  cell.rows = summarize(design, opt, cell.reps, &cell.flagged);
  return cell;
}

/// Cells over the cross product of the listed design values and working
/// correlations.
struct StudyGrid {
  std::vector<OutcomeFamily> families{OutcomeFamily(FamilyTag::gaussian)};
  std::vector<int> ns{100};
  std::vector<double> rhos{0.0};
  std::vector<CorrFamily> working{CorrFamily::ar1};
  double kappa = 0.0;
  bool heavy_tails = false;
  std::uint64_t seed = 20240607;
};

inline std::vector<CellResult> run_study(const StudyGrid& grid, const StudyOptions& base) {
  std::vector<CellResult> cells;
  for (const auto& fam : grid.families)
    for (int n : grid.ns)
      for (double rho : grid.rhos)
        for (CorrFamily wc : grid.working) {
          SimDesign d;
          d.family = fam;
          d.n = n;
          d.rho_latent = rho;
          d.kappa = grid.kappa;
          d.heavy_tails = grid.heavy_tails;
          d.seed = grid.seed;
          StudyOptions opt = base;
          opt.working_corr = wc;
          cells.push_back(run_cell(d, opt));
        }
  return cells;
}

}  // namespace gplsim

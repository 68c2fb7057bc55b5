#pragma once

// Subject-level bootstrap bands for the link function.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "gplsim/errors.hpp"
#include "gplsim/parallel.hpp"
#include "gplsim/profile.hpp"

namespace gplsim {

/// Linear-interpolation sample quantile (R type 7).
inline double empirical_quantile(std::vector<double> x, double prob) {
  if (x.empty()) throw DomainError("quantile of an empty sample");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * std::clamp(prob, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

struct BandOptions {
  int B_star = 200;
  double level = 0.95;
  int L = 200;
  std::uint64_t seed = 1;
  bool warm_start = true;
  unsigned threads = 0;
};

struct BandResult {
  VectorXd grid;     // rescaled index in [0,1]
  VectorXd u_raw;    // the same points on the original index scale
  VectorXd eta_hat;
  VectorXd lo;
  VectorXd hi;
  double sup_radius = 0.0;
  int B_star = 0;
  int failures = 0;
  std::vector<VectorXd> replicates;  // successful replicate curves
  std::vector<std::pair<double, double>> replicate_ranges;  // their raw index ranges; the curve is flat outside
};

/// eta-hat on L equally spaced points of the fit's index range.
inline VectorXd eta_on_grid(const Sieve& sieve, const VectorXd& u_raw) {
  VectorXd out(u_raw.size());
  for (Eigen::Index l = 0; l < u_raw.size(); ++l) out(l) = sieve.eval(u_raw(l));
  return out;
}

inline VectorXd unit_grid(int L) {
  if (L < 2) throw ConfigError("grid needs L >= 2");
  return VectorXd::LinSpaced(L, 0.0, 1.0);
}

/// Resamples whole subjects with replacement, refits each replicate with
/// the fitted K (warm-started at theta-hat unless disabled), and evaluates
/// the replicate link on the original fit's index grid. The pointwise band
/// takes raw percentiles; the simultaneous band is eta-hat +/- sup_radius,
/// widened if needed so that it contains the pointwise band.
inline BandResult cluster_bootstrap_band(const ProfileProblem& problem, const FitResult& fit,
                                         const BandOptions& opt = {}) {
  if (opt.B_star < 1) throw ConfigError("B_star must be >= 1");
  if (!(opt.level > 0.0 && opt.level < 1.0)) throw ConfigError("level must lie in (0,1)");
  const LongitudinalDataset& data = problem.data();
  const std::size_t n = data.n();
  BandResult out;
  out.B_star = opt.B_star;
  out.grid = unit_grid(opt.L);
  out.u_raw.resize(opt.L);
  for (int l = 0; l < opt.L; ++l) out.u_raw(l) = fit.sieve_hat.unscale(out.grid(l));
  out.eta_hat = eta_on_grid(fit.sieve_hat, out.u_raw);

  const Sieve proto = fit.sieve_hat;
  const Theta start = opt.warm_start ? fit.theta_hat : initial_theta(data, problem.spec().family);
  WorkingCovSpec spec = problem.spec();
  spec.rho = fit.rho_hat;

  std::vector<VectorXd> curves(opt.B_star);
  std::vector<std::pair<double, double>> ranges(opt.B_star);
  std::vector<char> ok(opt.B_star, 0);
  parallel_for(
      static_cast<std::size_t>(opt.B_star),
      [&](std::size_t b) {
        std::mt19937_64 rng(derive_seed(opt.seed, b, 0xB007));
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        std::vector<std::size_t> idx(n);
        for (auto& v : idx) v = pick(rng);
        const LongitudinalDataset boot = data.subset(idx, true);
        try {
          const ProfileProblem bp(boot, proto, spec, problem.config());
          const FitResult f = gplsim::fit(bp, start);
          if (!f.converged) return;
          curves[b] = eta_on_grid(f.sieve_hat, out.u_raw);
          ranges[b] = {f.sieve_hat.lo(), f.sieve_hat.hi()};
          ok[b] = 1;
        } catch (const Error&) {
        }
      },
      opt.threads);

  for (int b = 0; b < opt.B_star; ++b) {
    if (ok[b]) {
      out.replicates.push_back(std::move(curves[b]));
      out.replicate_ranges.push_back(ranges[b]);
    } else {
      ++out.failures;
    }
  }
  if (out.failures > 0.2 * opt.B_star)
    throw TooManyFailures(std::to_string(out.failures) + " of " + std::to_string(opt.B_star) +
                          " bootstrap refits failed");

  const double a = 1.0 - opt.level;
  const std::size_t R = out.replicates.size();
  out.lo.resize(opt.L);
  out.hi.resize(opt.L);
  std::vector<double> col(R);
  for (int l = 0; l < opt.L; ++l) {
    for (std::size_t r = 0; r < R; ++r) col[r] = out.replicates[r](l);
    out.lo(l) = empirical_quantile(col, a / 2.0);
    out.hi(l) = empirical_quantile(col, 1.0 - a / 2.0);
  }
  std::vector<double> sup(R);
  for (std::size_t r = 0; r < R; ++r) sup[r] = (out.replicates[r] - out.eta_hat).cwiseAbs().maxCoeff();
  out.sup_radius = empirical_quantile(sup, opt.level);
  const double reach = std::max((out.hi - out.eta_hat).maxCoeff(), (out.eta_hat - out.lo).maxCoeff());
  out.sup_radius = std::max(out.sup_radius, reach);
  return out;
}

}  // namespace gplsim

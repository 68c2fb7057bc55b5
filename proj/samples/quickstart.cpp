// Simulates one Gaussian dataset, fits it, and prints estimates, profile
// intervals and the Wald competitor.

#include <cstdio>

#include "gplsim/gplsim.hpp"

int main() {
  using namespace gplsim;
  SimDesign design;
  design.n = 100;
  const SimReplication rep = generate_replication(design, 0);

  WorkingCovSpec spec;
  spec.corr = CorrFamily::ar1;
  const KSelection sel = select_K(rep.data, initial_theta(rep.data, spec.family), spec, FitConfig{}, {6, 8, 10, 12});
  const FitResult& f = sel.fit;
  std::printf("K=%d converged=%d rho=%.4f ISE=%.4f angle=%.4f\n", sel.K, f.converged, f.rho_hat,
              ise_against_truth(f.sieve_hat), angle_error(f.alpha_hat.alpha, design.alpha0));

  const ProfileProblem problem(rep.data, Sieve::cubic_bspline(sel.K), spec, FitConfig{});
  const WaldResult wald = wald_from_fit(problem, f, 0.95);
  for (const char* name : {"beta1", "beta2", "beta3", "alpha2", "alpha3"}) {
    const Component c = Component::parse(name);
    const auto k = c.theta_index(rep.data.p(), rep.data.q());
    const ProfileCI ci = profile_ci(problem, f, c, wald.theta_intervals[k].se, ELUnits::block);
    const WaldInterval& w = wald.find(name);
    std::printf("%-7s est=% .4f  BEL [% .4f, % .4f]  Wald [% .4f, % .4f]\n", name, ci.estimate, ci.lo, ci.hi, w.lo, w.hi);
  }
  const double ell0 = bel_statistic(problem, rep.theta0, ELUnits::block).ell;
  std::printf("ell(theta0)=%.4f  chi2_5(0.95)=%.4f\n", ell0, chi2_quantile(0.95, 5));
}

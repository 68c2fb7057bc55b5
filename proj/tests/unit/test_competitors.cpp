#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gplsim/gplsim.hpp"
#include "oracles.hpp"

using namespace gplsim;

namespace {

SimReplication sim(int n, std::uint64_t rep, double rho = 0.0) {
  SimDesign d;
  d.n = n;
  d.rho_latent = rho;
  d.allow_override = true;
  return generate_replication(d, rep);
}

WorkingCovSpec spec_of(CorrFamily c) {
  WorkingCovSpec s;
  s.corr = c;
  return s;
}

}  // namespace

TEST(NaiveEL, IgnoresWorkingCorrelation) {
  const auto rep = sim(60, 1, 0.3);
  ELResult base;
  bool first = true;
  for (CorrFamily c : {CorrFamily::independence, CorrFamily::exchangeable, CorrFamily::ar1}) {
    WorkingCovSpec s = spec_of(c);
    s.rho = c == CorrFamily::independence ? 0.0 : 0.4;
    const ProfileProblem prob(rep.data, Sieve::cubic_bspline(6), s, FitConfig{});
    const ELResult r = naive_el(prob, rep.theta0);
    ASSERT_TRUE(r.feasible);
    if (first) {
      base = r;
      first = false;
      continue;
    }
    EXPECT_EQ(r.ell, base.ell);
    EXPECT_EQ(r.lambda, base.lambda);
  }
}

TEST(NaiveEL, UsesObservationUnits) {
  const auto rep = sim(30, 2);
  const ProfileProblem prob(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::ar1), FitConfig{});
  const ELResult r = naive_el(prob, rep.theta0);
  EXPECT_EQ(r.weights.size(), rep.data.total_obs());
}

TEST(NaiveEL, IntervalLengthComparableToBlockUnderIndependence) {
  const auto rep = sim(100, 3);
  const ProfileProblem prob(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::independence), FitConfig{});
  const FitResult f = fit(prob);
  ASSERT_TRUE(f.converged);
  const VectorXd se = fisher_sandwich_se(f);
  const ProfileCI block = profile_ci(prob, f, Component::beta(2), se(1), ELUnits::block);
  const ProfileCI naive = profile_ci(prob, f, Component::beta(2), se(1), ELUnits::observation);
  ASSERT_TRUE(block.bounded() && naive.bounded());
  const double ratio = naive.length() / block.length();
  EXPECT_GT(ratio, 0.5);
  EXPECT_LT(ratio, 2.0);
}

TEST(GeeWald, SharesPointEstimateWithFit) {
  const auto rep = sim(100, 4);
  const ProfileProblem prob(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::ar1), FitConfig{});
  const Theta init = initial_theta(rep.data, OutcomeFamily{});
  const FitResult f = fit(prob, init);
  const WaldResult w = gee_wald(prob, init, 0.95);
  EXPECT_LE((w.fit.theta_hat.as_vector() - f.theta_hat.as_vector()).cwiseAbs().maxCoeff(), 1e-10);
  for (const auto& iv : w.theta_intervals) {
    EXPECT_NEAR(iv.hi - iv.estimate, 1.96 * iv.se, 1e-14);
    EXPECT_NEAR(iv.estimate - iv.lo, 1.96 * iv.se, 1e-14);
  }
  const MatrixXd& C = w.sandwich.cov;
  EXPECT_LE((C - C.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GE(C.diagonal().minCoeff(), 0.0);
}

TEST(GeeWald, SandwichMatchesClusterRobustLeastSquares) {
  // With a degree-1 link basis and independence weights the estimator is
  // least squares on [X, 1, Z]; its theta covariance is the delta-method
  // image of the cluster-robust least-squares covariance.
  const auto data = oracles::linear_link_data(80, 4, 5);
  FitConfig cfg;
  cfg.tol_theta = 1e-12;
  const ProfileProblem prob = polynomial_problem(data, spec_of(CorrFamily::independence), cfg, 1);
  const FitResult f = fit(prob);
  ASSERT_TRUE(f.converged);
  const SandwichCov sw = sandwich_at(prob, f);

  const auto ls = oracles::cluster_robust_least_squares(data);
  const MatrixXd& oracle = ls.cov;
  EXPECT_LE((f.theta_hat.as_vector() - ls.theta).cwiseAbs().maxCoeff(), 1e-8);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      EXPECT_LE(std::abs(sw.cov(a, b) - oracle(a, b)), 1e-6 * std::sqrt(oracle(a, a) * oracle(b, b)))
          << a << "," << b;
}

TEST(GeeWald, CovarianceHalvesWhenSubjectsAreDuplicated) {
  const auto rep = sim(60, 6);
  std::vector<std::size_t> twice;
  for (std::size_t i = 0; i < rep.data.n(); ++i) twice.insert(twice.end(), {i, i});
  const auto doubled = rep.data.subset(twice, true);
  const ProfileProblem p1(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::ar1), FitConfig{});
  const ProfileProblem p2(doubled, Sieve::cubic_bspline(6), spec_of(CorrFamily::ar1), FitConfig{});
  const Theta init = initial_theta(rep.data, OutcomeFamily{});
  const WaldResult a = gee_wald(p1, init), b = gee_wald(p2, init);
  for (Eigen::Index k = 0; k < 5; ++k)
    EXPECT_NEAR(b.sandwich.cov(k, k) / a.sandwich.cov(k, k), 0.5, 0.025) << k;
}

TEST(GeeWald, StandardErrorsInvariantToSubjectOrder) {
  const auto rep = sim(60, 7);
  std::vector<std::size_t> rev(rep.data.n());
  for (std::size_t i = 0; i < rev.size(); ++i) rev[i] = rev.size() - 1 - i;
  const auto flipped = rep.data.subset(rev);
  const ProfileProblem p1(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::exchangeable), FitConfig{});
  const ProfileProblem p2(flipped, Sieve::cubic_bspline(6), spec_of(CorrFamily::exchangeable), FitConfig{});
  const Theta init = initial_theta(rep.data, OutcomeFamily{});
  const WaldResult a = gee_wald(p1, init), b = gee_wald(p2, init);
  for (std::size_t k = 0; k < a.theta_intervals.size(); ++k)
    EXPECT_NEAR(a.theta_intervals[k].se, b.theta_intervals[k].se, 1e-6 * a.theta_intervals[k].se);
}

TEST(GeeWald, AlphaOneByDeltaMethod) {
  const auto rep = sim(80, 8);
  const ProfileProblem prob(rep.data, Sieve::cubic_bspline(6), spec_of(CorrFamily::ar1), FitConfig{});
  const WaldResult w = gee_wald(prob, initial_theta(rep.data, OutcomeFamily{}));
  const VectorXd phi = w.fit.theta_hat.phi();
  const double a1 = std::sqrt(1.0 - phi.squaredNorm());
  const VectorXd grad = -phi / a1;
  const double var = grad.dot(w.sandwich.cov.bottomRightCorner(2, 2) * grad);
  const WaldInterval& iv = w.find("alpha1");
  EXPECT_NEAR(iv.estimate, a1, 1e-15);
  EXPECT_NEAR(iv.se, std::sqrt(var), 1e-15);
  EXPECT_EQ(w.find("alpha2").se, w.find("phi1").se);
  EXPECT_THROW(w.find("beta9"), ConfigError);
}

TEST(GeeWald, GeneralLevelUsesNormalQuantile) {
  EXPECT_EQ(normal_quantile(0.95), 1.96);
  EXPECT_NEAR(normal_quantile(0.90), 1.6448536269514722, 1e-12);
  EXPECT_THROW(normal_quantile(0.0), ConfigError);
}

TEST(GeeWald, CollinearCovariatesGiveSingularBread) {
  auto rep = sim(60, 9);
  std::vector<SubjectBlock> subj = rep.data.subjects();
  for (auto& s : subj) s.X.col(2) = s.X.col(1);
  const LongitudinalDataset data(std::move(subj), 3, 3);
  const ProfileProblem prob(data, Sieve::cubic_bspline(6), spec_of(CorrFamily::independence), FitConfig{});
  FitResult f;
  try {
    f = fit(prob);
  } catch (const Error&) {
    GTEST_SKIP() << "fit itself rejected the collinear design";
  }
  EXPECT_THROW(sandwich_at(prob, f), SingularBread);
}

TEST(GeePoly, RecoversQuadraticLinkWithoutNoise) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> N;
  const VectorXd beta = (VectorXd(3) << 1.0, -1.0, 0.5).finished();
  const VectorXd alpha = VectorXd::Constant(3, 1.0 / std::sqrt(3.0));
  std::vector<SubjectBlock> subj(50);
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 50; ++i) {
    auto& s = subj[i];
    s.id = "q" + std::to_string(i);
    s.X.resize(4, 3);
    s.Z.resize(4, 3);
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 3; ++k) {
        s.X(j, k) = N(rng);
        s.Z(j, k) = N(rng);
      }
    lo = std::min(lo, (s.Z * alpha).minCoeff());
    hi = std::max(hi, (s.Z * alpha).maxCoeff());
  }
  for (auto& s : subj) {
    const VectorXd t = ((s.Z * alpha).array() - lo) / (hi - lo);
    s.y = s.X * beta + (1.0 - 2.0 * t.array() + 3.0 * t.array().square()).matrix();
  }
  const LongitudinalDataset data(std::move(subj), 3, 3);
  const WaldResult w = gee_poly(data, spec_of(CorrFamily::ar1), FitConfig{}, initial_theta(data, OutcomeFamily{}));
  ASSERT_TRUE(w.fit.converged);
  VectorXd truth(5);
  truth << beta, alpha.tail(2);
  EXPECT_LE((w.fit.theta_hat.as_vector() - truth).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_EQ(w.fit.sieve_hat.reported_dim(), 2);
}

TEST(GeePoly, MisspecifiedLinkHasLargerIntegratedError) {
  double ise_poly = 0.0, ise_spline = 0.0;
  for (std::uint64_t r = 0; r < 4; ++r) {
    SimDesign d;
    d.n = 200;
    const auto rep = generate_replication(d, r);
    const WorkingCovSpec s = spec_of(CorrFamily::ar1);
    const Theta init = initial_theta(rep.data, OutcomeFamily{});
    const FitResult fp = fit(polynomial_problem(rep.data, s, FitConfig{}, 2), init);
    const FitResult fs = select_K(rep.data, init, s, FitConfig{}, {6, 8, 10, 12}).fit;
    ise_poly += ise_against_truth(fp.sieve_hat);
    ise_spline += ise_against_truth(fs.sieve_hat);
  }
  EXPECT_GE(ise_poly, 3.0 * ise_spline);
}

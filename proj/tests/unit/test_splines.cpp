#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "gplsim/gplsim.hpp"

using namespace gplsim;

namespace {

// Textbook Cox-de Boor recursion with the 0/0 := 0 convention; the last
// basis function is closed at the right end.
double cox_de_boor(const VectorXd& t, int j, int k, double x) {
  if (k == 1) {
    const bool last = x == t(t.size() - 1) && t(j) < t(j + 1) && t(j + 1) == t(t.size() - 1);
    return ((t(j) <= x && x < t(j + 1)) || last) ? 1.0 : 0.0;
  }
  double a = 0.0, b = 0.0;
  if (t(j + k - 1) > t(j)) a = (x - t(j)) / (t(j + k - 1) - t(j)) * cox_de_boor(t, j, k - 1, x);
  if (t(j + k) > t(j + 1)) b = (t(j + k) - x) / (t(j + k) - t(j + 1)) * cox_de_boor(t, j + 1, k - 1, x);
  return a + b;
}

VectorXd reference_row(const Sieve& s, double x) {
  VectorXd r(s.K());
  for (int j = 0; j < s.K(); ++j) r(j) = cox_de_boor(s.knots(), j, 4, x);
  return r;
}

}  // namespace

TEST(BasisRow, MatchesCoxDeBoorAtMidpointK6) {
  const Sieve s = Sieve::cubic_bspline(6);
  EXPECT_LE((s.basis_row(0.5) - reference_row(s, 0.5)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BasisRow, MatchesCoxDeBoorOnRandomPoints) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int K : {4, 6, 8, 10, 12}) {
    const Sieve s = Sieve::cubic_bspline(K);
    for (int r = 0; r < 300; ++r) {
      const double x = U(rng);
      EXPECT_LE((s.basis_row(x) - reference_row(s, x)).cwiseAbs().maxCoeff(), 1e-12) << "K=" << K << " x=" << x;
    }
    EXPECT_LE((s.basis_row(1.0) - reference_row(s, 1.0)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(BasisRow, PartitionOfUnityAndLocalSupport) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-3.0, 4.0);
  const Sieve s = Sieve::cubic_bspline(10, -2.0, 3.0);
  for (int r = 0; r < 10000; ++r) {
    const VectorXd row = s.basis_row(U(rng));
    EXPECT_NEAR(row.sum(), 1.0, 1e-12);
    EXPECT_GE(row.minCoeff(), 0.0);
    EXPECT_LE((row.array() != 0.0).count(), 4);
  }
}

TEST(BasisRow, LeftEndpointAndClamping) {
  const Sieve s = Sieve::cubic_bspline(8, 1.0, 2.0);
  VectorXd e0 = VectorXd::Zero(8);
  e0(0) = 1.0;
  EXPECT_EQ(s.basis_row(1.0), e0);
  EXPECT_EQ(s.basis_row(-10.0), e0);
  EXPECT_EQ(s.basis_row(7.0), s.basis_row(2.0));
  EXPECT_NEAR(s.basis_row(2.0)(7), 1.0, 1e-15);
}

TEST(BasisDerivRow, SumsToZeroAndMatchesFiniteDifferences) {
  const double lo = -1.5, hi = 2.5;
  const Sieve s = Sieve::cubic_bspline(12, lo, hi);
  for (int l = 1; l < 200; ++l) {
    const double u = lo + (hi - lo) * l / 200.0;
    const VectorXd d = s.basis_deriv_row(u);
    EXPECT_NEAR(d.sum(), 0.0, 1e-10);
    const double h = 1e-6;
    const VectorXd fd = (s.basis_row(u + h) - s.basis_row(u - h)) / (2 * h);
    EXPECT_LE((d - fd).cwiseAbs().maxCoeff(), 1e-5) << "u=" << u;
  }
}

TEST(BasisDerivRow, GrevilleCoefficientsReproduceLines) {
  const double lo = 0.5, hi = 3.0;
  Sieve s = Sieve::cubic_bspline(9, lo, hi);
  // gamma_j = Greville abscissa reproduces the rescaled coordinate.
  s.set_gamma(s.greville());
  for (int l = 0; l <= 50; ++l) {
    const double u = lo + (hi - lo) * l / 50.0;
    EXPECT_NEAR(s.eval(u), (u - lo) / (hi - lo), 1e-13);
    EXPECT_NEAR(s.deriv(u), 1.0 / (hi - lo), 1e-12);
  }
}

TEST(DesignMatrix, RowsSumToOneAndSingleRowMatchesBasisRow) {
  const auto data = fixtures::zero_noise(10, 4);
  const Theta th(VectorXd::Zero(3), (VectorXd(2) << 0.3, -0.4).finished());
  const IndexRange r = index_range(data, th.alpha().alpha);
  const Sieve s = Sieve::cubic_bspline(8, r.lo, r.hi);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const MatrixXd B = design_matrix(data[i], th, s);
    EXPECT_LE((B.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
  }
  SubjectBlock one;
  one.id = "o";
  one.y = VectorXd::Zero(1);
  one.X = MatrixXd::Zero(1, 3);
  one.Z = (MatrixXd(1, 3) << 0.2, 0.7, -0.1).finished();
  const double u = one.Z.row(0).dot(th.alpha().alpha);
  EXPECT_EQ(VectorXd(design_matrix(one, th, s).row(0).transpose()), s.basis_row(u));
}

TEST(DesignMatrix, IdenticalIndexRowsGiveIdenticalDesignRows) {
  SubjectBlock b;
  b.id = "b";
  b.y = VectorXd::Zero(3);
  b.X = MatrixXd::Zero(3, 1);
  b.Z = MatrixXd(3, 2);
  b.Z << 0.4, 0.1, 0.4, 0.1, 0.4, 0.1;
  const Theta th(VectorXd::Zero(1), (VectorXd(1) << 0.5).finished());
  const MatrixXd B = design_matrix(b, th, Sieve::cubic_bspline(6, -1.0, 1.0));
  EXPECT_EQ(B.row(0), B.row(1));
  EXPECT_EQ(B.row(1), B.row(2));
}

TEST(Sieve, RescaleCoversTrainingIndexRange) {
  const auto data = fixtures::zero_noise(20, 5);
  WorkingCovSpec spec;
  const ProfileProblem prob(data, Sieve::cubic_bspline(8), spec, FitConfig{});
  const Theta th(VectorXd::Zero(3), (VectorXd(2) << 0.5, -0.2).finished());
  const Sieve s = prob.sieve_at(th.as_vector());
  double lo = 1e300, hi = -1e300;
  for (const auto& b : data.subjects()) {
    const VectorXd u = index_values(b, th.alpha().alpha);
    lo = std::min(lo, u.minCoeff());
    hi = std::max(hi, u.maxCoeff());
    for (Eigen::Index j = 0; j < u.size(); ++j) {
      EXPECT_GE(s.rescale(u(j)), 0.0);
      EXPECT_LE(s.rescale(u(j)), 1.0);
    }
  }
  EXPECT_EQ(s.lo(), lo);
  EXPECT_EQ(s.hi(), hi);
}

TEST(Sieve, InvalidConstruction) {
  EXPECT_THROW(Sieve::cubic_bspline(3), ConfigError);
  EXPECT_THROW(Sieve::cubic_bspline(6, 1.0, 1.0), DomainError);
  const Sieve s = Sieve::cubic_bspline(6);
  for (Eigen::Index j = 5; j < s.knots().size() - 4; ++j)
    EXPECT_NEAR(s.knots()(j) - s.knots()(j - 1), s.knots()(5) - s.knots()(4), 1e-15);
}

TEST(Sieve, NestedKnotsNeverIncreaseInnerDeviance) {
  SimDesign d;
  d.n = 60;
  d.allow_override = true;
  const auto rep = generate_replication(d, 3);
  WorkingCovSpec spec;
  spec.corr = CorrFamily::independence;
  const Theta th = rep.theta0;
  double dev[2];
  int idx = 0;
  for (int K : {6, 12}) {
    const ProfileProblem prob(rep.data, Sieve::cubic_bspline(K), spec, FitConfig{});
    const ProfiledMean pm = profiled_mean(prob, th);
    dev[idx++] = total_deviance(rep.data, spec.family, pm.mu);
  }
  EXPECT_LE(dev[1], dev[0] + 1e-9);
}

TEST(SelectK, SingleCandidateAndValidation) {
  SimDesign d;
  d.n = 40;
  d.allow_override = true;
  const auto rep = generate_replication(d, 1);
  WorkingCovSpec spec;
  const Theta init = initial_theta(rep.data, spec.family);
  EXPECT_EQ(select_K(rep.data, init, spec, FitConfig{}, {8}).K, 8);
  EXPECT_THROW(select_K(rep.data, init, spec, FitConfig{}, {}), ConfigError);
  EXPECT_THROW(select_K(rep.data, init, spec, FitConfig{}, {3, 6}), ConfigError);
}

TEST(SelectK, BicIsDeviancePlusPenaltyAndTiesPickSmallerK) {
  SimDesign d;
  d.n = 40;
  d.allow_override = true;
  const auto rep = generate_replication(d, 2);
  WorkingCovSpec spec;
  const Theta init = initial_theta(rep.data, spec.family);
  const KSelection sel = select_K(rep.data, init, spec, FitConfig{}, {10, 6, 8, 6});
  ASSERT_EQ(sel.candidates, (std::vector<int>{6, 8, 10}));
  const double logN = std::log(static_cast<double>(rep.data.total_obs()));
  for (std::size_t c = 0; c < sel.candidates.size(); ++c) {
    const ProfileProblem prob(rep.data, Sieve::cubic_bspline(sel.candidates[c]), spec, FitConfig{});
    const FitResult f = fit(prob, init);
    EXPECT_NEAR(sel.bic[c], f.deviance + sel.candidates[c] * logN, 1e-9);
  }
  const auto best = std::min_element(sel.bic.begin(), sel.bic.end());
  EXPECT_EQ(sel.K, sel.candidates[best - sel.bic.begin()]);
}

TEST(SelectK, PrefersConvergedCandidates) {
  // At K = 6 this replication's profile score has no root near the truth.
  SimDesign d;
  d.n = 100;
  const auto rep = generate_replication(d, 143);
  WorkingCovSpec spec;
  spec.corr = CorrFamily::ar1;
  const Theta init = initial_theta(rep.data, spec.family);
  const ProfileProblem k6(rep.data, Sieve::cubic_bspline(6), spec, FitConfig{});
  const FitResult f6 = fit(k6, init);
  ASSERT_FALSE(f6.converged);
  const KSelection sel = select_K(rep.data, init, spec, FitConfig{}, {6, 8, 10, 12});
  EXPECT_LT(sel.bic[0], sel.bic[1]);
  EXPECT_TRUE(sel.fit.converged);
  EXPECT_EQ(sel.K, 8);
}

TEST(Sieve, UnclampedContinuesEndPieces) {
  Sieve s = Sieve::cubic_bspline(7, -1.0, 3.0);
  s.set_gamma((VectorXd(7) << 0.3, -1.0, 2.0, 0.5, -0.7, 1.1, 0.2).finished());
  const Sieve u = s.unclamped();
  for (double x : {-1.0, 0.0, 2.5, 3.0}) EXPECT_DOUBLE_EQ(u.eval(x), s.eval(x));
  EXPECT_DOUBLE_EQ(s.eval(-1.2), s.eval(-1.0));
  // The first piece is a cubic: fit it from four interior points and compare beyond the end.
  const double a = -1.0, w = 0.2;  // first knot interval is [-1, 0]
  Eigen::Matrix4d V;
  Eigen::Vector4d y;
  for (int r = 0; r < 4; ++r) {
    const double x = a + (r + 0.5) * w;
    V.row(r) << 1.0, x, x * x, x * x * x;
    y(r) = s.eval(x);
  }
  const Eigen::Vector4d c = V.fullPivLu().solve(y);
  for (double x : {-1.05, -1.2}) EXPECT_NEAR(u.eval(x), c(0) + c(1) * x + c(2) * x * x + c(3) * x * x * x, 1e-9);
  EXPECT_GT(std::abs(u.eval(-1.2) - s.eval(-1.2)), 1e-6);
}

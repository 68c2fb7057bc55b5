#pragma once

// Independent reference computations shared by the unit and acceptance
// tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gplsim/gplsim.hpp"

namespace oracles {

using gplsim::LongitudinalDataset;
using gplsim::MatrixXd;
using gplsim::SubjectBlock;
using gplsim::VectorXd;

// Root of psi(l) = sum g_i / (1 + l g_i) on the interval where every
// 1 + l g_i stays above 1/n, by bisection (psi is decreasing).
inline double bisection_lambda(const VectorXd& g) {
  const double n = static_cast<double>(g.size());
  double lo = (1.0 / n - 1.0) / g.maxCoeff();
  double hi = (1.0 / n - 1.0) / g.minCoeff();
  auto psi = [&](double l) { return (g.array() / (1.0 + l * g.array())).sum(); };
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    (psi(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Gaussian data whose link is exactly linear in the index (p = 2, q = 3),
// with heteroskedastic, within-subject correlated errors.
inline LongitudinalDataset linear_link_data(int n, int m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N;
  const VectorXd beta = (VectorXd(2) << 1.0, -0.5).finished();
  const VectorXd alpha = (VectorXd(3) << 0.8, 0.48, 0.36).finished();
  std::vector<SubjectBlock> subj(n);
  for (int i = 0; i < n; ++i) {
    auto& s = subj[i];
    s.id = "l" + std::to_string(i);
    s.X.resize(m, 2);
    s.Z.resize(m, 3);
    s.y.resize(m);
    const double b = 0.5 * N(rng);
    for (int j = 0; j < m; ++j) {
      for (int k = 0; k < 2; ++k) s.X(j, k) = N(rng);
      for (int k = 0; k < 3; ++k) s.Z(j, k) = N(rng);
      const double sd = 0.5 + 0.5 * std::abs(s.X(j, 0));
      s.y(j) = s.X.row(j).dot(beta) + 0.5 + 2.0 * s.Z.row(j).dot(alpha) + b + sd * N(rng);
    }
  }
  return LongitudinalDataset(std::move(subj), 2, 3);
}

struct LeastSquaresTheta {
  VectorXd theta;  // (beta, phi)
  MatrixXd cov;    // delta-method image of the cluster-robust covariance
};

// With a linear link the model is least squares on [X, 1, Z] with
// coefficient c = b * alpha on Z. theta maps to (beta, +/- c_{2..q}/|c|).
inline LeastSquaresTheta cluster_robust_least_squares(const LongitudinalDataset& data) {
  const Eigen::Index p = data.p(), q = data.q(), N = data.total_obs(), P = p + 1 + q;
  MatrixXd W(N, P);
  VectorXd y(N);
  Eigen::Index row = 0;
  for (const auto& s : data.subjects()) {
    const Eigen::Index m = s.size();
    W.block(row, 0, m, p) = s.X;
    W.block(row, p, m, 1).setOnes();
    W.block(row, p + 1, m, q) = s.Z;
    y.segment(row, m) = s.y;
    row += m;
  }
  const MatrixXd WtW = W.transpose() * W;
  const VectorXd coef = WtW.ldlt().solve(W.transpose() * y);
  const VectorXd e = y - W * coef;
  MatrixXd meat = MatrixXd::Zero(P, P);
  row = 0;
  for (const auto& s : data.subjects()) {
    const Eigen::Index m = s.size();
    const VectorXd sc = W.middleRows(row, m).transpose() * e.segment(row, m);
    meat += sc * sc.transpose();
    row += m;
  }
  const MatrixXd bread = WtW.inverse();
  const MatrixXd C = bread * meat * bread;

  const VectorXd c = coef.tail(q);
  const double sgn = c(0) > 0 ? 1.0 : -1.0;
  const double r = c.norm();
  const Eigen::Index d = p + q - 1;
  MatrixXd J = MatrixXd::Zero(d, P);
  LeastSquaresTheta out;
  out.theta.resize(d);
  for (Eigen::Index k = 0; k < p; ++k) {
    J(k, k) = 1.0;
    out.theta(k) = coef(k);
  }
  for (Eigen::Index k = 1; k < q; ++k) {
    out.theta(p + k - 1) = sgn * c(k) / r;
    for (Eigen::Index j = 0; j < q; ++j)
      J(p + k - 1, p + 1 + j) = sgn * ((k == j ? 1.0 / r : 0.0) - c(k) * c(j) / (r * r * r));
  }
  out.cov = J * C * J.transpose();
  return out;
}

}  // namespace oracles

#pragma once

// Sieve bases for the unknown link eta on the rescaled index interval [0,1]:
// clamped cubic B-splines with equally spaced interior knots (the estimator)
// and plain monomials (the polynomial GEE competitor).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "gplsim/errors.hpp"
#include "gplsim/model.hpp"

namespace gplsim {

enum class BasisKind { cubic_bspline, monomial };

class Sieve {
 public:
  static constexpr int kCubicOrder = 4;

  Sieve() = default;

  static Sieve cubic_bspline(int K, double lo = 0.0, double hi = 1.0) {
    if (K < kCubicOrder) throw ConfigError("cubic B-spline sieve needs K >= 4");
    Sieve s;
    s.kind_ = BasisKind::cubic_bspline;
    s.K_ = K;
    s.order_ = kCubicOrder;
    s.knots_.resize(K + kCubicOrder);
    const int intervals = K - kCubicOrder + 1;
    for (int j = 0; j < K + kCubicOrder; ++j) {
      if (j < kCubicOrder) s.knots_(j) = 0.0;
      else if (j >= K) s.knots_(j) = 1.0;
      else s.knots_(j) = static_cast<double>(j - kCubicOrder + 1) / intervals;
    }
    s.set_range(lo, hi);
    s.gamma_ = VectorXd::Zero(K);
    return s;
  }

  /// Basis {1, u, ..., u^degree}; K = degree + 1.
  static Sieve monomial(int degree, double lo = 0.0, double hi = 1.0) {
    if (degree < 1) throw ConfigError("polynomial sieve needs degree >= 1");
    Sieve s;
    s.kind_ = BasisKind::monomial;
    s.K_ = degree + 1;
    s.order_ = degree + 1;
    s.set_range(lo, hi);
    s.gamma_ = VectorXd::Zero(s.K_);
    return s;
  }

  BasisKind kind() const { return kind_; }
  int K() const { return K_; }
  int order() const { return order_; }
  /// Dimension reported in simulation tables: K for splines, the degree for
  /// polynomials.
  int reported_dim() const { return kind_ == BasisKind::monomial ? K_ - 1 : K_; }
  const VectorXd& knots() const { return knots_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  const VectorXd& gamma() const { return gamma_; }

  void set_gamma(VectorXd g) {
    if (g.size() != K_) throw DomainError("sieve coefficient length mismatch");
    gamma_ = std::move(g);
  }

  void set_range(double lo, double hi) {
    if (!(hi > lo)) throw DomainError("sieve rescaling needs hi > lo");
    lo_ = lo;
    hi_ = hi;
  }

  Sieve with_range(double lo, double hi) const {
    Sieve s = *this;
    s.set_range(lo, hi);
    return s;
  }

  /// Copy that continues the end polynomial pieces past [0,1] instead of
  /// clamping; for derivatives at a fixed rescaling map.
  Sieve unclamped() const {
    Sieve s = *this;
    s.unclamped_ = true;
    return s;
  }
  bool is_unclamped() const { return unclamped_; }

  double rescale(double u) const {
    const double t = (u - lo_) / (hi_ - lo_);
    return unclamped_ ? t : std::clamp(t, 0.0, 1.0);
  }
  double unscale(double t) const { return lo_ + t * (hi_ - lo_); }

  /// B(rescale(u)) written into `row` (length K).
  template <class Row>
  void basis_row_into(double u, Row&& row) const {
    const double t = rescale(u);
    if (kind_ == BasisKind::monomial) {
      double pw = 1.0;
      for (int k = 0; k < K_; ++k) {
        row(k) = pw;
        pw *= t;
      }
      return;
    }
    row.setZero();
    std::array<double, kCubicOrder> N;
    const int span = find_span(t);
    cubic_nonzero(span, t, N);
    for (int r = 0; r < kCubicOrder; ++r) row(span - kCubicOrder + 1 + r) = N[r];
  }

  VectorXd basis_row(double u) const {
    VectorXd row(K_);
    basis_row_into(u, row);
    return row;
  }

  /// d/du B(rescale(u)), including the 1/(hi - lo) slope of the rescaling.
  VectorXd basis_deriv_row(double u) const {
    const double t = rescale(u);
    const double slope = 1.0 / (hi_ - lo_);
    VectorXd row = VectorXd::Zero(K_);
    if (kind_ == BasisKind::monomial) {
      double pw = 1.0;
      for (int k = 1; k < K_; ++k) {
        row(k) = k * pw * slope;
        pw *= t;
      }
      return row;
    }
    const int span = find_span(t);
    // Order-3 (quadratic) nonzero functions on the same span.
    std::array<double, 3> Q{};
    quadratic_nonzero(span, t, Q);
    // B'_{j,4} = 3 [ B_{j,3}/(t_{j+3}-t_j) - B_{j+1,3}/(t_{j+4}-t_{j+1}) ];
    // quadratics j = span-2 .. span are nonzero.
    for (int r = 0; r < 3; ++r) {
      const int j = span - 2 + r;  // index of the quadratic B_{j,3}
      const double b = Q[r];
      if (b == 0.0) continue;
      const double denom = knots_(j + 3) - knots_(j);
      if (denom <= 0.0) continue;
      const double c = 3.0 * b / denom;
      row(j) += c;       // positive contribution to B'_{j,4}
      if (j - 1 >= 0) row(j - 1) -= c;  // negative contribution to B'_{j-1,4}
    }
    return row * slope;
  }

  double eval(double u) const {
    VectorXd row(K_);
    basis_row_into(u, row);
    return row.dot(gamma_);
  }

  double deriv(double u) const { return basis_deriv_row(u).dot(gamma_); }

  /// Greville abscissae (knot averages) on [0,1]; coefficients equal to
  /// these reproduce the identity function t.
  VectorXd greville() const {
    VectorXd g(K_);
    for (int j = 0; j < K_; ++j)
      g(j) = (knots_(j + 1) + knots_(j + 2) + knots_(j + 3)) / 3.0;
    return g;
  }

 private:
  int find_span(double t) const {
    // Largest s in [order-1, K-1] with knots(s) <= t; t >= 1 maps to the last span.
    if (t >= 1.0) return K_ - 1;
    if (t < 0.0) return kCubicOrder - 1;
    const int intervals = K_ - kCubicOrder + 1;
    int s = kCubicOrder - 1 + static_cast<int>(std::floor(t * intervals));
    s = std::clamp(s, kCubicOrder - 1, K_ - 1);
    while (s > kCubicOrder - 1 && knots_(s) > t) --s;
    while (s < K_ - 1 && knots_(s + 1) <= t) ++s;
    return s;
  }

  // Cox-de Boor triangle for the `order` nonzero functions on `span`.
  template <std::size_t Ord>
  void nonzero(int span, double t, std::array<double, Ord>& N) const {
    std::array<double, Ord> left{}, right{};
    N[0] = 1.0;
    for (std::size_t j = 1; j < Ord; ++j) {
      left[j] = t - knots_(span + 1 - static_cast<int>(j));
      right[j] = knots_(span + static_cast<int>(j)) - t;
      double saved = 0.0;
      for (std::size_t r = 0; r < j; ++r) {
        const double denom = right[r + 1] + left[j - r];
        const double temp = denom != 0.0 ? N[r] / denom : 0.0;
        N[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      N[j] = saved;
    }
  }

  void cubic_nonzero(int span, double t, std::array<double, kCubicOrder>& N) const {
    nonzero<kCubicOrder>(span, t, N);
  }
  void quadratic_nonzero(int span, double t, std::array<double, 3>& N) const {
    nonzero<3>(span, t, N);
  }

  BasisKind kind_ = BasisKind::cubic_bspline;
  int K_ = 0;
  int order_ = kCubicOrder;
  VectorXd knots_;
  double lo_ = 0.0;
  double hi_ = 1.0;
  bool unclamped_ = false;
  VectorXd gamma_;
};

/// Index values u_ij = z_ij' alpha for one subject.
inline VectorXd index_values(const SubjectBlock& block, const VectorXd& alpha) {
  return block.Z * alpha;
}

struct IndexRange {
  double lo = 0.0;
  double hi = 1.0;
  bool degenerate = false;  // all index values equal
};

/// Min/max of the index over the whole dataset at direction alpha.
inline IndexRange index_range(const LongitudinalDataset& data, const VectorXd& alpha) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : data.subjects()) {
    const VectorXd u = index_values(s, alpha);
    lo = std::min(lo, u.minCoeff());
    hi = std::max(hi, u.maxCoeff());
  }
  IndexRange r{lo, hi, false};
  if (!(hi - lo > 1e-12 * std::max(1.0, std::abs(lo)))) {
    r.degenerate = true;
    r.hi = lo + 1.0;
  }
  return r;
}

/// m_i x K design; row j is the basis row at u_ij = z_ij' alpha(phi).
inline MatrixXd design_matrix(const SubjectBlock& block, const Theta& theta, const Sieve& sieve) {
  const VectorXd u = index_values(block, theta.alpha().alpha);
  MatrixXd B(u.size(), sieve.K());
  for (Eigen::Index j = 0; j < u.size(); ++j) sieve.basis_row_into(u(j), B.row(j));
  return B;
}

/// xi_i = X_i beta + B_i(theta) gamma.
inline VectorXd linear_predictor(const SubjectBlock& block, const Theta& theta, const Sieve& sieve) {
  VectorXd xi = design_matrix(block, theta, sieve) * sieve.gamma();
  if (theta.p() > 0) xi += block.X * theta.beta();
  return xi;
}

}  // namespace gplsim

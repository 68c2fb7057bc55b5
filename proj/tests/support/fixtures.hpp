#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "gplsim/gplsim.hpp"

namespace fixtures {

using gplsim::LongitudinalDataset;
using gplsim::SubjectBlock;
using gplsim::VectorXd;

/// Noiseless Gaussian data y = x'beta0 + sin(2 pi t), t the min-max
/// rescaled true index.
inline LongitudinalDataset zero_noise(int n = 60, int m = 5, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01;
  const VectorXd beta0 = (VectorXd(3) << 1.0, -1.0, 0.5).finished();
  const VectorXd alpha0 = VectorXd::Constant(3, 1.0 / std::sqrt(3.0));
  std::vector<SubjectBlock> subj(n);
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < n; ++i) {
    auto& s = subj[i];
    s.id = "z" + std::to_string(i + 1);
    s.X.resize(m, 3);
    s.Z.resize(m, 3);
    for (int j = 0; j < m; ++j)
      for (int k = 0; k < 3; ++k) {
        s.X(j, k) = N01(rng);
        s.Z(j, k) = N01(rng);
      }
    const VectorXd u = s.Z * alpha0;
    lo = std::min(lo, u.minCoeff());
    hi = std::max(hi, u.maxCoeff());
  }
  for (auto& s : subj) {
    const VectorXd u = s.Z * alpha0;
    s.y.resize(m);
    for (int j = 0; j < m; ++j) s.y(j) = s.X.row(j).dot(beta0) + gplsim::eta0((u(j) - lo) / (hi - lo));
  }
  return LongitudinalDataset(std::move(subj), 3, 3);
}

/// Noiseless Gaussian data in which every subject spans the whole true
/// index range: the first and last visits sit within 0.02 of u = -2 and
/// u = 2, the rest uniformly in between, plus variation orthogonal to
/// alpha0.
inline LongitudinalDataset zero_noise_full_range(int n = 50, int m = 5, std::uint64_t seed = 8) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(-2.0, 2.0), J(0.0, 0.02);
  const VectorXd beta0 = (VectorXd(3) << 1.0, -1.0, 0.5).finished();
  const VectorXd alpha0 = VectorXd::Constant(3, 1.0 / std::sqrt(3.0));
  std::vector<SubjectBlock> subj(n);
  for (int i = 0; i < n; ++i) {
    auto& s = subj[i];
    s.id = "f" + std::to_string(i + 1);
    s.X.resize(m, 3);
    s.Z.resize(m, 3);
    s.y.resize(m);
    for (int j = 0; j < m; ++j) {
      const double c = j == 0 ? -2.0 + J(rng) : j == m - 1 ? 2.0 - J(rng) : U(rng);
      VectorXd w(3);
      for (int k = 0; k < 3; ++k) {
        s.X(j, k) = N01(rng);
        w(k) = N01(rng);
      }
      w -= w.dot(alpha0) * alpha0;
      s.Z.row(j) = (c * alpha0 + w).transpose();
      s.y(j) = s.X.row(j).dot(beta0) + gplsim::eta0((c + 2.0) / 4.0);
    }
  }
  return LongitudinalDataset(std::move(subj), 3, 3);
}

/// Seizure-count style panel: 59 subjects, 4 visits, Poisson counts with a
/// subject random effect. x = (treatment, baseline severity, age) and the
/// index is a jittered visit time.
inline LongitudinalDataset epil_like(std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(-0.08, 0.08);
  std::bernoulli_distribution trt(0.5);
  const int n = 59, m = 4;
  std::vector<SubjectBlock> subj(n);
  for (int i = 0; i < n; ++i) {
    auto& s = subj[i];
    s.id = "e" + std::to_string(100 + i);
    s.X.resize(m, 3);
    s.Z.resize(m, 1);
    s.y.resize(m);
    const double t = trt(rng) ? 1.0 : 0.0;
    const double base = std::exp(0.5 * N01(rng));
    const double age = 28.0 + 6.0 * N01(rng);
    const double b = 0.35 * N01(rng);
    for (int j = 0; j < m; ++j) {
      s.X(j, 0) = t;
      s.X(j, 1) = base;
      s.X(j, 2) = age;
      const double time = (j + 1) / 4.0 + U(rng);
      s.Z(j, 0) = time;
      const double xi = 0.4 - 0.3 * t + 0.8 * (base - 1.1) + 0.01 * (age - 28.0) + 0.3 * std::sin(3.0 * time) + b;
      std::poisson_distribution<int> draw(std::exp(xi));
      s.y(j) = draw(rng);
    }
  }
  return LongitudinalDataset(std::move(subj), 3, 1);
}

/// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gplsim_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures

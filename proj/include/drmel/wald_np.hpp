#pragma once

// Comparator regions for quantile vectors: the DRM Wald method built on MELE
// quantiles with a bootstrap covariance, and the fully nonparametric method
// built on sample quantiles with a kernel-density variance plug-in.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "drmel/el_core.hpp"
#include "drmel/model.hpp"
#include "drmel/random.hpp"
#include "drmel/solver.hpp"

namespace drmel {

// ---------------------------------------------------------------------------
// Ellipsoidal regions
// ---------------------------------------------------------------------------

/// {xi : (xi - center)^T shape^{-1} (xi - center) <= radius2}.
struct Ellipse {
  Vec center;
  Mat shape;
  double radius2 = 0.0;
  double alpha = 0.05;
  double area = 0.0;  // length for l = 1, area for l = 2, volume beyond

  double quadratic_form(const Vec& xi) const {
    const Vec d = xi - center;
    return d.dot(shape.ldlt().solve(d));
  }
  bool contains(const Vec& xi) const { return quadratic_form(xi) <= radius2; }

  /// Half-width of the bounding box along coordinate i.
  double half_width(Eigen::Index i) const { return std::sqrt(radius2 * shape(i, i)); }
};

inline Ellipse make_ellipse(Vec center, Mat shape, double alpha) {
  const auto l = center.size();
  if (shape.rows() != l || shape.cols() != l) throw ValidationError("ellipse shape dimension mismatch");
  if (!(alpha > 0 && alpha < 1)) throw ValidationError("alpha must lie in (0,1)");
  Eigen::LLT<Mat> llt(shape);
  const double det = shape.determinant();
  if (llt.info() != Eigen::Success || !(det > 0)) throw SolverError("covariance matrix is singular");
  Ellipse e;
  e.radius2 = chisq_quantile(static_cast<int>(l), 1.0 - alpha);
  e.alpha = alpha;
  const double dl = static_cast<double>(l);
  const double unit_ball = std::pow(std::numbers::pi, dl / 2) / std::tgamma(dl / 2 + 1);
  e.area = unit_ball * std::pow(e.radius2, dl / 2) * std::sqrt(det);
  e.center = std::move(center);
  e.shape = std::move(shape);
  return e;
}

inline void write_ellipse(std::ostream& out, const std::string& method, const Ellipse& e, char delim = ',') {
  out.precision(10);
  out << "method" << delim << "l" << delim << "center" << delim << "shape_row_major" << delim << "radius2" << delim
      << "alpha" << delim << "area\n";
  out << method << delim << e.center.size() << delim;
  for (Eigen::Index i = 0; i < e.center.size(); ++i) out << (i ? " " : "") << e.center[i];
  out << delim;
  for (Eigen::Index i = 0; i < e.shape.rows(); ++i)
    for (Eigen::Index j = 0; j < e.shape.cols(); ++j) out << (i || j ? " " : "") << e.shape(i, j);
  out << delim << e.radius2 << delim << e.alpha << delim << e.area << '\n';
}

// ---------------------------------------------------------------------------
// Wald method
// ---------------------------------------------------------------------------

struct WaldEstimate {
  Vec xi_tilde;
  Mat omega_tilde;  // covariance estimate of sqrt(n)(xi_tilde - xi)
  std::size_t replicates = 0;
  std::uint64_t seed = 0;
  std::size_t failures = 0;
  const char* method = "bootstrap-omega";
};

struct WaldOptions {
  FitOptions fit{.solve = {}, .diagnostics = false};
  std::size_t workers = 1;
  double max_failure_rate = 0.05;
};

/// Resamples each population with replacement (sizes preserved).
inline MultiSample resample_within(const MultiSample& ms, Rng& rng) {
  std::vector<std::vector<double>> out(ms.populations());
  for (std::size_t k = 0; k < ms.populations(); ++k) {
    const auto src = ms.sample(k);
    out[k].resize(src.size());
    for (auto& v : out[k]) v = src[rng.below(src.size())];
  }
  return MultiSample(std::move(out));
}

/// MELE quantiles plus a within-population bootstrap estimate of their
/// covariance: Omega = n * cov over B refits. Replicate b draws from the
/// substream (seed, b), so results do not depend on `workers`.
inline WaldEstimate wald_estimate(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                                  std::size_t B, std::uint64_t seed, const WaldOptions& opts = {},
                                  const DrmFit* fit = nullptr) {
  validate_specs(ms, specs);
  if (B < 50) throw ValidationError("bootstrap needs at least 50 replicates");
  WaldEstimate est;
  est.replicates = B;
  est.seed = seed;
  if (fit) {
    est.xi_tilde = mele_quantiles(*fit, ms, b, specs);
  } else {
    const DrmFit f = fit_unconstrained(ms, b, opts.fit);
    est.xi_tilde = mele_quantiles(f, ms, b, specs);
  }

  const auto l = static_cast<Eigen::Index>(specs.size());
  Mat draws(static_cast<Eigen::Index>(B), l);
  std::vector<char> ok(B, 0);
  const std::vector<QuantileSpec> sp(specs.begin(), specs.end());
  auto run = [&](std::size_t rep) {
    Rng rng(substream_seed(seed, {rep}));
    try {
      const MultiSample bs = resample_within(ms, rng);
      const DrmFit f = fit_unconstrained(bs, b, opts.fit);
      draws.row(static_cast<Eigen::Index>(rep)) = mele_quantiles(f, bs, b, sp).transpose();
      ok[rep] = 1;
    } catch (const Error&) {
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, B));
  if (workers == 1) {
    for (std::size_t rep = 0; rep < B; ++rep) run(rep);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t rep; (rep = next++) < B;) run(rep);
      });
    for (auto& t : pool) t.join();
  }

  std::vector<Eigen::Index> good;
  for (std::size_t rep = 0; rep < B; ++rep)
    if (ok[rep]) good.push_back(static_cast<Eigen::Index>(rep));
  est.failures = B - good.size();
  if (static_cast<double>(est.failures) > opts.max_failure_rate * static_cast<double>(B))
    throw SolverError("bootstrap refits failed in " + std::to_string(est.failures) + " of " + std::to_string(B) +
                      " resamples");
  Mat kept(static_cast<Eigen::Index>(good.size()), l);
  for (std::size_t i = 0; i < good.size(); ++i) kept.row(static_cast<Eigen::Index>(i)) = draws.row(good[i]);
  const Vec mean = kept.colwise().mean();
  const Mat centered = kept.rowwise() - mean.transpose();
  const double n = static_cast<double>(ms.total());
  est.omega_tilde = n * (centered.transpose() * centered) / static_cast<double>(good.size() - 1);
  for (Eigen::Index i = 0; i < l; ++i)
    if (!(est.omega_tilde(i, i) > 0)) throw SolverError("bootstrap variance is zero for quantile " + std::to_string(i));
  return est;
}

/// {xi : n (xi_tilde - xi)^T Omega^{-1} (xi_tilde - xi) <= chi2_l(1 - alpha)}.
inline Ellipse wald_region(const WaldEstimate& est, std::size_t n, double alpha) {
  return make_ellipse(est.xi_tilde, est.omega_tilde / static_cast<double>(n), alpha);
}

// ---------------------------------------------------------------------------
// Nonparametric method
// ---------------------------------------------------------------------------

/// inf{x : ECDF(x) >= tau}.
inline double empirical_quantile(std::span<const double> sample, double tau) {
  if (sample.empty()) throw ValidationError("empty sample");
  if (!(tau > 0 && tau < 1)) throw ValidationError("tau must lie in (0,1)");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    if (static_cast<double>(i + 1) / n >= tau - kQuantileSlack) return s[i];
  return s.back();
}

inline double silverman_bandwidth(double sd, double iqr, std::size_t n) {
  if (n < 2) throw ValidationError("bandwidth needs at least two observations");
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0)) spread = sd;
  if (!(spread > 0)) throw ValidationError("degenerate sample: zero spread");
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

/// 0.9 min{sd, IQR/1.34} n^{-1/5}, with sd and IQR of the empirical
/// distribution (1/n variance, inf-definition quartiles).
inline double silverman_bandwidth(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < 2) throw ValidationError("bandwidth needs at least two observations");
  double mean = 0.0;
  for (double x : sample) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : sample) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  const double iqr = empirical_quantile(sample, 0.75) - empirical_quantile(sample, 0.25);
  return silverman_bandwidth(sd, iqr, n);
}

/// Gaussian-kernel density estimate at x.
inline double kde_at(std::span<const double> sample, double bandwidth, double x) {
  if (!(bandwidth > 0)) throw ValidationError("bandwidth must be positive");
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  double s = 0.0;
  for (double xj : sample) {
    const double z = (xj - x) / bandwidth;
    s += std::exp(-0.5 * z * z);
  }
  return inv_sqrt_2pi * s / (static_cast<double>(sample.size()) * bandwidth);
}

struct NpEstimate {
  Vec xi_hat;
  Mat t_hat;  // diagonal: tau (1 - tau) / (rho g^2(xi_hat))
  Vec bandwidths;
  Vec densities;
};

inline NpEstimate np_estimate(const MultiSample& ms, std::span<const QuantileSpec> specs) {
  validate_specs(ms, specs);
  const auto l = static_cast<Eigen::Index>(specs.size());
  NpEstimate est;
  est.xi_hat.resize(l);
  est.bandwidths.resize(l);
  est.densities.resize(l);
  est.t_hat = Mat::Zero(l, l);
  for (Eigen::Index s = 0; s < l; ++s) {
    const auto& sp = specs[static_cast<std::size_t>(s)];
    const auto sample = ms.sample(sp.population);
    est.xi_hat[s] = empirical_quantile(sample, sp.tau);
    est.bandwidths[s] = silverman_bandwidth(sample);
    est.densities[s] = kde_at(sample, est.bandwidths[s], est.xi_hat[s]);
    if (!(est.densities[s] > 0))
      throw DomainError("zero density estimate at the sample quantile of population " +
                        std::to_string(sp.population));
    est.t_hat(s, s) = sp.tau * (1 - sp.tau) / (ms.rho(sp.population) * est.densities[s] * est.densities[s]);
  }
  return est;
}

inline Ellipse np_region(const NpEstimate& est, std::size_t n, double alpha) {
  return make_ellipse(est.xi_hat, est.t_hat / static_cast<double>(n), alpha);
}

inline Ellipse np_region(const MultiSample& ms, std::span<const QuantileSpec> specs, double alpha) {
  return np_region(np_estimate(ms, specs), ms.total(), alpha);
}

}  // namespace drmel

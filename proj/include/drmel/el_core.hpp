#pragma once

// Empirical likelihood under the density ratio model
//
//   g_k(x) = exp(theta_k^T q(x)) g_0(x),   k = 0..m,   theta_0 = 0.
//
// With h_r = exp(theta_r^T q), hbar = sum_r rho_r h_r and
// psi_s = h_{r_s} [1(x <= xi_s) - tau_s] / hbar, the dual function is
//
//   D(lambda, theta) = sum_i theta_{k_i}^T q(x_i) - sum_i log hbar(x_i)
//                      - sum_i log(1 + lambda^T psi(x_i)).
//
// Its saddle point gives the profile log-EL up to -n log n; at lambda = 0 the
// maximiser over theta gives the unconstrained maximum EL.
//
// Parameter vectors are laid out as (lambda_1..lambda_l, theta flattened
// component-major: theta_11, theta_21, ..., theta_m1, theta_12, ...).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "drmel/model.hpp"
#include "drmel/solver.hpp"

namespace drmel {

struct DualPoint {
  Vec lambda;
  DrmParams theta;

  Vec flat() const {
    Vec v(lambda.size() + static_cast<Eigen::Index>(theta.m() * theta.d()));
    v << lambda, theta.flat();
    return v;
  }

  static DualPoint from_flat(const Vec& v, std::size_t l, std::size_t m, std::size_t d) {
    DualPoint p;
    p.lambda = v.head(static_cast<Eigen::Index>(l));
    p.theta = DrmParams::from_flat(v.tail(static_cast<Eigen::Index>(m * d)), m, d);
    return p;
  }
};

/// Centres and scales the non-constant basis columns. theta maps between the
/// two parameterisations so that theta^T q(x) is unchanged.
struct BasisScaling {
  Vec mean;   // mean[0] = 0
  Vec scale;  // scale[0] = 1

  static BasisScaling identity(std::size_t d) {
    return {Vec::Zero(static_cast<Eigen::Index>(d)), Vec::Ones(static_cast<Eigen::Index>(d))};
  }

  static BasisScaling fit(const Mat& Q) {
    const auto d = Q.cols();
    BasisScaling s = identity(static_cast<std::size_t>(d));
    const double n = static_cast<double>(Q.rows());
    for (Eigen::Index c = 1; c < d; ++c) {
      const double mu = Q.col(c).mean();
      const double var = (Q.col(c).array() - mu).square().sum() / n;
      s.mean[c] = mu;
      s.scale[c] = var > 0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Mat apply(const Mat& Q) const {
    Mat out = Q;
    for (Eigen::Index c = 1; c < Q.cols(); ++c) out.col(c) = (Q.col(c).array() - mean[c]) / scale[c];
    return out;
  }

  DrmParams to_scaled(const DrmParams& p) const {
    DrmParams out = p;
    for (Eigen::Index c = 1; c < p.theta.cols(); ++c) {
      out.theta.col(0) += p.theta.col(c) * mean[c];
      out.theta.col(c) = p.theta.col(c) * scale[c];
    }
    return out;
  }

  DrmParams to_original(const DrmParams& p) const {
    DrmParams out = p;
    for (Eigen::Index c = 1; c < p.theta.cols(); ++c) {
      out.theta.col(c) = p.theta.col(c) / scale[c];
      out.theta.col(0) -= out.theta.col(c) * mean[c];
    }
    return out;
  }
};

/// Pooled design matrix: row i is q(x_i), in population-major pooled order.
inline Mat basis_matrix(const MultiSample& ms, const Basis& b) {
  validate_basis_domain(ms, b);
  const auto pooled = ms.pooled();
  Mat Q(static_cast<Eigen::Index>(pooled.size()), static_cast<Eigen::Index>(b.dim()));
  std::vector<double> row(b.dim());
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    b.eval(pooled[i], row);
    for (std::size_t c = 0; c < b.dim(); ++c) Q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
  }
  return Q;
}

/// Evaluates D and its analytic derivatives for fixed data, basis columns and
/// quantile constraints. The xi values can be changed without rebuilding.
class DualSystem {
 public:
  enum class Order { value, gradient, hessian };

  struct Eval {
    double value = 0.0;
    Vec grad;
    Mat hess;
  };

  DualSystem(const MultiSample& ms, const Mat& Q, std::span<const QuantileSpec> specs)
      : n_(ms.total()),
        m_(ms.m()),
        d_(static_cast<std::size_t>(Q.cols())),
        l_(specs.size()),
        x_(ms.pooled()),
        labels_(ms.labels()),
        Q_(Q) {
    if (static_cast<std::size_t>(Q.rows()) != n_) throw ValidationError("design matrix rows != total sample size");
    rho_.resize(m_ + 1);
    log_rho_.resize(m_ + 1);
    for (std::size_t k = 0; k <= m_; ++k) {
      rho_[k] = ms.rho(k);
      log_rho_[k] = std::log(rho_[k]);
    }
    spec_pop_.resize(l_);
    tau_.resize(l_);
    xi_.assign(l_, std::numeric_limits<double>::quiet_NaN());
    indicator_ = Mat::Zero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(l_));
    for (std::size_t s = 0; s < l_; ++s) {
      if (specs[s].population > m_) throw ValidationError("spec population out of range");
      spec_pop_[s] = specs[s].population;
      tau_[s] = specs[s].tau;
      set_xi(s, specs[s].xi.value_or(std::numeric_limits<double>::infinity()));
    }
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t m() const noexcept { return m_; }
  std::size_t d() const noexcept { return d_; }
  std::size_t l() const noexcept { return l_; }
  std::size_t dim() const noexcept { return l_ + m_ * d_; }
  double xi(std::size_t s) const { return xi_[s]; }

  /// Stores 1(x_i <= xi) - tau_s for every pooled point.
  void set_xi(std::size_t s, double xi) {
    xi_[s] = xi;
    for (std::size_t i = 0; i < n_; ++i)
      indicator_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = (x_[i] <= xi ? 1.0 : 0.0) - tau_[s];
  }

  void set_xi(std::span<const double> xi) {
    for (std::size_t s = 0; s < xi.size(); ++s) set_xi(s, xi[s]);
  }

  /// Returns nullopt when some 1 + lambda^T psi(x_i) <= 0.
  ///
  /// Per point, with z = (1 - C) w + S (S_t = sum of c_s over specs on
  /// population t, C = sum_s c_s, c_s = lambda_s psi_s / u):
  ///   dD/deta = e_k - z,  d2D/deta2 = -diag(z) + z z^T,
  ///   d2D/dlambda_s deta_t = (psi_s / u)(z_t - 1(r_s = t)),
  ///   d2D/dlambda2 = psi psi^T / u^2.
  std::optional<Eval> evaluate(const Vec& x, Order order) const {
    const auto n = static_cast<Eigen::Index>(n_), m = static_cast<Eigen::Index>(m_),
               d = static_cast<Eigen::Index>(d_), l = static_cast<Eigen::Index>(l_);
    const auto p = static_cast<Eigen::Index>(dim());
    Eval ev;
    const Eigen::Map<const Vec> lam(x.data(), l);
    const Eigen::Map<const Mat> theta(x.data() + l, m, d);

    // a(i, t) = log rho_t + theta_t^T q_i, t = 0..m
    Mat a(n, m + 1);
    a.col(0).setConstant(log_rho_[0]);
    if (m > 0) a.rightCols(m).noalias() = Q_ * theta.transpose();
    double eta_sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (labels_[static_cast<std::size_t>(i)] > 0) eta_sum += a(i, static_cast<Eigen::Index>(labels_[static_cast<std::size_t>(i)]));
    for (Eigen::Index t = 0; t <= m; ++t) a.col(t).array() += t > 0 ? log_rho_[static_cast<std::size_t>(t)] : 0.0;
    const Vec amax = a.rowwise().maxCoeff();
    Mat w = (a.colwise() - amax).array().exp().matrix();
    const Vec sum = w.rowwise().sum();
    const Vec lse = amax.array() + sum.array().log();
    w.array().colwise() /= sum.array();

    Mat psi(n, l);
    for (Eigen::Index s = 0; s < l; ++s) {
      const auto r = static_cast<Eigen::Index>(spec_pop_[static_cast<std::size_t>(s)]);
      psi.col(s) = indicator_.col(s).cwiseProduct(w.col(r)) / rho_[static_cast<std::size_t>(r)];
    }
    Vec u = Vec::Ones(n);
    if (l > 0) u.noalias() += psi * lam;
    if (!(u.minCoeff() > 0.0) || !u.allFinite()) return std::nullopt;
    ev.value = eta_sum - lse.sum() - u.array().log().sum();
    if (order == Order::value) return ev;

    const Mat P = psi.array().colwise() / u.array();  // psi_s / u
    Mat z = w.rightCols(m);
    if (l > 0) {
      const Vec C = P * lam;
      z.array().colwise() *= (1.0 - C.array());
      for (Eigen::Index s = 0; s < l; ++s) {
        const auto r = static_cast<Eigen::Index>(spec_pop_[static_cast<std::size_t>(s)]);
        if (r > 0) z.col(r - 1) += lam[s] * P.col(s);
      }
    }
    Mat ge = -z;  // dD/deta
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<Eigen::Index>(labels_[static_cast<std::size_t>(i)]);
      if (k > 0) ge(i, k - 1) += 1.0;
    }
    ev.grad.resize(p);
    if (l > 0) ev.grad.head(l) = -P.colwise().sum().transpose();
    if (m > 0) {
      const Mat gt = ge.transpose() * Q_;  // m x d, column-major matches flat theta
      ev.grad.tail(m * d) = Eigen::Map<const Vec>(gt.data(), m * d);
    }
    if (order == Order::gradient) return ev;

    ev.hess.resize(p, p);
    if (l > 0) ev.hess.topLeftCorner(l, l).noalias() = P.transpose() * P;
    for (Eigen::Index s = 0; s < l && m > 0; ++s) {
      const auto r = static_cast<Eigen::Index>(spec_pop_[static_cast<std::size_t>(s)]);
      Mat e = z;
      if (r > 0) e.col(r - 1).array() -= 1.0;
      e.array().colwise() *= P.col(s).array();
      const Mat blk = e.transpose() * Q_;  // m x d
      ev.hess.block(s, l, 1, m * d) = Eigen::Map<const Vec>(blk.data(), m * d).transpose();
    }
    if (m > 0) {
      // z z^T (x) q q^T via rows R_i[c m + t] = z_t q_c
      Mat R(n, m * d);
      for (Eigen::Index c = 0; c < d; ++c) R.middleCols(c * m, m) = z.array().colwise() * Q_.col(c).array();
      auto tt = ev.hess.bottomRightCorner(m * d, m * d);
      tt.setZero();
      tt.selfadjointView<Eigen::Lower>().rankUpdate(R.transpose());
      tt = Mat(tt.selfadjointView<Eigen::Lower>());
      // -diag(z) (x) q q^T
      for (Eigen::Index t = 0; t < m; ++t) {
        const Mat qzq = Q_.transpose() * (Q_.array().colwise() * z.col(t).array()).matrix();
        for (Eigen::Index c = 0; c < d; ++c)
          for (Eigen::Index c2 = 0; c2 < d; ++c2) tt(c * m + t, c2 * m + t) -= qzq(c, c2);
      }
    }
    if (l > 0 && m > 0) ev.hess.bottomLeftCorner(m * d, l) = ev.hess.topRightCorner(l, m * d).transpose();
    return ev;
  }

  bool feasible(const Vec& x) const {
    if (l_ == 0) return x.allFinite();
    return evaluate(x, Order::value).has_value();
  }

  /// p_i = 1 / (n hbar(x_i) (1 + lambda^T psi(x_i))).
  Vec weights(const Vec& x) const {
    Vec p(static_cast<Eigen::Index>(n_));
    const double* lam = x.data();
    const double* th = x.data() + l_;
    std::vector<double> a(m_ + 1);
    for (std::size_t i = 0; i < n_; ++i) {
      a[0] = log_rho_[0];
      double amax = a[0];
      for (std::size_t t = 1; t <= m_; ++t) {
        double eta = 0.0;
        for (std::size_t c = 0; c < d_; ++c) eta += th[c * m_ + t - 1] * Q_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
        a[t] = log_rho_[t] + eta;
        amax = std::max(amax, a[t]);
      }
      double sum = 0.0;
      for (std::size_t t = 0; t <= m_; ++t) sum += std::exp(a[t] - amax);
      const double lse = amax + std::log(sum);
      double u = 1.0;
      for (std::size_t s = 0; s < l_; ++s) {
        const std::size_t r = spec_pop_[s];
        u += lam[s] * indicator_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) * std::exp(a[r] - lse) / rho_[r];
      }
      p[static_cast<Eigen::Index>(i)] = 1.0 / (static_cast<double>(n_) * std::exp(lse) * u);
    }
    return p;
  }

  std::span<const double> pooled_x() const noexcept { return x_; }
  std::span<const std::size_t> labels() const noexcept { return labels_; }
  std::size_t spec_population(std::size_t s) const { return spec_pop_[s]; }
  double tau(std::size_t s) const { return tau_[s]; }

 private:
  std::size_t n_, m_, d_, l_;
  std::vector<double> x_;
  std::vector<std::size_t> labels_;
  Mat Q_;  // n x d
  std::vector<double> rho_, log_rho_;
  std::vector<std::size_t> spec_pop_;
  std::vector<double> tau_, xi_;
  Mat indicator_;  // n x l: 1(x_i <= xi_s) - tau_s
};

// ---------------------------------------------------------------------------
// Pointwise mixture quantities
// ---------------------------------------------------------------------------

/// log hbar(x, theta) = log sum_r rho_r exp(theta_r^T q(x)), via log-sum-exp.
inline double log_hbar(const MultiSample& ms, const Basis& b, const DrmParams& theta, double x) {
  const Vec q = b.eval(x);
  double amax = -std::numeric_limits<double>::infinity();
  std::vector<double> a(ms.populations());
  for (std::size_t r = 0; r < ms.populations(); ++r) {
    a[r] = std::log(ms.rho(r)) + theta.eta(r, q);
    amax = std::max(amax, a[r]);
  }
  double sum = 0.0;
  for (double v : a) sum += std::exp(v - amax);
  return amax + std::log(sum);
}

/// hbar itself; overflows to +inf only when hbar exceeds the double range.
inline double hbar(const MultiSample& ms, const Basis& b, const DrmParams& theta, double x) {
  return std::exp(log_hbar(ms, b, theta, x));
}

namespace detail {

inline Vec checked_eval_grad(const DualSystem& sys, const DualPoint& pt, DualSystem::Order order, Mat* hess,
                             double* value) {
  auto ev = sys.evaluate(pt.flat(), order);
  if (!ev) throw InfeasibleError("dual point infeasible: some weight denominator is not positive");
  if (value) *value = ev->value;
  if (hess) *hess = std::move(ev->hess);
  return std::move(ev->grad);
}

inline void check_point_shape(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                              const DualPoint& pt) {
  if (pt.theta.m() != ms.m() || pt.theta.d() != b.dim() ||
      static_cast<std::size_t>(pt.lambda.size()) != specs.size())
    throw ValidationError("dual point dimensions do not match data/basis/specs");
}

}  // namespace detail

inline double dual_value(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                         const DualPoint& pt) {
  detail::check_point_shape(ms, b, specs, pt);
  DualSystem sys(ms, basis_matrix(ms, b), specs);
  double v = 0.0;
  detail::checked_eval_grad(sys, pt, DualSystem::Order::value, nullptr, &v);
  return v;
}

inline Vec dual_gradient(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                         const DualPoint& pt) {
  detail::check_point_shape(ms, b, specs, pt);
  DualSystem sys(ms, basis_matrix(ms, b), specs);
  return detail::checked_eval_grad(sys, pt, DualSystem::Order::gradient, nullptr, nullptr);
}

inline Mat dual_hessian(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                        const DualPoint& pt) {
  detail::check_point_shape(ms, b, specs, pt);
  DualSystem sys(ms, basis_matrix(ms, b), specs);
  Mat H;
  detail::checked_eval_grad(sys, pt, DualSystem::Order::hessian, &H, nullptr);
  return H;
}

// ---------------------------------------------------------------------------
// Unconstrained fit
// ---------------------------------------------------------------------------

struct FitOptions {
  SolveOptions solve{};
  bool diagnostics = true;  // info matrix and its condition number
  double condition_warn = 1e12;
};

struct DrmFit {
  DrmParams theta_hat;
  double log_el = 0.0;  // sup l_n = D(0, theta_hat) - n log n
  double dual_value = 0.0;
  Vec weights;          // p_kj in pooled order
  Mat info_matrix;      // (1/n) d^2 D / d theta d theta^T at (0, theta_hat)
  double info_condition = 0.0;
  double moment_min_eigenvalue = 0.0;  // of the scaled pooled sum q q^T / n
  std::vector<std::string> warnings;
  SolveReport report;
};

namespace detail {

/// Checks that the pooled second-moment matrix of the (scaled) basis is
/// positive definite; returns its smallest eigenvalue.
inline double check_moment_matrix(const Mat& Qs) {
  const Mat M = Qs.transpose() * Qs / static_cast<double>(Qs.rows());
  Eigen::SelfAdjointEigenSolver<Mat> es(M, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 1e-10 * std::max(1.0, hi)))
    throw SolverError("basis moment matrix is not positive definite (smallest eigenvalue " + std::to_string(lo) +
                      "); basis components are collinear on this data");
  return lo;
}

}  // namespace detail

/// Maximum EL fit without quantile constraints: solves dD(0, theta)/dtheta = 0
/// from theta = 0 on the scaled basis.
inline DrmFit fit_unconstrained(const MultiSample& ms, const Basis& b, const FitOptions& opts = {}) {
  const Mat Q = basis_matrix(ms, b);
  const BasisScaling scaling = BasisScaling::fit(Q);
  const Mat Qs = scaling.apply(Q);
  DrmFit fit;
  fit.moment_min_eigenvalue = detail::check_moment_matrix(Qs);

  const std::size_t m = ms.m(), d = b.dim();
  const double n = static_cast<double>(ms.total());
  DualSystem sys(ms, Qs, {});
  Vec x0 = Vec::Zero(static_cast<Eigen::Index>(m * d));
  if (m > 0) {
    NonlinearSystem ns;
    ns.residual = [&](const Vec& x) { return sys.evaluate(x, DualSystem::Order::gradient)->grad; };
    ns.jacobian = [&](const Vec& x) { return sys.evaluate(x, DualSystem::Order::hessian)->hess; };
    fit.report = solve_system(ns, x0, opts.solve);
    if (!fit.report.converged)
      throw SolverError("unconstrained DRM fit did not converge (residual " +
                        std::to_string(fit.report.residual_norm) + ")");
  } else {
    fit.report.root = x0;
    fit.report.converged = true;
    fit.report.residual_norm = 0.0;
  }
  const Vec& xs = fit.report.root;
  fit.dual_value = sys.evaluate(xs, DualSystem::Order::value)->value;
  fit.log_el = fit.dual_value - n * std::log(n);
  fit.weights = sys.weights(xs);
  fit.theta_hat = scaling.to_original(DrmParams::from_flat(xs, m, d));
  fit.report.root = fit.theta_hat.flat();

  if (opts.diagnostics && m > 0) {
    DualSystem raw(ms, Q, {});
    fit.info_matrix = raw.evaluate(fit.theta_hat.flat(), DualSystem::Order::hessian)->hess / n;
    Eigen::JacobiSVD<Mat> svd(fit.info_matrix);
    const auto& sv = svd.singularValues();
    fit.info_condition = sv.minCoeff() > 0 ? sv.maxCoeff() / sv.minCoeff() : std::numeric_limits<double>::infinity();
    if (fit.info_condition > opts.condition_warn)
      fit.warnings.push_back("information matrix condition number " + std::to_string(fit.info_condition) +
                             " exceeds " + std::to_string(opts.condition_warn));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Fitted CDFs and MELE quantiles
// ---------------------------------------------------------------------------

/// Right-continuous step function over the distinct pooled observations.
struct FittedCdf {
  std::size_t population = 0;
  std::vector<double> jumps;       // sorted distinct pooled values
  std::vector<double> cumulative;  // G(jumps[i])

  double operator()(double x) const {
    const auto it = std::upper_bound(jumps.begin(), jumps.end(), x);
    if (it == jumps.begin()) return 0.0;
    return cumulative[static_cast<std::size_t>(it - jumps.begin()) - 1];
  }
  double terminal() const { return cumulative.empty() ? 0.0 : cumulative.back(); }
};

/// G_r(x) = sum_i p_i h_r(x_i) 1(x_i <= x) for arbitrary weights and theta.
inline FittedCdf weighted_cdf(const MultiSample& ms, const Basis& b, const DrmParams& theta, const Vec& weights,
                              std::size_t r) {
  if (r > ms.m()) throw ValidationError("population index out of range");
  const auto x = ms.pooled();
  if (static_cast<std::size_t>(weights.size()) != x.size()) throw ValidationError("weights size mismatch");
  std::vector<std::pair<double, double>> pm(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double eta = theta.eta(r, b.eval(x[i]));
    pm[i] = {x[i], std::exp(std::log(weights[static_cast<Eigen::Index>(i)]) + eta)};
  }
  std::sort(pm.begin(), pm.end());
  FittedCdf fc;
  fc.population = r;
  double cum = 0.0;
  for (const auto& [xv, mass] : pm) {
    cum += mass;
    if (!fc.jumps.empty() && fc.jumps.back() == xv) {
      fc.cumulative.back() = cum;
    } else {
      fc.jumps.push_back(xv);
      fc.cumulative.push_back(cum);
    }
  }
  return fc;
}

inline FittedCdf fitted_cdf(const DrmFit& fit, const MultiSample& ms, const Basis& b, std::size_t r) {
  return weighted_cdf(ms, b, fit.theta_hat, fit.weights, r);
}

/// Cumulative sums are compared against tau with this slack so that exact
/// rational levels (k/n) are not lost to rounding.
inline constexpr double kQuantileSlack = 1e-10;

/// inf{x : G(x) >= tau} over the jump points.
inline double mele_quantile(const FittedCdf& fc, double tau) {
  if (!(tau > 0 && tau < 1)) throw ValidationError("tau must lie in (0,1)");
  for (std::size_t i = 0; i < fc.jumps.size(); ++i)
    if (fc.cumulative[i] >= tau - kQuantileSlack) return fc.jumps[i];
  return fc.jumps.back();
}

inline Vec mele_quantiles(const DrmFit& fit, const MultiSample& ms, const Basis& b,
                          std::span<const QuantileSpec> specs) {
  Vec out(static_cast<Eigen::Index>(specs.size()));
  for (std::size_t s = 0; s < specs.size(); ++s)
    out[static_cast<Eigen::Index>(s)] = mele_quantile(fitted_cdf(fit, ms, b, specs[s].population), specs[s].tau);
  return out;
}

}  // namespace drmel

#pragma once

// Numerical kernels: a damped Newton solver for square nonlinear systems with
// a Broyden fallback, the chi-square distribution, and a finite-difference
// gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>

#include <Eigen/Dense>

#include "drmel/model.hpp"

namespace drmel {

struct SolveOptions {
  double residual_tol = 1e-10;  // on the max-norm of the system
  int max_iter = 200;
  int step_halving_max = 40;
  bool fd_jacobian = true;      // finite differences when no analytic Jacobian
};

struct SolveReport {
  Vec root;
  double residual_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// Square system F: R^p -> R^p. `jacobian` and `feasible` may be empty.
/// `residual` may throw InfeasibleError, which is treated like a rejected point.
struct NonlinearSystem {
  std::function<Vec(const Vec&)> residual;
  std::function<Mat(const Vec&)> jacobian;
  std::function<bool(const Vec&)> feasible;
};

namespace detail {

inline Mat fd_jacobian(const NonlinearSystem& sys, const Vec& x, const Vec& fx) {
  const auto p = x.size();
  Mat J(fx.size(), p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double h = 1e-7 * std::max(1.0, std::abs(x[j]));
    Vec xp = x;
    xp[j] += h;
    if (sys.feasible && !sys.feasible(xp)) {
      xp[j] = x[j] - h;
      J.col(j) = (fx - sys.residual(xp)) / h;
    } else {
      J.col(j) = (sys.residual(xp) - fx) / h;
    }
  }
  return J;
}

/// Solves J p = -f. Falls back to (J + mu I) with mu growing x10 up to 1e-2
/// (relative to the Jacobian scale). Returns nullopt when all attempts fail.
inline std::optional<Vec> newton_step(const Mat& J, const Vec& f) {
  const auto finite = [](const Vec& v) { return v.allFinite(); };
  Eigen::FullPivLU<Mat> lu(J);
  if (lu.isInvertible()) {
    Vec p = lu.solve(-f);
    if (finite(p)) return p;
  }
  const double scale = std::max(1.0, J.cwiseAbs().maxCoeff());
  for (double mu = 1e-8; mu <= 1e-2 * (1 + 1e-12); mu *= 10) {
    Mat Jr = J;
    Jr.diagonal().array() += mu * scale;
    Eigen::FullPivLU<Mat> lur(Jr);
    if (!lur.isInvertible()) continue;
    Vec p = lur.solve(-f);
    if (finite(p)) return p;
  }
  return std::nullopt;
}

}  // namespace detail

/// Damped Newton iteration on F(x) = 0 with step halving on the merit
/// 0.5 |F|^2. Rejects iterates failing `feasible`. When the analytic Jacobian
/// throws, the previous Jacobian is updated by a Broyden rank-one correction.
///
/// Throws SolverError when the Jacobian stays singular after regularisation
/// or when no feasible trial point is found within step_halving_max halvings.
inline SolveReport solve_system(const NonlinearSystem& sys, Vec x0, const SolveOptions& opts = {}) {
  if (!(opts.residual_tol > 0) || opts.max_iter < 1) throw ValidationError("invalid solve options");
  if (!x0.allFinite()) throw ValidationError("non-finite starting point");
  if (sys.feasible && !sys.feasible(x0)) throw InfeasibleError("starting point is infeasible");

  SolveReport rep;
  Vec x = std::move(x0);
  Vec f = sys.residual(x);
  if (!f.allFinite()) throw SolverError("non-finite residual at starting point");
  double merit = 0.5 * f.squaredNorm();
  rep.residual_norm = f.cwiseAbs().maxCoeff();

  Mat J;
  bool have_j = false;
  Vec last_step, last_df;

  for (int it = 0; it < opts.max_iter; ++it) {
    if (rep.residual_norm <= opts.residual_tol) {
      rep.converged = true;
      break;
    }
    rep.iterations = it + 1;

    bool analytic_ok = false;
    if (sys.jacobian) {
      try {
        Mat Jn = sys.jacobian(x);
        if (Jn.allFinite()) {
          J = std::move(Jn);
          analytic_ok = true;
        }
      } catch (const Error&) {
      }
    }
    if (!analytic_ok) {
      const bool can_update = have_j && last_step.size() > 0 && last_step.squaredNorm() > 0;
      const bool prefer_fd = !sys.jacobian && opts.fd_jacobian;
      if (can_update && !prefer_fd) {
        // Broyden: J += (df - J s) s^T / (s^T s)
        J += (last_df - J * last_step) * last_step.transpose() / last_step.squaredNorm();
      } else {
        J = detail::fd_jacobian(sys, x, f);
      }
    }
    have_j = true;

    auto step = detail::newton_step(J, f);
    if (!step) throw SolverError("singular Jacobian after regularisation");
    const Vec& p = *step;

    double t = 1.0;
    bool accepted = false;
    bool any_feasible = false;
    Vec best_x, best_f;
    double best_merit = merit;
    for (int h = 0; h <= opts.step_halving_max; ++h, t *= 0.5) {
      Vec xt = x + t * p;
      if (sys.feasible && !sys.feasible(xt)) continue;
      Vec ft;
      try {
        ft = sys.residual(xt);
      } catch (const InfeasibleError&) {
        continue;
      }
      if (!ft.allFinite()) continue;
      any_feasible = true;
      const double mt = 0.5 * ft.squaredNorm();
      if (mt <= (1.0 - 2e-4 * t) * merit) {
        best_x = std::move(xt);
        best_f = std::move(ft);
        best_merit = mt;
        accepted = true;
        break;
      }
      if (mt < best_merit) {
        best_merit = mt;
        best_x = std::move(xt);
        best_f = std::move(ft);
      }
    }
    if (!any_feasible) throw InfeasibleError("feasibility not restored within step-halving limit");
    if (!accepted && best_x.size() == 0) break;  // stalled: no decrease at all

    last_step = best_x - x;
    last_df = best_f - f;
    x = std::move(best_x);
    f = std::move(best_f);
    merit = best_merit;
    rep.residual_norm = f.cwiseAbs().maxCoeff();
  }
  if (rep.residual_norm <= opts.residual_tol) rep.converged = true;
  rep.root = std::move(x);
  return rep;
}

// ---------------------------------------------------------------------------
// Incomplete gamma and chi-square
// ---------------------------------------------------------------------------

/// Regularised lower incomplete gamma P(a, x): series for x < a+1, continued
/// fraction (modified Lentz) otherwise.
inline double regularized_gamma_p(double a, double x) {
  if (!(a > 0)) throw ValidationError("gamma shape must be positive");
  if (!(x > 0)) return 0.0;
  if (std::isinf(x)) return 1.0;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double term = 1.0 / a;
    double sum = term;
    for (int n = 0; n < 10000; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-17) break;
    }
    return std::min(1.0, sum * std::exp(log_prefix));
  }
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-17) break;
  }
  return std::max(0.0, 1.0 - std::exp(log_prefix) * h);
}

inline double gamma_log_pdf(double a, double x) {
  return (a - 1.0) * std::log(x) - x - std::lgamma(a);
}

/// x with P(a, x) = p: monotone bracketing, then safeguarded Newton.
inline double invert_regularized_gamma_p(double a, double p, double tol = 1e-14) {
  if (!(p > 0 && p < 1)) throw ValidationError("probability must lie in (0,1)");
  double lo = 0.0;
  double hi = std::max(1.0, a);
  while (regularized_gamma_p(a, hi) < p) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e300) throw SolverError("gamma quantile bracket not found");
  }
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 300; ++it) {
    const double fx = regularized_gamma_p(a, x) - p;
    if (fx == 0.0) return x;
    if (fx < 0) lo = x; else hi = x;
    const double dens = x > 0 ? std::exp(gamma_log_pdf(a, x)) : 0.0;
    double next = dens > 0 ? x - fx / dens : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= tol * std::max(1.0, x) || hi - lo <= tol * std::max(1.0, x)) return next;
    x = next;
  }
  return x;
}

/// P(chi^2_df <= x).
inline double chisq_cdf(int df, double x) {
  if (df < 1) throw ValidationError("chi-square df must be positive");
  if (!(x > 0)) return 0.0;
  return regularized_gamma_p(0.5 * df, 0.5 * x);
}

inline double chisq_pdf(int df, double x) {
  if (!(x > 0)) return 0.0;
  return 0.5 * std::exp(gamma_log_pdf(0.5 * df, 0.5 * x));
}

inline double chisq_quantile(int df, double p) {
  if (df < 1) throw ValidationError("chi-square df must be positive");
  return 2.0 * invert_regularized_gamma_p(0.5 * df, p);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// max_i |central difference_i - g_i| / (1 + |g_i|).
inline double check_gradient(const std::function<double(const Vec&)>& f,
                             const std::function<Vec(const Vec&)>& g, const Vec& x, double h) {
  const Vec gx = g(x);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (f(xp) - f(xm)) / (2 * h);
    worst = std::max(worst, std::abs(fd - gx[i]) / (1.0 + std::abs(gx[i])));
  }
  return worst;
}

}  // namespace drmel

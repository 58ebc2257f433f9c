#pragma once

// Profile log-EL under quantile constraints, the ELRT statistic
//   R_n = 2 [ sup l_n - profile l_n(xi*) ]
// with chi-square calibration, and ELRT confidence regions
//   { xi : R_n(xi) <= chi2_l(1 - alpha) }
// evaluated on rectangular grids.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "drmel/el_core.hpp"
#include "drmel/model.hpp"
#include "drmel/solver.hpp"
#include "drmel/wald_np.hpp"

namespace drmel {

struct ProfileOptions {
  SolveOptions solve{};
  FitOptions fit{};
  RangeRule range = RangeRule::own;
  /// R_n values in [-slack, 0) are clamped to 0; anything lower means the
  /// solver did not reach the saddle point.
  double negative_slack = 1e-8;
};

struct ProfileSolution {
  DualPoint point;               // (lambda_hat, theta_hat), original basis
  double profile_log_el = 0.0;   // D(lambda_hat, theta_hat) - n log n
  Vec constrained_weights;       // pooled order
  SolveReport report;
};

struct TestResult {
  double r_n = 0.0;
  int df = 0;
  double p_value = 1.0;
  bool converged = false;
};

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

/// One population's starting theta_r from the intermediate-value argument:
/// with uniform weights 1/n on the pooled data and the monotone component
/// q_j, find t with A(t)/B(t) = tau/(1 - tau), where
///   A(t) = (1/n) sum_{x_i <= xi} exp(t [q_j(x_i) - q_j(xi)]),
///   B(t) = (1/n) sum_{x_i >  xi} exp(t [q_j(x_i) - q_j(xi)]),
/// then set theta_r1 = -log(A + B) (shifted back by t q_j(xi)).
struct StartRow {
  Vec theta;     // length d
  double slope;  // t
  double log_a;
  double log_b;
};

inline StartRow start_row(std::span<const double> pooled, const Basis& b, std::size_t j, double xi, double tau) {
  const auto& comp = b.components()[j];
  const double qxi = comp(xi);
  std::vector<double> below, above;
  for (double x : pooled) (x <= xi ? below : above).push_back(comp(x) - qxi);
  if (below.empty() || above.empty())
    throw ValidationError("quantile value does not split the pooled data");
  const double log_n = std::log(static_cast<double>(pooled.size()));
  std::vector<double> buf;
  auto log_side = [&](const std::vector<double>& diffs, double t) {
    buf.resize(diffs.size());
    for (std::size_t i = 0; i < diffs.size(); ++i) buf[i] = t * diffs[i];
    return log_sum_exp(buf) - log_n;
  };
  const double target = std::log(tau / (1 - tau));
  auto f = [&](double t) { return log_side(below, t) - log_side(above, t) - target; };

  double lo = -1.0, hi = 1.0;
  double flo = f(lo), fhi = f(hi);
  int doublings = 0;
  while ((flo > 0) == (fhi > 0)) {
    if (++doublings > 60) throw SolverError("initialisation bracket not found after 60 doublings");
    lo *= 2;
    hi *= 2;
    flo = f(lo);
    fhi = f(hi);
  }
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo)); ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0) {
      lo = hi = mid;
      break;
    }
    if ((fm > 0) == (flo > 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  StartRow row;
  row.slope = 0.5 * (lo + hi);
  row.log_a = log_side(below, row.slope);
  row.log_b = log_side(above, row.slope);
  const double hi_ab = std::max(row.log_a, row.log_b), lo_ab = std::min(row.log_a, row.log_b);
  const double lab = hi_ab + std::log1p(std::exp(lo_ab - hi_ab));
  row.theta = Vec::Zero(static_cast<Eigen::Index>(b.dim()));
  row.theta[0] = -lab - row.slope * qxi;
  row.theta[static_cast<Eigen::Index>(j)] = row.slope;
  return row;
}

}  // namespace detail

/// Feasible starting point: lambda = 0; constrained populations get the
/// intermediate-value construction, the rest keep the unconstrained theta_hat.
inline DualPoint init_profile(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                              const DrmFit& fit) {
  validate_specs(ms, specs);
  const auto j = b.monotone_component(ms.pooled_min(), ms.pooled_max());
  if (!j) throw ValidationError("basis " + b.to_string() + " has no component monotone over the data range");
  const auto pooled = ms.pooled();
  const std::size_t m = ms.m(), d = b.dim();

  std::vector<std::optional<Vec>> rows(m + 1);
  for (const auto& s : specs) {
    if (!s.xi) throw ValidationError("spec without xi");
    if (rows[s.population]) continue;  // first spec of a population wins
    rows[s.population] = detail::start_row(pooled, b, *j, *s.xi, s.tau).theta;
  }
  DualPoint pt;
  pt.lambda = Vec::Zero(static_cast<Eigen::Index>(specs.size()));
  pt.theta = fit.theta_hat.m() == m ? fit.theta_hat : DrmParams(m, d);
  const Vec shift = rows[0] ? *rows[0] : Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t r = 1; r <= m; ++r)
    if (rows[r]) pt.theta.theta.row(static_cast<Eigen::Index>(r - 1)) = (*rows[r] - shift).transpose();
  return pt;
}

inline DualPoint init_profile(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs) {
  return init_profile(ms, b, specs, fit_unconstrained(ms, b, FitOptions{.solve = {}, .diagnostics = false}));
}

// ---------------------------------------------------------------------------
// Profile engine
// ---------------------------------------------------------------------------

/// Holds one dataset's unconstrained fit and a dual system whose xi values
/// can be moved, so many hypotheses (grid points) can be solved cheaply.
/// Not thread-safe; copy one per worker.
class ProfileEngine {
 public:
  struct Result {
    bool admissible = true;
    bool converged = false;
    double r_n = std::numeric_limits<double>::quiet_NaN();
    double dual = std::numeric_limits<double>::quiet_NaN();
    Vec x;  // (lambda, theta) on the scaled basis
    SolveReport report;
  };

  ProfileEngine(const MultiSample& ms, const Basis& b, std::vector<QuantileSpec> specs, ProfileOptions opts = {},
                std::optional<DrmFit> fit = std::nullopt)
      : ms_(&ms),
        basis_(b),
        specs_(std::move(specs)),
        opts_(opts),
        fit_(fit ? std::move(*fit) : fit_unconstrained(ms, b, opts.fit)),
        scaling_(BasisScaling::fit(basis_matrix(ms, b))),
        sys_(ms, scaling_.apply(basis_matrix(ms, b)), specs_) {
    validate_specs(ms, specs_);
    DualPoint start;
    start.lambda = Vec::Zero(static_cast<Eigen::Index>(specs_.size()));
    start.theta = scaling_.to_scaled(fit_.theta_hat);
    unconstrained_start_ = start.flat();
    unconstrained_dual_ = fit_.dual_value;
  }

  const MultiSample& data() const { return *ms_; }
  const Basis& basis() const { return basis_; }
  const std::vector<QuantileSpec>& specs() const { return specs_; }
  const DrmFit& fit() const { return fit_; }
  const ProfileOptions& options() const { return opts_; }
  const BasisScaling& scaling() const { return scaling_; }
  double unconstrained_dual() const { return unconstrained_dual_; }

  Vec mele() const { return mele_quantiles(fit_, *ms_, basis_, specs_); }

  bool admissible(std::span<const double> xi) const {
    for (std::size_t s = 0; s < specs_.size(); ++s)
      if (!quantile_value_admissible(*ms_, specs_[s].population, xi[s], opts_.range)) return false;
    return true;
  }

  /// Solves the saddle-point system at xi. Tries `warm` first, then the
  /// intermediate-value start, then (0, theta_hat).
  Result solve(std::span<const double> xi, const Vec* warm = nullptr) {
    Result res;
    if (xi.size() != specs_.size()) throw ValidationError("xi dimension mismatch");
    if (!admissible(xi)) {
      res.admissible = false;
      return res;
    }
    sys_.set_xi(xi);

    NonlinearSystem ns;
    ns.residual = [this](const Vec& x) {
      auto ev = sys_.evaluate(x, DualSystem::Order::gradient);
      if (!ev) throw InfeasibleError("infeasible dual point");
      cache_x_ = x;
      cache_value_ = ev->value;
      return std::move(ev->grad);
    };
    ns.jacobian = [this](const Vec& x) {
      auto ev = sys_.evaluate(x, DualSystem::Order::hessian);
      if (!ev) throw InfeasibleError("infeasible dual point");
      return std::move(ev->hess);
    };

    auto attempt = [&](const Vec& x0) -> bool {
      try {
        SolveReport rep = solve_system(ns, x0, opts_.solve);
        res.report = rep;
        if (!rep.converged) return false;
        const bool cached = cache_x_.size() == rep.root.size() && (cache_x_.array() == rep.root.array()).all();
        const double dual = cached ? cache_value_ : sys_.evaluate(rep.root, DualSystem::Order::value)->value;
        double rn = 2.0 * (unconstrained_dual_ - dual);
        if (rn < -opts_.negative_slack) return false;
        res.converged = true;
        res.r_n = std::max(0.0, rn);
        res.dual = dual;
        res.x = std::move(rep.root);
        return true;
      } catch (const Error&) {
        return false;
      }
    };

    if (warm && warm->size() == static_cast<Eigen::Index>(sys_.dim()) && attempt(*warm)) return res;
    try {
      std::vector<QuantileSpec> sp = specs_;
      for (std::size_t s = 0; s < sp.size(); ++s) sp[s].xi = xi[s];
      DualPoint init = init_profile(*ms_, basis_, sp, fit_);
      init.theta = scaling_.to_scaled(init.theta);
      if (attempt(init.flat())) return res;
    } catch (const Error&) {
    }
    if (attempt(unconstrained_start_)) return res;
    return res;
  }

  /// Maps a converged result back to the original basis.
  ProfileSolution solution(const Result& r) const {
    if (!r.converged) throw SolverError("profile solve did not converge");
    const std::size_t l = specs_.size(), m = ms_->m(), d = basis_.dim();
    ProfileSolution sol;
    DualPoint scaled = DualPoint::from_flat(r.x, l, m, d);
    sol.point.lambda = scaled.lambda;
    sol.point.theta = scaling_.to_original(scaled.theta);
    const double n = static_cast<double>(ms_->total());
    sol.profile_log_el = r.dual - n * std::log(n);
    sol.constrained_weights = sys_.weights(r.x);
    sol.report = r.report;
    sol.report.root = sol.point.flat();
    return sol;
  }

  /// Current xi of the internal system (after the last solve).
  const DualSystem& system() const { return sys_; }

 private:
  const MultiSample* ms_;
  Basis basis_;
  std::vector<QuantileSpec> specs_;
  ProfileOptions opts_;
  DrmFit fit_;
  BasisScaling scaling_;
  DualSystem sys_;
  Vec unconstrained_start_;
  double unconstrained_dual_ = 0.0;
  Vec cache_x_;  // last point whose gradient was evaluated
  double cache_value_ = 0.0;
};

namespace detail {
inline std::vector<double> spec_xi(std::span<const QuantileSpec> specs) {
  std::vector<double> xi;
  for (const auto& s : specs) {
    if (!s.xi) throw ValidationError("spec for population " + std::to_string(s.population) + " has no xi");
    xi.push_back(*s.xi);
  }
  return xi;
}
}  // namespace detail

inline ProfileSolution profile_log_el(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                                      const ProfileOptions& opts = {}) {
  validate_quantile_values(ms, specs, opts.range);
  ProfileEngine engine(ms, b, {specs.begin(), specs.end()}, opts);
  const auto xi = detail::spec_xi(specs);
  const auto res = engine.solve(xi);
  if (!res.converged) {
    std::string msg = "profile log-EL solve did not converge";
    if (res.report.iterations > 0) msg += " (residual " + std::to_string(res.report.residual_norm) + ")";
    throw SolverError(msg);
  }
  return engine.solution(res);
}

inline TestResult make_test_result(double r_n, int df, bool converged) {
  TestResult t;
  t.r_n = r_n;
  t.df = df;
  t.converged = converged;
  t.p_value = converged ? 1.0 - chisq_cdf(df, r_n) : std::numeric_limits<double>::quiet_NaN();
  return t;
}

inline TestResult elrt_statistic(ProfileEngine& engine, std::span<const double> xi) {
  const auto res = engine.solve(xi);
  if (!res.admissible) throw OutOfRangeError(0, "hypothesised quantile outside the data range");
  return make_test_result(res.r_n, static_cast<int>(xi.size()), res.converged);
}

/// R_n for H0: xi = xi* with the chi-square_l p-value.
inline TestResult elrt_statistic(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                                 const ProfileOptions& opts = {}) {
  validate_quantile_values(ms, specs, opts.range);
  ProfileEngine engine(ms, b, {specs.begin(), specs.end()}, opts);
  const auto xi = detail::spec_xi(specs);
  return elrt_statistic(engine, xi);
}

// ---------------------------------------------------------------------------
// Confidence regions on grids
// ---------------------------------------------------------------------------

struct Box {
  double a_lo = 0, a_hi = 0, b_lo = 0, b_hi = 0;
};

struct RegionOptions {
  std::size_t nx = 101, ny = 101;
  ProfileOptions profile{};
  std::optional<Box> box;       // default: Wald box x2, else MELE +- 4 NP SEs
  std::size_t bootstrap = 300;  // for the default Wald box
  std::uint64_t seed = 0;
  /// Solve only near the row boundaries of each level set, marching outward
  /// from the MELE row. Assumes R_n is unimodal along every row.
  bool trace = false;
  std::vector<double> trace_alphas;  // extra levels traced besides alpha
  std::size_t workers = 1;      // full scans only
  int max_expansions = 2;
  double max_failure_rate = 0.01;
};

/// Cell-centred nx-by-ny lattice over `box`; rn is row-major in xi_b.
struct RegionGrid {
  std::array<QuantileSpec, 2> axes{};
  Box box;
  std::size_t nx = 0, ny = 0;
  std::vector<double> xa, xb;
  std::vector<double> rn;     // NaN where not evaluated, inadmissible or failed
  std::vector<double> bound;  // traced grids: smallest traced level known to contain the cell
  std::vector<double> levels; // traced thresholds (empty for full scans)
  std::vector<char> mask;
  double alpha = 0.05;
  double threshold = 0.0;
  double area = 0.0;
  std::size_t evaluated = 0;
  std::size_t failures = 0;
  std::size_t inadmissible = 0;
  int expansions = 0;
  Vec mele;

  double cell_area() const {
    return (box.a_hi - box.a_lo) / static_cast<double>(nx) * (box.b_hi - box.b_lo) / static_cast<double>(ny);
  }
  double value(std::size_t i, std::size_t j) const { return rn[j * nx + i]; }
  bool included(std::size_t i, std::size_t j) const { return mask[j * nx + i] != 0; }

  /// Same evaluations, different level. On traced grids only the traced
  /// levels are exact.
  RegionGrid at_alpha(double a) const {
    RegionGrid g = *this;
    g.alpha = a;
    g.threshold = chisq_quantile(2, 1.0 - a);
    std::size_t count = 0;
    for (std::size_t k = 0; k < rn.size(); ++k) {
      const bool in = std::isnan(rn[k]) ? bound[k] <= g.threshold : rn[k] <= g.threshold;
      g.mask[k] = in ? 1 : 0;
      count += static_cast<std::size_t>(g.mask[k]);
    }
    g.area = static_cast<double>(count) * cell_area();
    return g;
  }

  bool touches_edge() const {
    for (std::size_t i = 0; i < nx; ++i)
      if (included(i, 0) || included(i, ny - 1)) return true;
    for (std::size_t j = 0; j < ny; ++j)
      if (included(0, j) || included(nx - 1, j)) return true;
    return false;
  }
};

inline Box ellipse_box(const Ellipse& e, double inflate = 2.0) {
  return {e.center[0] - inflate * e.half_width(0), e.center[0] + inflate * e.half_width(0),
          e.center[1] - inflate * e.half_width(1), e.center[1] + inflate * e.half_width(1)};
}

inline Box se_box(const Vec& center, const Mat& cov_over_n, double multiple = 4.0) {
  const double sa = std::sqrt(cov_over_n(0, 0)), sb = std::sqrt(cov_over_n(1, 1));
  return {center[0] - multiple * sa, center[0] + multiple * sa, center[1] - multiple * sb, center[1] + multiple * sb};
}

namespace detail {

inline Box clip_box(const Box& box, const MultiSample& ms, const std::array<QuantileSpec, 2>& axes, RangeRule rule) {
  auto lim = [&](std::size_t r) {
    return rule == RangeRule::own ? std::pair{ms.min(r), ms.max(r)} : std::pair{ms.pooled_min(), ms.pooled_max()};
  };
  const auto [alo, ahi] = lim(axes[0].population);
  const auto [blo, bhi] = lim(axes[1].population);
  Box c{std::max(box.a_lo, alo), std::min(box.a_hi, ahi), std::max(box.b_lo, blo), std::min(box.b_hi, bhi)};
  if (!(c.a_lo < c.a_hi) || !(c.b_lo < c.b_hi)) throw ValidationError("region box lies outside the data range");
  return c;
}

inline Box grow_box(const Box& b, double factor) {
  const double ca = 0.5 * (b.a_lo + b.a_hi), cb = 0.5 * (b.b_lo + b.b_hi);
  const double ha = 0.5 * (b.a_hi - b.a_lo) * factor, hb = 0.5 * (b.b_hi - b.b_lo) * factor;
  return {ca - ha, ca + ha, cb - hb, cb + hb};
}

inline std::size_t cell_index(double lo, double hi, std::size_t n, double v) {
  const double t = (v - lo) / (hi - lo) * static_cast<double>(n);
  if (!(t > 0)) return 0;
  return std::min(n - 1, static_cast<std::size_t>(t));
}

class GridScanner {
 public:
  GridScanner(ProfileEngine& engine, RegionGrid& g)
      : engine_(engine), g_(g), warm_(g.nx * g.ny), done_(g.nx * g.ny, 0) {}

  /// Evaluates cell (i, j) once; returns R_n or NaN.
  double eval(std::size_t i, std::size_t j, const Vec* warm = nullptr) {
    const std::size_t k = j * g_.nx + i;
    if (done_[k]) return g_.rn[k];
    done_[k] = 1;
    if (!warm) warm = nearest_warm(i, j);
    const std::array<double, 2> xi{g_.xa[i], g_.xb[j]};
    auto res = engine_.solve(xi, warm);
    if (!res.admissible) {
      ++g_.inadmissible;
      return g_.rn[k];
    }
    ++g_.evaluated;
    if (!res.converged) {
      ++g_.failures;
      return g_.rn[k];
    }
    g_.rn[k] = res.r_n;
    warm_[k] = std::move(res.x);
    return g_.rn[k];
  }

  void full_rows(std::size_t j0, std::size_t j1) {
    for (std::size_t j = j0; j < j1; ++j)
      for (std::size_t i = 0; i < g_.nx; ++i) eval(i, j);
  }

  /// Traces the row sections of the level sets {R_n <= T} for the sorted
  /// (descending) thresholds, marching outward from the MELE row. Interior
  /// cells are not solved; they get bound = smallest level containing them.
  void trace(std::span<const double> levels) {
    const std::size_t ic = cell_index(g_.box.a_lo, g_.box.a_hi, g_.nx, g_.mele[0]);
    const std::size_t jc = cell_index(g_.box.b_lo, g_.box.b_hi, g_.ny, g_.mele[1]);
    const std::size_t nl = levels.size();
    using Spans = std::vector<std::optional<Span>>;
    auto first = trace_row(jc, ic, 0, g_.nx - 1, levels, Spans(nl));
    if (!first[0]) return;
    for (int dir : {+1, -1}) {
      Spans prev = first;
      for (std::size_t j = jc;;) {
        if (dir > 0 ? j + 1 >= g_.ny : j == 0) break;
        j = dir > 0 ? j + 1 : j - 1;
        const std::size_t hint = (prev[0]->first + prev[0]->second) / 2;
        Spans next = trace_row(j, hint, prev[0]->first, prev[0]->second, levels, prev);
        if (!next[0]) break;
        prev = std::move(next);
      }
    }
  }

 private:
  using Span = std::pair<std::size_t, std::size_t>;

  const Vec* nearest_warm(std::size_t i, std::size_t j) const {
    for (std::size_t rad = 1; rad <= 3; ++rad)
      for (std::ptrdiff_t dj = -static_cast<std::ptrdiff_t>(rad); dj <= static_cast<std::ptrdiff_t>(rad); ++dj)
        for (std::ptrdiff_t di = -static_cast<std::ptrdiff_t>(rad); di <= static_cast<std::ptrdiff_t>(rad); ++di) {
          const auto ii = static_cast<std::ptrdiff_t>(i) + di, jj = static_cast<std::ptrdiff_t>(j) + dj;
          if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(g_.nx) || jj >= static_cast<std::ptrdiff_t>(g_.ny))
            continue;
          const auto& w = warm_[static_cast<std::size_t>(jj) * g_.nx + static_cast<std::size_t>(ii)];
          if (w.size()) return &w;
        }
    return nullptr;
  }

  bool inside(std::size_t i, std::size_t j, double thr) { return eval(i, j) <= thr; }

  /// Leftmost cell of the run of cells <= thr containing `seed`, searched
  /// from `guess` and never below `floor`.
  std::size_t left_edge(std::size_t j, std::size_t seed, std::size_t guess, std::size_t floor, double thr) {
    guess = std::clamp(guess, floor, seed);
    std::size_t i = guess;
    if (inside(i, j, thr)) {
      while (i > floor && inside(i - 1, j, thr)) --i;
      return i;
    }
    while (i < seed && !inside(i + 1, j, thr)) ++i;
    return i + 1;
  }

  std::size_t right_edge(std::size_t j, std::size_t seed, std::size_t guess, std::size_t ceil, double thr) {
    guess = std::clamp(guess, seed, ceil);
    std::size_t i = guess;
    if (inside(i, j, thr)) {
      while (i < ceil && inside(i + 1, j, thr)) ++i;
      return i;
    }
    while (i > seed && !inside(i - 1, j, thr)) --i;
    return i - 1;
  }

  /// A cell <= thr in [lo, hi]: the evaluated minimum if it qualifies, else a
  /// descent along the row from it.
  std::optional<std::size_t> find_seed(std::size_t j, std::size_t hint, std::size_t lo, std::size_t hi, double thr) {
    hint = std::clamp(hint, lo, hi);
    std::optional<std::size_t> best;
    for (std::size_t i = lo; i <= hi; ++i) {
      const double v = g_.rn[j * g_.nx + i];
      if (!std::isnan(v) && (!best || v < g_.rn[j * g_.nx + *best])) best = i;
    }
    if (best && g_.rn[j * g_.nx + *best] <= thr) return best;
    std::size_t c = best ? *best : hint;
    if (!best && inside(c, j, thr)) return c;
    double vc = eval(c, j);
    for (std::size_t steps = 0; steps <= hi - lo; ++steps) {
      const double vl = c > lo ? eval(c - 1, j) : std::numeric_limits<double>::quiet_NaN();
      const double vr = c < hi ? eval(c + 1, j) : std::numeric_limits<double>::quiet_NaN();
      std::size_t nc = c;
      double vn = std::isnan(vc) ? std::numeric_limits<double>::infinity() : vc;
      if (vl < vn) { nc = c - 1; vn = vl; }
      if (vr < vn) { nc = c + 1; vn = vr; }
      if (nc == c) break;  // local minimum above thr
      c = nc;
      vc = vn;
      if (vc <= thr) return c;
    }
    return std::nullopt;
  }

  std::vector<std::optional<Span>> trace_row(std::size_t j, std::size_t hint, std::size_t lo, std::size_t hi,
                                             std::span<const double> levels,
                                             const std::vector<std::optional<Span>>& prev) {
    std::vector<std::optional<Span>> spans(levels.size());
    const std::size_t ceil = g_.nx - 1;
    for (std::size_t k = 0; k < levels.size(); ++k) {
      const double thr = levels[k];
      std::optional<std::size_t> seed;
      if (k == 0) {
        // nearest qualifying cell to the hint within the previous row's span
        const std::size_t h = std::clamp(hint, lo, hi);
        for (std::size_t dist = 0; !seed; ++dist) {
          const bool has_l = h >= lo + dist, has_r = h + dist <= hi;
          if (!has_l && !has_r) break;
          if (has_l && inside(h - dist, j, thr)) seed = h - dist;
          else if (dist > 0 && has_r && inside(h + dist, j, thr)) seed = h + dist;
        }
        if (!seed) return spans;
        const std::size_t gl = prev[0] ? prev[0]->first : *seed, gr = prev[0] ? prev[0]->second : *seed;
        spans[0] = Span{left_edge(j, *seed, gl, 0, thr), right_edge(j, *seed, gr, ceil, thr)};
      } else {
        if (!spans[k - 1]) break;
        const auto [olo, ohi] = *spans[k - 1];
        const std::size_t h = prev[k] ? (prev[k]->first + prev[k]->second) / 2 : (olo + ohi) / 2;
        seed = find_seed(j, h, olo, ohi, thr);
        if (!seed) break;
        const std::size_t gl = prev[k] ? prev[k]->first : *seed, gr = prev[k] ? prev[k]->second : *seed;
        spans[k] = Span{left_edge(j, *seed, gl, olo, thr), right_edge(j, *seed, gr, ohi, thr)};
      }
      for (std::size_t i = spans[k]->first; i <= spans[k]->second; ++i) {
        auto& bd = g_.bound[j * g_.nx + i];
        bd = std::min(bd, thr);
      }
    }
    return spans;
  }

  ProfileEngine& engine_;
  RegionGrid& g_;
  std::vector<Vec> warm_;
  std::vector<char> done_;
};

inline RegionGrid scan_region(ProfileEngine& engine, const Box& box, double alpha, const RegionOptions& opts) {
  RegionGrid g;
  g.axes = {engine.specs()[0], engine.specs()[1]};
  g.box = box;
  g.nx = opts.nx;
  g.ny = opts.ny;
  g.alpha = alpha;
  g.mele = engine.mele();
  g.xa.resize(g.nx);
  g.xb.resize(g.ny);
  for (std::size_t i = 0; i < g.nx; ++i)
    g.xa[i] = box.a_lo + (static_cast<double>(i) + 0.5) * (box.a_hi - box.a_lo) / static_cast<double>(g.nx);
  for (std::size_t j = 0; j < g.ny; ++j)
    g.xb[j] = box.b_lo + (static_cast<double>(j) + 0.5) * (box.b_hi - box.b_lo) / static_cast<double>(g.ny);
  g.rn.assign(g.nx * g.ny, std::numeric_limits<double>::quiet_NaN());
  g.bound.assign(g.nx * g.ny, std::numeric_limits<double>::infinity());
  g.mask.assign(g.nx * g.ny, 0);

  if (opts.trace) {
    std::vector<double> levels{chisq_quantile(2, 1.0 - alpha)};
    for (double a : opts.trace_alphas) levels.push_back(chisq_quantile(2, 1.0 - a));
    std::sort(levels.begin(), levels.end(), std::greater<>());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    g.levels = levels;
    GridScanner sc(engine, g);
    sc.trace(levels);
  } else {
    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, g.ny));
    if (workers == 1) {
      GridScanner sc(engine, g);
      sc.full_rows(0, g.ny);
    } else {
      // Each worker scans a block of rows on its own copy of the engine and
      // grid; blocks are merged afterwards.
      std::vector<RegionGrid> parts(workers, g);
      std::vector<std::thread> pool;
      const std::size_t per = (g.ny + workers - 1) / workers;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          ProfileEngine local = engine;
          GridScanner sc(local, parts[w]);
          sc.full_rows(std::min(g.ny, w * per), std::min(g.ny, (w + 1) * per));
        });
      for (auto& t : pool) t.join();
      for (std::size_t w = 0; w < workers; ++w) {
        for (std::size_t j = std::min(g.ny, w * per); j < std::min(g.ny, (w + 1) * per); ++j)
          for (std::size_t i = 0; i < g.nx; ++i) g.rn[j * g.nx + i] = parts[w].rn[j * g.nx + i];
        g.evaluated += parts[w].evaluated;
        g.failures += parts[w].failures;
        g.inadmissible += parts[w].inadmissible;
      }
    }
  }
  return g.at_alpha(alpha);
}

}  // namespace detail

/// Default search box for a two-quantile region: the Wald ellipse's bounding
/// box inflated x2, falling back to MELE +- 4 nonparametric SEs.
inline Box default_region_box(const ProfileEngine& engine, double alpha, const RegionOptions& opts) {
  const auto& ms = engine.data();
  try {
    const auto est = wald_estimate(ms, engine.basis(), engine.specs(), opts.bootstrap, opts.seed, {}, &engine.fit());
    return ellipse_box(wald_region(est, ms.total(), alpha));
  } catch (const Error&) {
    const auto np = np_estimate(ms, engine.specs());
    return se_box(engine.mele(), np.t_hat / static_cast<double>(ms.total()));
  }
}

/// ELRT region on a grid, reusing an engine (and its fit).
inline RegionGrid elrt_region(ProfileEngine& engine, double alpha, const RegionOptions& opts = {}) {
  if (engine.specs().size() != 2) throw ValidationError("ELRT regions need exactly two quantile specs");
  if (!(alpha > 0 && alpha < 1)) throw ValidationError("alpha must lie in (0,1)");
  if (opts.nx < 2 || opts.ny < 2) throw ValidationError("grid must be at least 2x2");
  const std::array<QuantileSpec, 2> axes{engine.specs()[0], engine.specs()[1]};
  const auto& ms = engine.data();
  Box box = opts.box ? *opts.box : default_region_box(engine, alpha, opts);
  box = detail::clip_box(box, ms, axes, opts.profile.range);
  RegionGrid g;
  for (int expansion = 0;; ++expansion) {
    g = detail::scan_region(engine, box, alpha, opts);
    g.expansions = expansion;
    if (expansion >= opts.max_expansions || !g.touches_edge()) break;
    const Box grown = detail::clip_box(detail::grow_box(box, 2.0), ms, axes, opts.profile.range);
    if (grown.a_lo == box.a_lo && grown.a_hi == box.a_hi && grown.b_lo == box.b_lo && grown.b_hi == box.b_hi) break;
    box = grown;
  }
  if (g.evaluated > 0 && static_cast<double>(g.failures) >= opts.max_failure_rate * static_cast<double>(g.evaluated))
    throw SolverError("ELRT region: " + std::to_string(g.failures) + " of " + std::to_string(g.evaluated) +
                      " grid solves failed");
  return g;
}

inline RegionGrid elrt_region(const MultiSample& ms, const Basis& b, std::span<const QuantileSpec> specs,
                              double alpha, std::size_t nx, std::size_t ny, RegionOptions opts = {}) {
  validate_specs(ms, specs);
  opts.nx = nx;
  opts.ny = ny;
  ProfileEngine engine(ms, b, {specs.begin(), specs.end()}, opts.profile);
  return elrt_region(engine, alpha, opts);
}

/// Header line, column names, then one record per grid point.
inline void write_region(std::ostream& out, const RegionGrid& g, char delim = ',') {
  out.precision(10);
  out << "# threshold=" << g.threshold << " alpha=" << g.alpha << " area=" << g.area << " nx=" << g.nx
      << " ny=" << g.ny << " failures=" << g.failures << '\n';
  out << "xi_a" << delim << "xi_b" << delim << "r_n" << delim << "included\n";
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i) {
      const double v = g.value(i, j);
      out << g.xa[i] << delim << g.xb[j] << delim;
      if (std::isnan(v)) out << "nan"; else out << v;
      out << delim << (g.included(i, j) ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// One-dimensional intervals
// ---------------------------------------------------------------------------

struct IntervalGrid {
  QuantileSpec axis;
  double lo = 0, hi = 0;
  std::vector<double> x, rn;
  std::vector<char> mask;
  double alpha = 0.05, threshold = 0.0, length = 0.0;
  std::size_t failures = 0;

  IntervalGrid at_alpha(double a) const {
    IntervalGrid g = *this;
    g.alpha = a;
    g.threshold = chisq_quantile(1, 1.0 - a);
    std::size_t count = 0;
    for (std::size_t k = 0; k < rn.size(); ++k) {
      g.mask[k] = rn[k] <= g.threshold ? 1 : 0;
      count += static_cast<std::size_t>(g.mask[k]);
    }
    g.length = static_cast<double>(count) * (hi - lo) / static_cast<double>(x.size());
    return g;
  }
};

/// ELRT interval for a single quantile on a cell-centred grid over [lo, hi].
inline IntervalGrid elrt_interval(ProfileEngine& engine, double lo, double hi, double alpha, std::size_t nx) {
  if (engine.specs().size() != 1) throw ValidationError("ELRT intervals need exactly one quantile spec");
  const auto& ms = engine.data();
  const auto r = engine.specs()[0].population;
  const RangeRule rule = engine.options().range;
  lo = std::max(lo, rule == RangeRule::own ? ms.min(r) : ms.pooled_min());
  hi = std::min(hi, rule == RangeRule::own ? ms.max(r) : ms.pooled_max());
  if (!(lo < hi)) throw ValidationError("interval search range is empty");
  IntervalGrid g;
  g.axis = engine.specs()[0];
  g.lo = lo;
  g.hi = hi;
  g.x.resize(nx);
  g.rn.assign(nx, std::numeric_limits<double>::quiet_NaN());
  g.mask.assign(nx, 0);
  const Vec* warm = nullptr;
  Vec last;
  for (std::size_t i = 0; i < nx; ++i) {
    g.x[i] = lo + (static_cast<double>(i) + 0.5) * (hi - lo) / static_cast<double>(nx);
    const std::array<double, 1> xi{g.x[i]};
    auto res = engine.solve(xi, warm);
    if (!res.admissible) continue;
    if (!res.converged) {
      ++g.failures;
      continue;
    }
    g.rn[i] = res.r_n;
    last = std::move(res.x);
    warm = &last;
  }
  return g.at_alpha(alpha);
}

}  // namespace drmel

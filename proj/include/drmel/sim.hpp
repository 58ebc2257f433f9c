#pragma once

// Simulation harness: data generators for normal, gamma and resampling
// designs, true quantiles and DRM parameters, a replication engine that
// tabulates coverage and average area (or length) per method and level, and
// Q-Q exports of R_n under the null.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "drmel/el_core.hpp"
#include "drmel/elrt.hpp"
#include "drmel/model.hpp"
#include "drmel/random.hpp"
#include "drmel/solver.hpp"
#include "drmel/wald_np.hpp"

namespace drmel {

enum class Family { normal, gamma, resample };
enum class Method { elrt, wald, np };
enum class BoxRule { automatic, wald, np };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::elrt: return "elrt";
    case Method::wald: return "wald";
    case Method::np: return "np";
  }
  return "?";
}

struct Design {
  Family family = Family::normal;
  std::vector<double> mean, sd;      // normal
  std::vector<double> shape, scale;  // gamma
  std::string source;                // resample: sample file
  char source_delimiter = ',';
  std::vector<std::size_t> sizes;
  Basis basis = Basis::parse("1,x,x2");
  std::vector<QuantileSpec> specs;   // xi filled from the truth
  std::vector<double> alphas{0.10, 0.05};
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  std::vector<Method> methods{Method::elrt, Method::wald, Method::np};

  // method settings; these change results, so they live in the design
  std::size_t nx = 101, ny = 101;
  std::size_t bootstrap = 300;
  RangeRule range = RangeRule::pooled;
  bool elrt_area = true;
  bool trace = true;
  BoxRule box = BoxRule::automatic;

  std::shared_ptr<const MultiSample> source_data;  // loaded resample source

  std::size_t populations() const {
    switch (family) {
      case Family::normal: return mean.size();
      case Family::gamma: return shape.size();
      case Family::resample: return source_data ? source_data->populations() : sizes.size();
    }
    return 0;
  }
  /// A single size applies to every population.
  std::size_t size_of(std::size_t k) const { return sizes.size() == 1 ? sizes[0] : sizes[k]; }
  bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

  void validate() const {
    const std::size_t k = populations();
    if (k == 0) throw ValidationError("design has no populations");
    auto same = [&](const std::vector<double>& v, const char* what) {
      if (v.size() != k)
        throw ValidationError(std::string("design key '") + what + "' has " + std::to_string(v.size()) +
                              " entries, expected " + std::to_string(k));
    };
    if (family == Family::normal) {
      same(sd, "sd");
      for (double s : sd)
        if (!(s > 0)) throw ValidationError("normal sd must be positive");
    } else if (family == Family::gamma) {
      same(scale, "scale");
      for (std::size_t r = 0; r < k; ++r)
        if (!(shape[r] > 0 && scale[r] > 0)) throw ValidationError("gamma shape and scale must be positive");
    } else if (!source_data) {
      throw ValidationError("resample design needs a loaded source file");
    }
    if (sizes.size() != k && sizes.size() != 1)
      throw ValidationError("design key 'sizes' has " + std::to_string(sizes.size()) + " entries, expected 1 or " +
                            std::to_string(k));
    for (auto n : sizes)
      if (n < 2) throw ValidationError("every sample size must be at least 2");
    if (reps < 1) throw ValidationError("reps must be at least 1");
    if (specs.empty()) throw ValidationError("design has no quantile specs");
    for (const auto& s : specs) {
      if (s.population >= k) throw ValidationError("spec population " + std::to_string(s.population) + " out of range");
      if (!(s.tau > 0 && s.tau < 1)) throw ValidationError("spec tau must lie in (0,1)");
    }
    if (alphas.empty()) throw ValidationError("design has no alpha levels");
    for (double a : alphas)
      if (!(a > 0 && a < 1)) throw ValidationError("alpha must lie in (0,1)");
    if (methods.empty()) throw ValidationError("design has no methods");
    if (has(Method::wald) && bootstrap < 50) throw ValidationError("bootstrap needs at least 50 replicates");
    if (nx < 2 || ny < 2) throw ValidationError("grid must be at least 2x2");
  }
};

// ---------------------------------------------------------------------------
// Design files: "key = value" lines, '#' comments, lists comma-separated
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto& part : split(v, ',')) {
    auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& t : split_list(v)) {
    const auto d = parse_double(t);
    if (!d) throw ValidationError("design key '" + key + "': '" + t + "' is not a number");
    out.push_back(*d);
  }
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValidationError("design key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::size_t parse_count(const std::string& v, const std::string& key) {
  const auto n = parse_int(v);
  if (!n || *n < 0) throw ValidationError("design key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(*n);
}

}  // namespace detail

/// Applies one key/value pair. `spec` appends; every other key replaces.
inline void apply_design_setting(Design& d, const std::string& key, const std::string& raw) {
  const std::string v(detail::trim(raw));
  if (key == "family") {
    if (v == "normal") d.family = Family::normal;
    else if (v == "gamma") d.family = Family::gamma;
    else if (v == "resample" || v == "resample-from-file") d.family = Family::resample;
    else throw ValidationError("unknown family '" + v + "'");
    if (d.family == Family::gamma && d.basis.to_string() == "1,x,x2") d.basis = Basis::parse("1,x,logx");
  } else if (key == "mean") {
    d.mean = detail::parse_double_list(v, key);
  } else if (key == "sd") {
    d.sd = detail::parse_double_list(v, key);
  } else if (key == "shape") {
    d.shape = detail::parse_double_list(v, key);
  } else if (key == "scale") {
    d.scale = detail::parse_double_list(v, key);
  } else if (key == "source") {
    d.source = v;
    d.source_data = std::make_shared<const MultiSample>(load_samples(v, d.source_delimiter));
    if (d.sizes.empty())
      for (std::size_t k = 0; k < d.source_data->populations(); ++k) d.sizes.push_back(d.source_data->size(k));
  } else if (key == "sizes") {
    d.sizes.clear();
    for (const auto& t : detail::split_list(v)) d.sizes.push_back(detail::parse_count(t, key));
  } else if (key == "basis") {
    d.basis = Basis::parse(v);
  } else if (key == "spec") {
    d.specs.push_back(QuantileSpec::parse(v));
  } else if (key == "specs") {
    d.specs.clear();
    for (const auto& t : detail::split(v, ';')) {
      const auto tt = detail::trim(t);
      if (!tt.empty()) d.specs.push_back(QuantileSpec::parse(std::string(tt)));
    }
  } else if (key == "alpha" || key == "alphas" || key == "levels") {
    d.alphas = detail::parse_double_list(v, key);
  } else if (key == "reps") {
    d.reps = detail::parse_count(v, key);
  } else if (key == "seed") {
    const auto s = detail::parse_int(v);
    if (!s || *s < 0) throw ValidationError("design key 'seed': expected a non-negative integer");
    d.seed = static_cast<std::uint64_t>(*s);
  } else if (key == "methods") {
    d.methods.clear();
    for (const auto& t : detail::split_list(v)) {
      if (t == "elrt") d.methods.push_back(Method::elrt);
      else if (t == "wald") d.methods.push_back(Method::wald);
      else if (t == "np") d.methods.push_back(Method::np);
      else throw ValidationError("unknown method '" + t + "'");
    }
  } else if (key == "grid") {
    std::string g = v;
    std::replace(g.begin(), g.end(), 'x', ',');
    const auto parts = detail::split_list(g);
    if (parts.size() == 1) d.nx = d.ny = detail::parse_count(parts[0], key);
    else if (parts.size() == 2) {
      d.nx = detail::parse_count(parts[0], key);
      d.ny = detail::parse_count(parts[1], key);
    } else throw ValidationError("design key 'grid': expected N or NXxNY");
  } else if (key == "bootstrap") {
    d.bootstrap = detail::parse_count(v, key);
  } else if (key == "range") {
    if (v == "own") d.range = RangeRule::own;
    else if (v == "pooled") d.range = RangeRule::pooled;
    else throw ValidationError("design key 'range': expected own or pooled");
  } else if (key == "elrt_area") {
    d.elrt_area = detail::parse_bool(v, key);
  } else if (key == "trace") {
    d.trace = detail::parse_bool(v, key);
  } else if (key == "box") {
    if (v == "auto") d.box = BoxRule::automatic;
    else if (v == "wald") d.box = BoxRule::wald;
    else if (v == "np") d.box = BoxRule::np;
    else throw ValidationError("design key 'box': expected auto, wald or np");
  } else if (key == "delimiter") {
    if (v.size() != 1) throw ValidationError("design key 'delimiter' must be one character");
    d.source_delimiter = v[0];
  } else {
    throw ValidationError("unknown design key '" + key + "'");
  }
}

inline Design parse_design(std::istream& in) {
  Design d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected 'key = value'");
    const std::string key(detail::trim(t.substr(0, eq)));
    try {
      apply_design_setting(d, key, std::string(t.substr(eq + 1)));
    } catch (const ParseError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return d;
}

inline Design load_design(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open design file '" + path + "'");
  return parse_design(in);
}

// ---------------------------------------------------------------------------
// Generators and truths
// ---------------------------------------------------------------------------

/// Deterministic in (seed, replicate); population k draws from the substream
/// (seed, replicate, k).
inline MultiSample generate(const Design& d, std::size_t replicate) {
  d.validate();
  std::vector<std::vector<double>> out(d.populations());
  for (std::size_t k = 0; k < out.size(); ++k) {
    Rng rng(substream_seed(d.seed, {static_cast<std::uint64_t>(replicate), static_cast<std::uint64_t>(k)}));
    out[k].resize(d.size_of(k));
    switch (d.family) {
      case Family::normal:
        for (auto& x : out[k]) x = d.mean[k] + d.sd[k] * rng.normal();
        break;
      case Family::gamma:
        for (auto& x : out[k]) x = d.scale[k] * rng.gamma(d.shape[k]);
        break;
      case Family::resample: {
        const auto src = d.source_data->sample(k);
        for (auto& x : out[k]) x = src[rng.below(src.size())];
        break;
      }
    }
  }
  return MultiSample(std::move(out));
}

inline double normal_quantile(double mean, double sd, double tau) {
  if (!(tau > 0 && tau < 1)) throw ValidationError("tau must lie in (0,1)");
  return mean - sd * std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * tau);
}

inline double gamma_quantile(double shape, double scale, double tau) {
  return scale * invert_regularized_gamma_p(shape, tau);
}

inline double true_quantile(const Design& d, std::size_t r, double tau) {
  if (r >= d.populations()) throw ValidationError("population index out of range");
  switch (d.family) {
    case Family::normal: return normal_quantile(d.mean[r], d.sd[r], tau);
    case Family::gamma: return gamma_quantile(d.shape[r], d.scale[r], tau);
    case Family::resample: break;
  }
  throw ValidationError("resample designs have no closed-form truth; use empirical_truth on the full source file");
}

/// Sample quantile of the full source population (the truth for resampling).
inline double empirical_truth(const Design& d, std::size_t r, double tau) {
  if (!d.source_data) throw ValidationError("design has no source data");
  return empirical_quantile(d.source_data->sample(r), tau);
}

inline std::vector<QuantileSpec> true_specs(const Design& d) {
  std::vector<QuantileSpec> out = d.specs;
  for (auto& s : out)
    s.xi = d.family == Family::resample ? empirical_truth(d, s.population, s.tau)
                                        : true_quantile(d, s.population, s.tau);
  return out;
}

/// DRM parameters linking each population to population 0: basis (1,x,x2)
/// for normal designs, (1,x,logx) for gamma designs.
inline DrmParams true_drm_params(const Design& d) {
  const std::size_t k = d.populations();
  if (k == 0) throw ValidationError("design has no populations");
  DrmParams p(k - 1, 3);
  if (d.family == Family::normal) {
    const double m0 = d.mean[0], s0 = d.sd[0];
    for (std::size_t r = 1; r < k; ++r) {
      const double m = d.mean[r], s = d.sd[r];
      const auto i = static_cast<Eigen::Index>(r - 1);
      p.theta(i, 0) = std::log(s0 / s) - m * m / (2 * s * s) + m0 * m0 / (2 * s0 * s0);
      p.theta(i, 1) = m / (s * s) - m0 / (s0 * s0);
      p.theta(i, 2) = 1 / (2 * s0 * s0) - 1 / (2 * s * s);
    }
  } else if (d.family == Family::gamma) {
    const double a0 = d.shape[0], b0 = d.scale[0];
    for (std::size_t r = 1; r < k; ++r) {
      const double a = d.shape[r], b = d.scale[r];
      const auto i = static_cast<Eigen::Index>(r - 1);
      p.theta(i, 0) = std::lgamma(a0) + a0 * std::log(b0) - std::lgamma(a) - a * std::log(b);
      p.theta(i, 1) = 1 / b0 - 1 / b;
      p.theta(i, 2) = a - a0;
    }
  } else {
    throw ValidationError("resample designs have no true DRM parameters");
  }
  return p;
}

/// 2[k ln(k / (n tau)) + (n - k) ln((n - k) / (n (1 - tau)))].
inline double closed_form_single_sample_rn(std::size_t n, std::size_t k, double tau) {
  if (k == 0 || k >= n) throw ValidationError("closed form needs 0 < k < n");
  if (!(tau > 0 && tau < 1)) throw ValidationError("tau must lie in (0,1)");
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  return 2.0 * (dk * std::log(dk / (dn * tau)) + (dn - dk) * std::log((dn - dk) / (dn * (1 - tau))));
}

// ---------------------------------------------------------------------------
// Replication engine
// ---------------------------------------------------------------------------

struct SimOptions {
  std::size_t workers = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

struct MethodOutcome {
  bool failed = false;
  bool out_of_range = false;
  std::vector<char> covered;  // per alpha
  std::vector<double> size;   // area (l = 2) or length (l = 1) per alpha; NaN if not computed
  std::string error;
};

struct ReplicateResult {
  std::size_t index = 0;
  std::map<Method, MethodOutcome> outcomes;
  double r_n = std::numeric_limits<double>::quiet_NaN();  // ELRT statistic at the truth
};

struct CoverageRow {
  Method method = Method::elrt;
  double alpha = 0.05;
  double coverage = 0.0;
  double mc_se = 0.0;
  double avg_size = std::numeric_limits<double>::quiet_NaN();
  std::size_t failures = 0;
  std::size_t out_of_range = 0;
  std::size_t replicates = 0;  // successful replicates (coverage denominator)
};

struct CoverageTable {
  std::vector<CoverageRow> rows;
  std::vector<double> r_n;  // per replicate, NaN when the ELRT failed or was not run
  std::size_t reps = 0;
  std::size_t l = 0;

  const CoverageRow& row(Method m, double alpha) const {
    for (const auto& r : rows)
      if (r.method == m && std::abs(r.alpha - alpha) < 1e-12) return r;
    throw ValidationError(std::string("no table row for ") + method_name(m));
  }
};

namespace detail {

inline ReplicateResult run_replicate(const Design& d, const std::vector<QuantileSpec>& truth, std::size_t rep) {
  ReplicateResult out;
  out.index = rep;
  const std::size_t na = d.alphas.size(), l = truth.size();
  auto fresh = [&] {
    MethodOutcome m;
    m.covered.assign(na, 0);
    m.size.assign(na, std::numeric_limits<double>::quiet_NaN());
    return m;
  };
  for (Method m : d.methods) out.outcomes[m] = fresh();
  auto fail_all = [&](const std::string& why, std::initializer_list<Method> which) {
    for (Method m : which)
      if (out.outcomes.count(m)) {
        out.outcomes[m].failed = true;
        out.outcomes[m].error = why;
      }
  };

  const MultiSample ms = generate(d, rep);
  const double n = static_cast<double>(ms.total());
  Vec xi_true(static_cast<Eigen::Index>(l));
  for (std::size_t s = 0; s < l; ++s) xi_true[static_cast<Eigen::Index>(s)] = *truth[s].xi;
  const double a_min = *std::min_element(d.alphas.begin(), d.alphas.end());

  std::optional<NpEstimate> np;
  if (d.has(Method::np) || (d.has(Method::elrt) && d.elrt_area)) {
    try {
      np = np_estimate(ms, truth);
    } catch (const Error& e) {
      fail_all(e.what(), {Method::np});
    }
  }
  if (d.has(Method::np) && np) {
    auto& o = out.outcomes[Method::np];
    try {
      for (std::size_t a = 0; a < na; ++a) {
        const Ellipse e = np_region(*np, ms.total(), d.alphas[a]);
        o.covered[a] = e.contains(xi_true) ? 1 : 0;
        o.size[a] = e.area;
      }
    } catch (const Error& e) {
      o.failed = true;
      o.error = e.what();
    }
  }

  if (!d.has(Method::elrt) && !d.has(Method::wald)) return out;
  std::optional<DrmFit> fit;
  try {
    fit = fit_unconstrained(ms, d.basis, FitOptions{.solve = {}, .diagnostics = false});
  } catch (const Error& e) {
    fail_all(e.what(), {Method::elrt, Method::wald});
    return out;
  }

  std::optional<WaldEstimate> wald;
  if (d.has(Method::wald) || (d.has(Method::elrt) && d.elrt_area && d.box == BoxRule::wald)) {
    try {
      const std::uint64_t bs_seed = substream_seed(d.seed, {static_cast<std::uint64_t>(rep), 0xB0075EEDULL});
      wald = wald_estimate(ms, d.basis, truth, d.bootstrap, bs_seed, {}, &*fit);
    } catch (const Error& e) {
      fail_all(e.what(), {Method::wald});
    }
  }
  if (d.has(Method::wald) && wald) {
    auto& o = out.outcomes[Method::wald];
    try {
      for (std::size_t a = 0; a < na; ++a) {
        const Ellipse e = wald_region(*wald, ms.total(), d.alphas[a]);
        o.covered[a] = e.contains(xi_true) ? 1 : 0;
        o.size[a] = e.area;
      }
    } catch (const Error& e) {
      o.failed = true;
      o.error = e.what();
    }
  }

  if (!d.has(Method::elrt)) return out;
  auto& o = out.outcomes[Method::elrt];
  try {
    ProfileOptions po;
    po.range = d.range;
    po.fit.diagnostics = false;
    ProfileEngine engine(ms, d.basis, truth, po, *fit);
    // containment: R_n at the truth
    std::vector<double> xs(l);
    for (std::size_t s = 0; s < l; ++s) xs[s] = *truth[s].xi;
    const auto res = engine.solve(xs);
    if (!res.admissible) {
      o.out_of_range = true;
    } else if (!res.converged) {
      o.failed = true;
      o.error = "profile solve at the truth did not converge";
      return out;
    } else {
      out.r_n = res.r_n;
      for (std::size_t a = 0; a < na; ++a) o.covered[a] = res.r_n <= chisq_quantile(static_cast<int>(l), 1.0 - d.alphas[a]) ? 1 : 0;
    }
    if (!d.elrt_area) return out;

    if (l == 2) {
      RegionOptions ro;
      ro.nx = d.nx;
      ro.ny = d.ny;
      ro.profile = po;
      ro.trace = d.trace;
      ro.trace_alphas = d.alphas;
      const Vec mele = engine.mele();
      if (wald && d.box != BoxRule::np) ro.box = ellipse_box(wald_region(*wald, ms.total(), a_min));
      else if (np) ro.box = se_box(mele, np->t_hat / n);
      else throw SolverError("no bounding box available for the ELRT region");
      const RegionGrid g = elrt_region(engine, a_min, ro);
      for (std::size_t a = 0; a < na; ++a) o.size[a] = g.at_alpha(d.alphas[a]).area;
    } else if (l == 1) {
      if (!np) throw SolverError("no search interval available for the ELRT interval");
      const double c = engine.mele()[0], se = std::sqrt(np->t_hat(0, 0) / n);
      const IntervalGrid g = elrt_interval(engine, c - 4 * se, c + 4 * se, a_min, d.nx);
      for (std::size_t a = 0; a < na; ++a) o.size[a] = g.at_alpha(d.alphas[a]).length;
    }
  } catch (const Error& e) {
    o.failed = true;
    o.error = e.what();
  }
  return out;
}

template <class F>
void parallel_for(std::size_t count, std::size_t workers, F&& body) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < count;) body(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Runs every replicate, then reduces in replicate order. Throws SolverError
/// when some method fails on more than 5% of the replicates.
inline CoverageTable run_coverage(const Design& d, const SimOptions& opts = {}) {
  d.validate();
  if (d.specs.size() != 1 && d.specs.size() != 2)
    throw ValidationError("coverage studies need one (interval) or two (region) quantile specs");
  const auto truth = true_specs(d);
  std::vector<ReplicateResult> results(d.reps);
  std::atomic<std::size_t> done{0};
  detail::parallel_for(d.reps, opts.workers, [&](std::size_t rep) {
    results[rep] = detail::run_replicate(d, truth, rep);
    const std::size_t k = ++done;
    if (opts.progress) opts.progress(k, d.reps);
  });

  CoverageTable table;
  table.reps = d.reps;
  table.l = d.specs.size();
  table.r_n.reserve(d.reps);
  for (const auto& r : results) table.r_n.push_back(r.r_n);
  std::string worst;
  for (Method m : d.methods) {
    std::size_t failures = 0;
    for (const auto& r : results) failures += r.outcomes.at(m).failed ? 1 : 0;
    if (static_cast<double>(failures) > 0.05 * static_cast<double>(d.reps)) {
      std::string example;
      for (const auto& r : results)
        if (r.outcomes.at(m).failed) {
          example = r.outcomes.at(m).error;
          break;
        }
      worst += std::string(worst.empty() ? "" : "; ") + method_name(m) + " failed on " + std::to_string(failures) +
               " of " + std::to_string(d.reps) + " replicates (" + example + ")";
    }
    for (std::size_t a = 0; a < d.alphas.size(); ++a) {
      CoverageRow row;
      row.method = m;
      row.alpha = d.alphas[a];
      row.failures = failures;
      std::size_t covered = 0, sized = 0;
      double size_sum = 0.0;
      for (const auto& r : results) {
        const auto& o = r.outcomes.at(m);
        if (o.failed) continue;
        ++row.replicates;
        covered += static_cast<std::size_t>(o.covered[a]);
        row.out_of_range += o.out_of_range ? 1 : 0;
        if (!std::isnan(o.size[a])) {
          size_sum += o.size[a];
          ++sized;
        }
      }
      if (row.replicates > 0) {
        const double p = static_cast<double>(covered) / static_cast<double>(row.replicates);
        row.coverage = p;
        row.mc_se = std::sqrt(p * (1 - p) / static_cast<double>(row.replicates));
      }
      if (sized > 0) row.avg_size = size_sum / static_cast<double>(sized);
      table.rows.push_back(row);
    }
  }
  if (!worst.empty()) throw SolverError(worst);
  return table;
}

inline void write_coverage_table(std::ostream& out, const CoverageTable& t, char delim = ',') {
  out << "method" << delim << "level" << delim << "coverage" << delim << "mc_se" << delim
      << (t.l == 1 ? "avg_length" : "avg_area") << delim << "failures" << delim << "out_of_range" << delim
      << "replicates\n";
  std::ostringstream line;
  for (const auto& r : t.rows) {
    line.str("");
    line << std::fixed << std::setprecision(6);
    line << method_name(r.method) << delim << std::setprecision(4) << 1.0 - r.alpha << delim << std::setprecision(6)
         << r.coverage << delim << r.mc_se << delim;
    if (std::isnan(r.avg_size)) line << "nan";
    else line << r.avg_size;
    line << delim << r.failures << delim << r.out_of_range << delim << r.replicates << '\n';
    out << line.str();
  }
}

// ---------------------------------------------------------------------------
// Q-Q export
// ---------------------------------------------------------------------------

struct QqResult {
  std::vector<double> r_n;          // sorted
  std::vector<double> theoretical;  // chi2_l quantiles at (i - 0.5) / count
  std::size_t df = 0;
  std::size_t failures = 0;
  std::size_t out_of_range = 0;
};

inline std::vector<double> chisq_plotting_quantiles(std::size_t count, int df) {
  std::vector<double> q(count);
  for (std::size_t i = 0; i < count; ++i)
    q[i] = chisq_quantile(df, (static_cast<double>(i) + 0.5) / static_cast<double>(count));
  return q;
}

/// sup_x |F_n(x) - F(x)| against chi2_df.
inline double ks_distance_chisq(std::vector<double> values, int df) {
  if (values.empty()) throw ValidationError("KS distance of an empty sample");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double f = chisq_cdf(df, values[i]);
    worst = std::max({worst, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return worst;
}

inline QqResult qq_from_values(const std::vector<double>& values, std::size_t df) {
  QqResult q;
  q.df = df;
  for (double v : values) {
    if (std::isnan(v)) ++q.failures;
    else q.r_n.push_back(v);
  }
  std::sort(q.r_n.begin(), q.r_n.end());
  q.theoretical = chisq_plotting_quantiles(q.r_n.size(), static_cast<int>(df));
  return q;
}

/// R_n at the true quantiles over `reps` replicates of the design.
inline QqResult run_qq(const Design& design, std::size_t reps, const SimOptions& opts = {}) {
  Design d = design;
  d.reps = reps;
  d.methods = {Method::elrt};
  d.elrt_area = false;
  d.validate();
  const auto truth = true_specs(d);
  std::vector<double> rn(reps, std::numeric_limits<double>::quiet_NaN());
  std::vector<char> oor(reps, 0);
  std::atomic<std::size_t> done{0};
  detail::parallel_for(reps, opts.workers, [&](std::size_t rep) {
    const auto r = detail::run_replicate(d, truth, rep);
    const auto& o = r.outcomes.at(Method::elrt);
    if (o.out_of_range) oor[rep] = 1;
    else if (!o.failed) rn[rep] = r.r_n;
    const std::size_t k = ++done;
    if (opts.progress) opts.progress(k, reps);
  });
  QqResult q = qq_from_values(rn, d.specs.size());
  q.out_of_range = static_cast<std::size_t>(std::count(oor.begin(), oor.end(), 1));
  q.failures -= q.out_of_range;
  if (static_cast<double>(q.failures) > 0.05 * static_cast<double>(reps))
    throw SolverError("ELRT failed on " + std::to_string(q.failures) + " of " + std::to_string(reps) + " replicates");
  return q;
}

inline void write_qq(std::ostream& out, const QqResult& q, char delim = ',') {
  out << "rank" << delim << "r_n" << delim << "chisq_quantile\n";
  std::ostringstream line;
  line << std::setprecision(10);
  for (std::size_t i = 0; i < q.r_n.size(); ++i) line << i + 1 << delim << q.r_n[i] << delim << q.theoretical[i] << '\n';
  out << line.str();
}

}  // namespace drmel

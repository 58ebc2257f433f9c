#pragma once

// Command-line front end. Subcommands: fit, test, region, simulate, qq.
// Exit codes: 0 success, 2 validation error, 3 solver failure, 1 anything
// else (I/O).

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "drmel/el_core.hpp"
#include "drmel/elrt.hpp"
#include "drmel/model.hpp"
#include "drmel/sim.hpp"
#include "drmel/wald_np.hpp"

namespace drmel {

inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitSolver = 3;

/// Relative output paths are placed under $DRMEL_OUTPUT_DIR when it is set.
inline std::filesystem::path resolve_output(const std::string& path) {
  std::filesystem::path p(path);
  if (const char* dir = std::getenv("DRMEL_OUTPUT_DIR"); dir && *dir && p.is_relative()) p = std::filesystem::path(dir) / p;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  return p;
}

namespace detail {

struct CliConfig {
  std::string data;
  std::string basis;
  std::vector<std::string> specs;
  std::string alpha;
  std::string grid;
  std::size_t bootstrap = 300;
  std::size_t reps = 500;
  std::uint64_t seed = 1;
  std::string out;
  std::string delimiter = ",";
  std::size_t workers = 1;
  std::string range = "own";
  bool trace = false;
  std::string design;
  std::string wald_out, np_out;
  // design keys settable from flags
  std::string family, mean, sd, shape, scale, source, sizes, methods, box, elrt_area;
};

inline char parse_delimiter(const std::string& s) {
  if (s == "tab" || s == "\\t") return '\t';
  if (s.size() != 1) throw ValidationError("delimiter must be a single character, 'tab' or '\\t'");
  return s[0];
}

inline RangeRule parse_range(const std::string& s) {
  if (s == "own") return RangeRule::own;
  if (s == "pooled") return RangeRule::pooled;
  throw ValidationError("--range must be 'own' or 'pooled'");
}

inline std::vector<QuantileSpec> parse_specs(const std::vector<std::string>& raw) {
  std::vector<QuantileSpec> out;
  for (const auto& s : raw) out.push_back(QuantileSpec::parse(s));
  return out;
}

inline double single_alpha(const std::string& raw) {
  const auto v = parse_double_list(raw.empty() ? "0.05" : raw, "alpha");
  if (v.size() != 1) throw ValidationError("--alpha takes a single level here");
  if (!(v[0] > 0 && v[0] < 1)) throw ValidationError("alpha must lie in (0,1)");
  return v[0];
}

inline std::pair<std::size_t, std::size_t> parse_grid(const std::string& raw) {
  Design d;
  apply_design_setting(d, "grid", raw.empty() ? "101" : raw);
  return {d.nx, d.ny};
}

inline void require_data(const CliConfig& c) {
  if (c.data.empty()) throw ValidationError("--data is required");
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  return f;
}

inline int cmd_fit(const CliConfig& c, std::ostream& out) {
  require_data(c);
  const char delim = parse_delimiter(c.delimiter);
  const MultiSample ms = load_samples(c.data, delim);
  const Basis b = Basis::parse(c.basis.empty() ? "1,x,x2" : c.basis);
  const auto specs = parse_specs(c.specs);
  if (!specs.empty()) validate_specs(ms, specs);
  const DrmFit fit = fit_unconstrained(ms, b);

  out << std::setprecision(10);
  out << "populations=" << ms.populations() << " n=" << ms.total() << " basis=" << b.to_string() << '\n';
  for (std::size_t r = 1; r <= ms.m(); ++r) {
    out << "theta[" << r << "]=";
    for (Eigen::Index c2 = 0; c2 < fit.theta_hat.theta.cols(); ++c2)
      out << (c2 ? " " : "") << fit.theta_hat.theta(static_cast<Eigen::Index>(r - 1), c2);
    out << '\n';
  }
  out << "log_el=" << fit.log_el << '\n';
  out << "iterations=" << fit.report.iterations << '\n';
  if (ms.m() > 0) out << "info_condition=" << fit.info_condition << '\n';
  out << "moment_min_eigenvalue=" << fit.moment_min_eigenvalue << '\n';
  for (const auto& w : fit.warnings) out << "warning: " << w << '\n';
  Vec mele;
  if (!specs.empty()) {
    mele = mele_quantiles(fit, ms, b, specs);
    for (std::size_t s = 0; s < specs.size(); ++s)
      out << "mele[" << specs[s].population << ':' << specs[s].tau << "]=" << mele[static_cast<Eigen::Index>(s)] << '\n';
  }

  if (!c.out.empty()) {
    nlohmann::json j;
    j["basis"] = b.to_string();
    j["populations"] = ms.populations();
    j["n"] = ms.total();
    j["log_el"] = fit.log_el;
    j["theta"] = nlohmann::json::array();
    for (std::size_t r = 1; r <= ms.m(); ++r) {
      std::vector<double> row;
      for (Eigen::Index c2 = 0; c2 < fit.theta_hat.theta.cols(); ++c2)
        row.push_back(fit.theta_hat.theta(static_cast<Eigen::Index>(r - 1), c2));
      j["theta"].push_back(row);
    }
    if (ms.m() > 0) j["info_condition"] = fit.info_condition;
    j["moment_min_eigenvalue"] = fit.moment_min_eigenvalue;
    j["warnings"] = fit.warnings;
    if (!specs.empty()) {
      j["mele"] = nlohmann::json::array();
      for (std::size_t s = 0; s < specs.size(); ++s)
        j["mele"].push_back({{"population", specs[s].population},
                             {"tau", specs[s].tau},
                             {"value", mele[static_cast<Eigen::Index>(s)]}});
    }
    const auto path = resolve_output(c.out);
    auto f = open_output(path);
    f << j.dump(2) << '\n';
    out << "out=" << path.string() << '\n';
  }
  return kExitOk;
}

inline int cmd_test(const CliConfig& c, std::ostream& out) {
  require_data(c);
  const MultiSample ms = load_samples(c.data, parse_delimiter(c.delimiter));
  const Basis b = Basis::parse(c.basis.empty() ? "1,x,x2" : c.basis);
  const auto specs = parse_specs(c.specs);
  if (specs.empty()) throw ValidationError("test needs at least one --spec r:tau:xi");
  ProfileOptions po;
  po.range = parse_range(c.range);
  const TestResult t = elrt_statistic(ms, b, specs, po);
  if (!t.converged) throw SolverError("profile solve did not converge");
  out << std::setprecision(6) << "Rn=" << t.r_n << " df=" << t.df << " p=" << t.p_value << '\n';
  return kExitOk;
}

inline int cmd_region(const CliConfig& c, std::ostream& out) {
  require_data(c);
  const char delim = parse_delimiter(c.delimiter);
  const MultiSample ms = load_samples(c.data, delim);
  const Basis b = Basis::parse(c.basis.empty() ? "1,x,x2" : c.basis);
  const auto specs = parse_specs(c.specs);
  if (specs.size() != 1 && specs.size() != 2) throw ValidationError("region needs one or two --spec r:tau");
  validate_specs(ms, specs);
  const double alpha = single_alpha(c.alpha);
  const auto [nx, ny] = parse_grid(c.grid);
  ProfileOptions po;
  po.range = parse_range(c.range);
  ProfileEngine engine(ms, b, specs, po);
  out << std::setprecision(10);

  if (!c.wald_out.empty()) {
    const auto est = wald_estimate(ms, b, specs, c.bootstrap, c.seed, {.fit = {.solve = {}, .diagnostics = false}, .workers = c.workers}, &engine.fit());
    const auto path = resolve_output(c.wald_out);
    auto f = open_output(path);
    const Ellipse e = wald_region(est, ms.total(), alpha);
    write_ellipse(f, "wald", e, delim);
    out << "wald_area=" << e.area << " wald_out=" << path.string() << '\n';
  }
  if (!c.np_out.empty()) {
    const auto path = resolve_output(c.np_out);
    auto f = open_output(path);
    const Ellipse e = np_region(ms, specs, alpha);
    write_ellipse(f, "np", e, delim);
    out << "np_area=" << e.area << " np_out=" << path.string() << '\n';
  }

  const auto path = resolve_output(c.out.empty() ? "region.csv" : c.out);
  if (specs.size() == 2) {
    RegionOptions ro;
    ro.nx = nx;
    ro.ny = ny;
    ro.profile = po;
    ro.bootstrap = c.bootstrap;
    ro.seed = c.seed;
    ro.trace = c.trace;
    ro.workers = c.workers;
    const RegionGrid g = elrt_region(engine, alpha, ro);
    auto f = open_output(path);
    write_region(f, g, delim);
    out << "area=" << g.area << " threshold=" << g.threshold << " alpha=" << g.alpha << " grid=" << g.nx << 'x'
        << g.ny << " evaluated=" << g.evaluated << " failures=" << g.failures << " out=" << path.string() << '\n';
  } else {
    const auto np = np_estimate(ms, specs);
    const double center = engine.mele()[0], se = std::sqrt(np.t_hat(0, 0) / static_cast<double>(ms.total()));
    const IntervalGrid g = elrt_interval(engine, center - 4 * se, center + 4 * se, alpha, nx);
    auto f = open_output(path);
    f << std::setprecision(10) << "# threshold=" << g.threshold << " alpha=" << g.alpha << " length=" << g.length
      << " nx=" << g.x.size() << " failures=" << g.failures << '\n';
    f << "xi" << delim << "r_n" << delim << "included\n";
    for (std::size_t i = 0; i < g.x.size(); ++i) {
      f << g.x[i] << delim;
      if (std::isnan(g.rn[i])) f << "nan"; else f << g.rn[i];
      f << delim << (g.mask[i] ? 1 : 0) << '\n';
    }
    out << "length=" << g.length << " threshold=" << g.threshold << " alpha=" << g.alpha << " grid=" << g.x.size()
        << " failures=" << g.failures << " out=" << path.string() << '\n';
  }
  return kExitOk;
}

/// Design file (if any) with flag overrides applied on top.
inline Design build_design(const CliConfig& c, const CLI::App& sub) {
  Design d = c.design.empty() ? Design{} : load_design(c.design);
  auto set = [&](const char* flag, const char* key, const std::string& value) {
    if (sub.count(flag) > 0) apply_design_setting(d, key, value);
  };
  set("--delimiter", "delimiter", c.delimiter);
  set("--family", "family", c.family);
  set("--mean", "mean", c.mean);
  set("--sd", "sd", c.sd);
  set("--shape", "shape", c.shape);
  set("--scale", "scale", c.scale);
  set("--source", "source", c.source);
  set("--sizes", "sizes", c.sizes);
  set("--basis", "basis", c.basis);
  set("--alpha", "alpha", c.alpha);
  set("--reps", "reps", std::to_string(c.reps));
  set("--seed", "seed", std::to_string(c.seed));
  set("--methods", "methods", c.methods);
  set("--grid", "grid", c.grid);
  set("--bootstrap", "bootstrap", std::to_string(c.bootstrap));
  set("--range", "range", c.range);
  set("--box", "box", c.box);
  set("--elrt-area", "elrt_area", c.elrt_area);
  if (sub.count("--trace") > 0) d.trace = c.trace;
  if (sub.count("--spec") > 0) {
    d.specs.clear();
    for (const auto& s : c.specs) apply_design_setting(d, "spec", s);
  }
  d.validate();
  return d;
}

inline int cmd_simulate(const CliConfig& c, const CLI::App& sub, std::ostream& out) {
  const Design d = build_design(c, sub);
  SimOptions so;
  so.workers = c.workers;
  const CoverageTable t = run_coverage(d, so);
  const char delim = parse_delimiter(c.delimiter);
  const auto path = resolve_output(c.out.empty() ? "coverage.csv" : c.out);
  auto f = open_output(path);
  write_coverage_table(f, t, delim);
  write_coverage_table(out, t, delim);
  out << "out=" << path.string() << '\n';
  return kExitOk;
}

inline int cmd_qq(const CliConfig& c, const CLI::App& sub, std::ostream& out) {
  const Design d = build_design(c, sub);
  SimOptions so;
  so.workers = c.workers;
  const QqResult q = run_qq(d, d.reps, so);
  const auto path = resolve_output(c.out.empty() ? "qq.csv" : c.out);
  auto f = open_output(path);
  write_qq(f, q, parse_delimiter(c.delimiter));
  out << std::setprecision(6) << "pairs=" << q.r_n.size() << " df=" << q.df
      << " ks=" << (q.r_n.empty() ? 0.0 : ks_distance_chisq(q.r_n, static_cast<int>(q.df)))
      << " failures=" << q.failures << " out_of_range=" << q.out_of_range << " out=" << path.string() << '\n';
  return kExitOk;
}

}  // namespace detail

/// Parses `args` (without the program name) and runs one subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  detail::CliConfig c;
  CLI::App app{"Empirical likelihood ratio tests and confidence regions for quantiles under a density ratio model",
               "drmel"};
  app.require_subcommand(1);

  auto common = [&](CLI::App* s) {
    s->add_option("--data", c.data, "sample file: '<population><delim><value>' per line");
    s->add_option("--basis", c.basis, "basis components, e.g. 1,x,x2 or 1,x,logx");
    s->add_option("--spec", c.specs, "quantile spec r:tau[:xi] (repeatable)");
    s->add_option("--delimiter", c.delimiter, "field delimiter for input and output files");
    s->add_option("--out", c.out, "output path");
    s->add_option("--range", c.range, "admissible hypothesised values: own (sample range) or pooled");
  };
  auto heavy = [&](CLI::App* s) {
    s->add_option("--alpha", c.alpha, "level(s)");
    s->add_option("--grid", c.grid, "grid size N or NXxNY");
    s->add_option("--bootstrap", c.bootstrap, "bootstrap replicates for the Wald covariance");
    s->add_option("--seed", c.seed, "master seed");
    s->add_option("--workers", c.workers, "worker threads");
    s->add_flag("--trace{true},--full{false}", c.trace, "solve only near region boundaries");
  };
  auto designed = [&](CLI::App* s) {
    s->add_option("--design", c.design, "design file (key = value lines)");
    s->add_option("--reps", c.reps, "replicates");
    s->add_option("--family", c.family, "normal, gamma or resample");
    s->add_option("--mean", c.mean, "normal means, one per population");
    s->add_option("--sd", c.sd, "normal standard deviations");
    s->add_option("--shape", c.shape, "gamma shapes");
    s->add_option("--scale", c.scale, "gamma scales");
    s->add_option("--source", c.source, "resample source file");
    s->add_option("--sizes", c.sizes, "sample sizes (one value applies to all)");
    s->add_option("--methods", c.methods, "subset of elrt,wald,np");
    s->add_option("--box", c.box, "ELRT search box: auto, wald or np");
    s->add_option("--elrt-area", c.elrt_area, "compute ELRT region areas (true/false)");
  };

  auto* fit = app.add_subcommand("fit", "unconstrained DRM fit");
  common(fit);
  auto* test = app.add_subcommand("test", "ELRT for hypothesised quantiles");
  common(test);
  auto* region = app.add_subcommand("region", "ELRT confidence region (or interval) on a grid");
  common(region);
  heavy(region);
  region->add_option("--wald-out", c.wald_out, "also write the Wald ellipse here");
  region->add_option("--np-out", c.np_out, "also write the nonparametric ellipse here");
  auto* simulate = app.add_subcommand("simulate", "coverage and area study");
  common(simulate);
  heavy(simulate);
  designed(simulate);
  auto* qq = app.add_subcommand("qq", "R_n under the null against chi-square quantiles");
  common(qq);
  heavy(qq);
  designed(qq);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (*fit) return detail::cmd_fit(c, out);
    if (*test) return detail::cmd_test(c, out);
    if (*region) return detail::cmd_region(c, out);
    if (*simulate) return detail::cmd_simulate(c, *simulate, out);
    if (*qq) return detail::cmd_qq(c, *qq, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const SolverError& e) {
    err << "solver error: " << e.what() << '\n';
    return kExitSolver;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}

}  // namespace drmel

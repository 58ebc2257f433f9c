#pragma once

// Domain types shared by every part of the library: multi-sample data,
// density-ratio basis functions, quantile hypotheses and DRM parameters.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace drmel {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: data files, specs, basis strings, values outside a domain.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A hypothesised quantile value sits outside the admissible data range.
class OutOfRangeError : public ValidationError {
 public:
  OutOfRangeError(std::size_t population, const std::string& what)
      : ValidationError(what), population_(population) {}
  std::size_t population() const noexcept { return population_; }

 private:
  std::size_t population_;
};

/// Numerical failure: non-convergence, singular systems, infeasible iterates.
class SolverError : public Error {
 public:
  using Error::Error;
};

class InfeasibleError : public SolverError {
 public:
  using SolverError::SolverError;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(std::string_view s, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(delim, start);
    out.emplace_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  // std::from_chars for double is available in libstdc++ 11.
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MultiSample
// ---------------------------------------------------------------------------

/// m+1 independent samples. Population k holds n_k >= 1 finite observations.
class MultiSample {
 public:
  MultiSample() = default;

  explicit MultiSample(std::vector<std::vector<double>> samples) : samples_(std::move(samples)) {
    if (samples_.empty()) throw ValidationError("at least one population is required");
    total_ = 0;
    sorted_.reserve(samples_.size());
    for (std::size_t k = 0; k < samples_.size(); ++k) {
      if (samples_[k].empty())
        throw ValidationError("population " + std::to_string(k) + " is empty");
      for (double x : samples_[k])
        if (!std::isfinite(x))
          throw ValidationError("population " + std::to_string(k) + " has a non-finite value");
      total_ += samples_[k].size();
      auto s = samples_[k];
      std::sort(s.begin(), s.end());
      sorted_.push_back(std::move(s));
    }
  }

  std::size_t populations() const noexcept { return samples_.size(); }
  /// Number of non-base populations.
  std::size_t m() const noexcept { return samples_.size() - 1; }
  std::size_t size(std::size_t k) const { return samples_.at(k).size(); }
  std::size_t total() const noexcept { return total_; }
  double rho(std::size_t k) const {
    return static_cast<double>(size(k)) / static_cast<double>(total_);
  }

  std::span<const double> sample(std::size_t k) const { return samples_.at(k); }
  std::span<const double> sorted(std::size_t k) const { return sorted_.at(k); }
  double min(std::size_t k) const { return sorted_.at(k).front(); }
  double max(std::size_t k) const { return sorted_.at(k).back(); }

  double pooled_min() const {
    double v = sorted_.front().front();
    for (const auto& s : sorted_) v = std::min(v, s.front());
    return v;
  }
  double pooled_max() const {
    double v = sorted_.front().back();
    for (const auto& s : sorted_) v = std::max(v, s.back());
    return v;
  }

  /// Observations concatenated population by population (the pooled order
  /// used for weight vectors throughout the library).
  std::vector<double> pooled() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& s : samples_) out.insert(out.end(), s.begin(), s.end());
    return out;
  }
  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(total_);
    for (std::size_t k = 0; k < samples_.size(); ++k) out.insert(out.end(), samples_[k].size(), k);
    return out;
  }

  const std::vector<std::vector<double>>& raw() const noexcept { return samples_; }

 private:
  std::vector<std::vector<double>> samples_;
  std::vector<std::vector<double>> sorted_;
  std::size_t total_ = 0;
};

/// Reads "<population index><delim><value>" records. Blank lines and lines
/// starting with '#' are skipped.
inline MultiSample parse_samples(std::istream& in, char delimiter = ',') {
  std::vector<std::vector<double>> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto fields = detail::split(t, delimiter);
    if (fields.size() != 2) throw ParseError(lineno, "expected 2 fields, got " + std::to_string(fields.size()));
    const auto idx = detail::parse_int(fields[0]);
    if (!idx || *idx < 0) throw ParseError(lineno, "bad population index '" + fields[0] + "'");
    const auto val = detail::parse_double(fields[1]);
    if (!val) throw ParseError(lineno, "bad value '" + fields[1] + "'");
    if (!std::isfinite(*val)) throw ParseError(lineno, "non-finite value");
    const auto k = static_cast<std::size_t>(*idx);
    if (k >= samples.size()) samples.resize(k + 1);
    samples[k].push_back(*val);
  }
  if (samples.empty()) throw ValidationError("no observations");
  for (std::size_t k = 0; k < samples.size(); ++k)
    if (samples[k].empty()) throw ValidationError("population " + std::to_string(k) + " missing");
  return MultiSample(std::move(samples));
}

inline MultiSample load_samples(const std::string& path, char delimiter = ',') {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open data file '" + path + "'");
  return parse_samples(in, delimiter);
}

inline void write_samples(std::ostream& out, const MultiSample& ms, char delimiter = ',') {
  out.precision(17);
  for (std::size_t k = 0; k < ms.populations(); ++k)
    for (double x : ms.sample(k)) out << k << delimiter << x << '\n';
}

// ---------------------------------------------------------------------------
// Basis functions
// ---------------------------------------------------------------------------

enum class BasisTerm { one, identity, square, log, power };

struct BasisComponent {
  BasisTerm term = BasisTerm::one;
  double exponent = 0.0;  // only meaningful for power

  bool operator==(const BasisComponent& o) const {
    return term == o.term && (term != BasisTerm::power || exponent == o.exponent);
  }

  bool needs_positive() const {
    return term == BasisTerm::log ||
           (term == BasisTerm::power && (exponent != std::floor(exponent) || exponent < 0));
  }

  double operator()(double x) const {
    switch (term) {
      case BasisTerm::one: return 1.0;
      case BasisTerm::identity: return x;
      case BasisTerm::square: return x * x;
      case BasisTerm::log:
        if (!(x > 0)) throw DomainError("log x requires x > 0, got " + std::to_string(x));
        return std::log(x);
      case BasisTerm::power: {
        if (needs_positive() && !(x > 0))
          throw DomainError("x^" + std::to_string(exponent) + " requires x > 0, got " + std::to_string(x));
        return std::pow(x, exponent);
      }
    }
    return 0.0;
  }

  /// Strictly monotone on [lo, hi]?
  bool monotone_on(double lo, double hi) const {
    switch (term) {
      case BasisTerm::one: return false;
      case BasisTerm::identity: return true;
      case BasisTerm::log: return lo > 0;
      case BasisTerm::square: return lo >= 0 || hi <= 0;
      case BasisTerm::power: {
        if (lo > 0) return true;
        const bool odd_int = exponent == std::floor(exponent) && exponent > 0 &&
                             std::fmod(exponent, 2.0) != 0.0;
        if (odd_int) return true;
        return exponent > 0 && exponent == std::floor(exponent) && (lo >= 0 || hi <= 0);
      }
    }
    return false;
  }

  std::string name() const {
    switch (term) {
      case BasisTerm::one: return "1";
      case BasisTerm::identity: return "x";
      case BasisTerm::square: return "x2";
      case BasisTerm::log: return "logx";
      case BasisTerm::power: {
        std::ostringstream os;
        os << "x^" << exponent;
        return os.str();
      }
    }
    return "?";
  }
};

/// q(x): first component is the constant 1, remaining components distinct.
class Basis {
 public:
  Basis() : comps_{BasisComponent{}} {}

  explicit Basis(std::vector<BasisComponent> comps) : comps_(std::move(comps)) {
    if (comps_.empty() || comps_.front().term != BasisTerm::one)
      throw ValidationError("basis must start with the constant component 1");
    for (std::size_t i = 0; i < comps_.size(); ++i)
      for (std::size_t j = i + 1; j < comps_.size(); ++j)
        if (comps_[i] == comps_[j])
          throw ValidationError("basis component '" + comps_[i].name() + "' repeated");
  }

  /// Parses strings like "1,x,x2", "1,x,logx", "1,x^0.5".
  static Basis parse(std::string_view text) {
    std::vector<BasisComponent> comps;
    for (const auto& tok : detail::split(text, ',')) {
      BasisComponent c;
      if (tok == "1") {
        c.term = BasisTerm::one;
      } else if (tok == "x") {
        c.term = BasisTerm::identity;
      } else if (tok == "x2" || tok == "x^2") {
        c.term = BasisTerm::square;
      } else if (tok == "logx" || tok == "log(x)" || tok == "log") {
        c.term = BasisTerm::log;
      } else if (tok.rfind("x^", 0) == 0) {
        const auto p = detail::parse_double(std::string_view(tok).substr(2));
        if (!p || !std::isfinite(*p)) throw ValidationError("bad basis power '" + tok + "'");
        if (*p == 0.0) {
          c.term = BasisTerm::one;
        } else if (*p == 1.0) {
          c.term = BasisTerm::identity;
        } else if (*p == 2.0) {
          c.term = BasisTerm::square;
        } else {
          c.term = BasisTerm::power;
          c.exponent = *p;
        }
      } else {
        throw ValidationError("unknown basis component '" + tok + "'");
      }
      comps.push_back(c);
    }
    return Basis(std::move(comps));
  }

  std::size_t dim() const noexcept { return comps_.size(); }
  const std::vector<BasisComponent>& components() const noexcept { return comps_; }

  bool requires_positive_data() const {
    return std::any_of(comps_.begin(), comps_.end(), [](const auto& c) { return c.needs_positive(); });
  }

  void eval(double x, std::span<double> out) const {
    for (std::size_t i = 0; i < comps_.size(); ++i) out[i] = comps_[i](x);
  }

  Vec eval(double x) const {
    Vec q(static_cast<Eigen::Index>(dim()));
    eval(x, std::span<double>(q.data(), dim()));
    return q;
  }

  /// Index of a component that is strictly monotone over [lo, hi], preferring
  /// x, then log x, then the rest in declaration order.
  std::optional<std::size_t> monotone_component(double lo, double hi) const {
    for (auto want : {BasisTerm::identity, BasisTerm::log, BasisTerm::power, BasisTerm::square})
      for (std::size_t i = 1; i < comps_.size(); ++i)
        if (comps_[i].term == want && comps_[i].monotone_on(lo, hi)) return i;
    return std::nullopt;
  }

  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < comps_.size(); ++i) {
      if (i) s += ',';
      s += comps_[i].name();
    }
    return s;
  }

 private:
  std::vector<BasisComponent> comps_;
};

inline Vec eval_basis(const Basis& b, double x) { return b.eval(x); }

/// Every observation must lie in the basis domain.
inline void validate_basis_domain(const MultiSample& ms, const Basis& b) {
  if (!b.requires_positive_data()) return;
  for (std::size_t k = 0; k < ms.populations(); ++k)
    if (!(ms.min(k) > 0))
      throw DomainError("basis " + b.to_string() + " requires positive data; population " +
                        std::to_string(k) + " has minimum " + std::to_string(ms.min(k)));
}

// ---------------------------------------------------------------------------
// Quantile specs
// ---------------------------------------------------------------------------

struct QuantileSpec {
  std::size_t population = 0;
  double tau = 0.5;
  std::optional<double> xi;

  /// "r:tau" or "r:tau:xi".
  static QuantileSpec parse(std::string_view text) {
    const auto f = detail::split(text, ':');
    if (f.size() < 2 || f.size() > 3)
      throw ValidationError("quantile spec must be 'r:tau[:xi]', got '" + std::string(text) + "'");
    const auto r = detail::parse_int(f[0]);
    const auto tau = detail::parse_double(f[1]);
    if (!r || *r < 0) throw ValidationError("bad population in spec '" + std::string(text) + "'");
    if (!tau) throw ValidationError("bad tau in spec '" + std::string(text) + "'");
    QuantileSpec s{static_cast<std::size_t>(*r), *tau, std::nullopt};
    if (f.size() == 3) {
      const auto xi = detail::parse_double(f[2]);
      if (!xi || !std::isfinite(*xi)) throw ValidationError("bad xi in spec '" + std::string(text) + "'");
      s.xi = *xi;
    }
    if (!(s.tau > 0.0 && s.tau < 1.0)) throw ValidationError("tau must lie in (0,1)");
    return s;
  }
};

/// Which observations bound an admissible hypothesised quantile.
enum class RangeRule {
  own,    ///< min_j x_rj < xi < max_j x_rj (the population's own sample)
  pooled  ///< strictly inside the pooled data range
};

inline void validate_specs(const MultiSample& ms, std::span<const QuantileSpec> specs) {
  if (specs.empty()) throw ValidationError("at least one quantile spec is required");
  for (const auto& s : specs) {
    if (s.population >= ms.populations())
      throw ValidationError("spec population " + std::to_string(s.population) + " out of range (m+1=" +
                            std::to_string(ms.populations()) + ")");
    if (!(s.tau > 0.0 && s.tau < 1.0)) throw ValidationError("tau must lie in (0,1)");
  }
}

inline bool quantile_value_admissible(const MultiSample& ms, std::size_t r, double xi,
                                      RangeRule rule = RangeRule::own) {
  const double lo = rule == RangeRule::own ? ms.min(r) : ms.pooled_min();
  const double hi = rule == RangeRule::own ? ms.max(r) : ms.pooled_max();
  return lo < xi && xi < hi;
}

/// Throws OutOfRangeError for the first spec whose xi is not strictly inside
/// the data range of its population.
inline void validate_quantile_values(const MultiSample& ms, std::span<const QuantileSpec> specs,
                                     RangeRule rule = RangeRule::own) {
  validate_specs(ms, specs);
  for (const auto& s : specs) {
    if (!s.xi) throw ValidationError("spec for population " + std::to_string(s.population) + " has no xi");
    if (!quantile_value_admissible(ms, s.population, *s.xi, rule)) {
      std::ostringstream os;
      os << "xi=" << *s.xi << " for population " << s.population << " is outside the open data range";
      throw OutOfRangeError(s.population, os.str());
    }
  }
}

// ---------------------------------------------------------------------------
// DRM parameters
// ---------------------------------------------------------------------------

/// theta: m rows (populations 1..m) by d columns. theta_0 = 0 is implicit.
struct DrmParams {
  Mat theta;

  DrmParams() = default;
  DrmParams(std::size_t m, std::size_t d)
      : theta(Mat::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d))) {}
  explicit DrmParams(Mat t) : theta(std::move(t)) {}

  std::size_t m() const noexcept { return static_cast<std::size_t>(theta.rows()); }
  std::size_t d() const noexcept { return static_cast<std::size_t>(theta.cols()); }

  /// Flattened in component-major order: theta_11, theta_21, ..., theta_m1, theta_12, ...
  Vec flat() const { return Eigen::Map<const Vec>(theta.data(), theta.size()); }

  static DrmParams from_flat(const Eigen::Ref<const Vec>& v, std::size_t m, std::size_t d) {
    DrmParams p(m, d);
    p.theta = Eigen::Map<const Mat>(v.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
    return p;
  }

  /// theta_k^T q for k in 0..m (k = 0 gives 0).
  double eta(std::size_t k, const Eigen::Ref<const Vec>& q) const {
    if (k == 0) return 0.0;
    return theta.row(static_cast<Eigen::Index>(k - 1)).dot(q);
  }
};

}  // namespace drmel

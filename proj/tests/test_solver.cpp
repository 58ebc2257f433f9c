#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <algorithm>
#include <cmath>
#include <random>

#include "drmel/solver.hpp"

using namespace drmel;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(SolveSystem, ScalarQuadratic) {
  NonlinearSystem sys;
  sys.residual = [](const Vec& x) { return vec({x[0] * x[0] - 4.0}); };
  sys.jacobian = [](const Vec& x) { return Mat::Constant(1, 1, 2.0 * x[0]); };
  const auto rep = solve_system(sys, vec({3.0}));
  ASSERT_TRUE(rep.converged);
  EXPECT_NEAR(rep.root[0], 2.0, 1e-10);
  EXPECT_LE(rep.residual_norm, SolveOptions{}.residual_tol);
}

TEST(SolveSystem, LinearScalarWithFiniteDifferences) {
  NonlinearSystem sys;
  sys.residual = [](const Vec& x) { return x; };
  const auto rep = solve_system(sys, vec({5.0}));
  ASSERT_TRUE(rep.converged);
  EXPECT_NEAR(rep.root[0], 0.0, 1e-10);
}

TEST(SolveSystem, TwoDimensionalLinear) {
  NonlinearSystem sys;
  sys.residual = [](const Vec& x) { return vec({x[0] + x[1] - 3.0, x[0] - x[1] - 1.0}); };
  sys.jacobian = [](const Vec&) {
    Mat J(2, 2);
    J << 1, 1, 1, -1;
    return J;
  };
  const auto rep = solve_system(sys, vec({0.0, 0.0}));
  ASSERT_TRUE(rep.converged);
  EXPECT_NEAR(rep.root[0], 2.0, 1e-12);
  EXPECT_NEAR(rep.root[1], 1.0, 1e-12);
  EXPECT_LE(rep.iterations, 2);
}

TEST(SolveSystem, WellConditionedLinearSystemsConvergeInTwoIterations) {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> z;
  for (int trial = 0; trial < 20; ++trial) {
    const int p = 2 + trial % 5;
    Mat A = Mat::Identity(p, p) * 3.0;
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) A(i, j) += 0.3 * z(gen);
    Vec b(p);
    for (int i = 0; i < p; ++i) b[i] = z(gen);
    NonlinearSystem sys;
    sys.residual = [&](const Vec& x) -> Vec { return A * x - b; };
    sys.jacobian = [&](const Vec&) -> Mat { return A; };
    const auto rep = solve_system(sys, Vec::Zero(p));
    ASSERT_TRUE(rep.converged);
    EXPECT_LE(rep.iterations, 2);
    EXPECT_LT((A * rep.root - b).lpNorm<Eigen::Infinity>(), 1e-10);
  }
}

TEST(SolveSystem, NeverAcceptsInfeasibleIterates) {
  // log(x) = 1 from x0 = 20: the full Newton step lands at x < 0
  std::vector<double> probed;
  NonlinearSystem pred;
  pred.residual = [](const Vec& x) { return vec({std::log(std::abs(x[0])) - 1.0}); };
  pred.jacobian = [](const Vec& x) { return Mat::Constant(1, 1, 1.0 / x[0]); };
  pred.feasible = [&](const Vec& x) {
    probed.push_back(x[0]);
    return x[0] > 0;
  };
  const auto r1 = solve_system(pred, vec({20.0}));
  ASSERT_TRUE(r1.converged);
  EXPECT_NEAR(r1.root[0], std::exp(1.0), 1e-9);
  EXPECT_TRUE(std::any_of(probed.begin(), probed.end(), [](double v) { return v <= 0; }));

  std::vector<double> visited;
  NonlinearSystem guarded;
  guarded.residual = [&](const Vec& x) {
    if (!(x[0] > 0)) throw InfeasibleError("x must be positive");
    visited.push_back(x[0]);
    return vec({std::log(x[0]) - 1.0});
  };
  guarded.jacobian = [](const Vec& x) { return Mat::Constant(1, 1, 1.0 / x[0]); };
  const auto r2 = solve_system(guarded, vec({20.0}));
  ASSERT_TRUE(r2.converged);
  EXPECT_NEAR(r2.root[0], std::exp(1.0), 1e-9);
  for (double v : visited) EXPECT_GT(v, 0.0);
  EXPECT_GT(r2.root[0], 0.0);
}

TEST(SolveSystem, ReportsNonConvergence) {
  NonlinearSystem sys;
  sys.residual = [](const Vec& x) { return vec({x[0] * x[0] + 1.0}); };
  sys.jacobian = [](const Vec& x) { return Mat::Constant(1, 1, 2.0 * x[0]); };
  SolveOptions o;
  o.max_iter = 30;
  const auto rep = solve_system(sys, vec({1.0}), o);
  EXPECT_FALSE(rep.converged);
}

TEST(ChiSquare, CdfExamples) {
  EXPECT_NEAR(chisq_cdf(2, 5.9915), 1.0 - std::exp(-5.9915 / 2.0), 1e-14);
  EXPECT_NEAR(chisq_cdf(2, 5.9915), 0.95, 1e-5);
  EXPECT_DOUBLE_EQ(chisq_cdf(1, 0.0), 0.0);
  // oracle: arbitrary-precision incomplete gamma
  EXPECT_NEAR(chisq_cdf(1, 3.8415), 0.95000122792877773, 1e-12);
}

TEST(ChiSquare, CdfAgainstReferenceValues) {
  // oracle values from an arbitrary-precision incomplete gamma evaluation
  EXPECT_NEAR(chisq_cdf(3, 2.5), 0.52470891665697941, 1e-12);
  EXPECT_NEAR(chisq_cdf(7, 12.0), 0.89944113149164116, 1e-12);
  EXPECT_NEAR(chisq_cdf(10, 0.5), 6.6117105610342470e-06, 1e-14);
  EXPECT_NEAR(chisq_cdf(4, 30.0), 0.99999510556287197, 1e-12);
}

TEST(ChiSquare, CdfAgainstBoost) {
  for (int df = 1; df <= 12; ++df)
    for (double x : {0.01, 0.3, 1.0, 2.7, 5.0, 9.0, 17.0, 40.0})
      EXPECT_NEAR(chisq_cdf(df, x), boost::math::gamma_p(df / 2.0, x / 2.0), 1e-12) << df << " " << x;
}

TEST(ChiSquare, QuantileExamples) {
  EXPECT_NEAR(chisq_quantile(2, 0.95), -2.0 * std::log(0.05), 1e-9);
  EXPECT_NEAR(chisq_quantile(2, 0.95), 5.99146, 1e-5);
  EXPECT_NEAR(chisq_quantile(2, 0.90), 4.60517, 1e-5);
  EXPECT_NEAR(chisq_quantile(1, 0.95), 3.8414588206941245, 1e-9);
  const boost::math::chi_squared_distribution<double> c5(5.0);
  EXPECT_NEAR(chisq_quantile(5, 0.975), boost::math::quantile(c5, 0.975), 1e-9);
}

TEST(ChiSquare, QuantileCdfRoundTrip) {
  for (int df = 1; df <= 10; ++df)
    for (double p = 0.001; p < 0.999; p += 0.0125) EXPECT_NEAR(chisq_cdf(df, chisq_quantile(df, p)), p, 1e-8);
}

TEST(ChiSquare, PdfIntegratesToCdf) {
  const double h = 1e-4;
  for (int df : {1, 2, 5})
    for (double x : {0.5, 2.0, 6.0}) {
      const double fd = (chisq_cdf(df, x + h) - chisq_cdf(df, x - h)) / (2 * h);
      EXPECT_NEAR(chisq_pdf(df, x), fd, 1e-7);
    }
}

TEST(ChiSquare, RejectsInvalidArguments) {
  EXPECT_THROW(chisq_quantile(2, 1.0), ValidationError);
  EXPECT_THROW(chisq_quantile(0, 0.5), ValidationError);
  EXPECT_THROW(chisq_cdf(0, 1.0), ValidationError);
}

TEST(CheckGradient, Examples) {
  auto sq = [](const Vec& x) { return x[0] * x[0]; };
  auto dsq = [](const Vec& x) { return vec({2 * x[0]}); };
  EXPECT_LT(check_gradient(sq, dsq, vec({3.0}), 1e-5), 1e-8);

  auto c = [](const Vec&) { return 4.2; };
  auto dc = [](const Vec& x) { return Vec::Zero(x.size()).eval(); };
  EXPECT_EQ(check_gradient(c, dc, vec({1.0, -2.0}), 1e-5), 0.0);

  auto xy = [](const Vec& x) { return x[0] * x[1]; };
  auto dxy = [](const Vec& x) { return vec({x[1], x[0]}); };
  EXPECT_LT(check_gradient(xy, dxy, vec({2.0, 5.0}), 1e-5), 1e-8);

  auto wrong = [](const Vec& x) { return vec({x[1] + 1.0, x[0]}); };
  EXPECT_GT(check_gradient(xy, wrong, vec({2.0, 5.0}), 1e-5), 0.1);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "drmel/el_core.hpp"
#include "drmel/sim.hpp"
#include "test_support.hpp"

using namespace drmel;
using drmel::fixtures::fd_jacobian;
using drmel::fixtures::max_rel_error;
using drmel::fixtures::normal_samples;
using drmel::fixtures::tilted_mass;

namespace {

const Basis kQuad = Basis::parse("1,x,x2");

DualPoint zero_point(std::size_t l, std::size_t m, std::size_t d) {
  DualPoint p;
  p.lambda = Vec::Zero(static_cast<Eigen::Index>(l));
  p.theta = DrmParams(m, d);
  return p;
}

}  // namespace

TEST(Hbar, ZeroThetaGivesOne) {
  const MultiSample ms({{1, 2}, {3}, {4, 5, 6}});
  const DrmParams zero(2, 3);
  for (double x : {-3.0, 0.0, 1.5, 40.0}) EXPECT_NEAR(hbar(ms, kQuad, zero, x), 1.0, 1e-15);
}

TEST(Hbar, TwoEqualPopulations) {
  const MultiSample ms({{1, 2}, {3, 4}});
  DrmParams p(1, 2);
  p.theta(0, 0) = std::log(3.0);  // theta_1^T q(x) = log 3 everywhere
  const Basis b = Basis::parse("1,x");
  EXPECT_NEAR(hbar(ms, b, p, 0.7), 2.0, 1e-14);
}

TEST(Hbar, LargeExponentsStayFinite) {
  const MultiSample ms({{1, 2}, {3, 4}});
  DrmParams p(1, 2);
  p.theta(0, 0) = 800.0;
  const Basis b = Basis::parse("1,x");
  const double lh = log_hbar(ms, b, p, 0.0);
  EXPECT_TRUE(std::isfinite(lh));
  EXPECT_NEAR(lh, 800.0 + std::log(0.5), 1e-9);
  p.theta(0, 0) = -800.0;
  EXPECT_NEAR(log_hbar(ms, b, p, 0.0), std::log(0.5), 1e-12);
}

TEST(DualValue, ZeroParametersGiveZero) {
  const auto ms = normal_samples({20, 30, 25}, {0, 1, 2}, {1, 1, 1}, 3);
  const std::vector<QuantileSpec> specs{{0, 0.5, 0.1}, {2, 0.3, 1.5}};
  // zero up to the rounding of sum_r rho_r = 1
  EXPECT_NEAR(dual_value(ms, kQuad, specs, zero_point(2, 2, 3)), 0.0, 1e-12);
}

TEST(DualValue, MatchesLogElAtTheFit) {
  const auto ms = normal_samples({60, 50, 70}, {0, 0.5, 1}, {1, 1.2, 0.8}, 5);
  const auto fit = fit_unconstrained(ms, kQuad);
  const std::vector<QuantileSpec> specs{{1, 0.5, 0.4}};
  DualPoint pt;
  pt.lambda = Vec::Zero(1);
  pt.theta = fit.theta_hat;
  const double n = static_cast<double>(ms.total());
  EXPECT_NEAR(dual_value(ms, kQuad, specs, pt), fit.log_el + n * std::log(n), 1e-8);
}

TEST(DualValue, SingleSampleClosedForm) {
  // m = 0: lambda = (k/(n tau) - 1)/(1 - tau) puts mass tau/k below xi
  const MultiSample ms({{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}});
  const Basis b = Basis::parse("1,x");
  const double tau = 0.5;
  const std::size_t n = 10, k = 7;
  const std::vector<QuantileSpec> specs{{0, tau, 7.5}};
  DualPoint pt = zero_point(1, 0, 2);
  pt.lambda[0] = (static_cast<double>(k) / (n * tau) - 1.0) / (1.0 - tau);
  const double d = dual_value(ms, b, specs, pt);
  EXPECT_NEAR(d, -0.5 * closed_form_single_sample_rn(n, k, tau), 1e-12);
  // the constrained log-EL is D - n log n and equals sum log p
  const double lel = 7 * std::log(tau / 7) + 3 * std::log((1 - tau) / 3);
  EXPECT_NEAR(d - 10 * std::log(10.0), lel, 1e-12);
  EXPECT_LT(dual_gradient(ms, b, specs, pt).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DualValue, InfeasiblePointThrows) {
  const MultiSample ms({{1, 2, 3, 4}});
  const std::vector<QuantileSpec> specs{{0, 0.5, 2.5}};
  DualPoint pt = zero_point(1, 0, 2);
  pt.lambda[0] = 3.0;  // 1 + 3 (0 - 0.5) < 0 above xi
  EXPECT_THROW(dual_value(ms, Basis::parse("1,x"), specs, pt), InfeasibleError);
  DualPoint wrong = zero_point(2, 0, 2);
  EXPECT_THROW(dual_value(ms, Basis::parse("1,x"), specs, wrong), ValidationError);
}

TEST(DualGradient, LambdaComponentAtOrigin) {
  const MultiSample ms({{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}});
  const std::vector<QuantileSpec> specs{{0, 0.3, 6.5}};
  const Vec g = dual_gradient(ms, Basis::parse("1,x"), specs, zero_point(1, 0, 2));
  ASSERT_EQ(g.size(), 1);
  EXPECT_NEAR(g[0], -(6.0 - 10 * 0.3), 1e-12);
}

TEST(DualGradient, MatchesFiniteDifferences) {
  const auto ms = normal_samples({40, 35, 45}, {0, 0.8, 1.5}, {1, 1.3, 0.9}, 11);
  const auto fit = fit_unconstrained(ms, kQuad);
  const std::vector<QuantileSpec> specs{{0, 0.5, 0.05}, {2, 0.4, 1.3}};
  Rng rng(17);
  int checked = 0;
  for (int trial = 0; trial < 40 && checked < 20; ++trial) {
    DualPoint pt;
    pt.lambda = Vec(2);
    pt.lambda << 0.3 * (rng.uniform() - 0.5), 0.3 * (rng.uniform() - 0.5);
    pt.theta = fit.theta_hat;
    pt.theta.theta.array() += 0.05 * (Mat::Random(2, 3).array());
    try {
      dual_value(ms, kQuad, specs, pt);
    } catch (const InfeasibleError&) {
      continue;
    }
    const DualPoint base = pt;
    auto f = [&](const Vec& v) { return dual_value(ms, kQuad, specs, DualPoint::from_flat(v, 2, 2, 3)); };
    auto g = [&](const Vec& v) { return dual_gradient(ms, kQuad, specs, DualPoint::from_flat(v, 2, 2, 3)); };
    EXPECT_LT(check_gradient(f, g, base.flat(), 1e-6), 1e-6);
    const Mat H = dual_hessian(ms, kQuad, specs, base);
    EXPECT_LT(max_rel_error(fd_jacobian(g, base.flat(), 1e-6), H), 1e-5);
    EXPECT_LT((H - H.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(DualGradient, UnbiasedAtTheTruth) {
  // E[dD/dtheta (0, theta*)] = 0 and E[dD/dlambda] = 0 at the true quantile
  Design d;
  d.mean = {0, 1};
  d.sd = {1, 1.5};
  d.sizes = {80};
  d.specs = {{1, 0.5, std::nullopt}};
  const auto truth = true_specs(d);
  DualPoint pt;
  pt.lambda = Vec::Zero(1);
  pt.theta = true_drm_params(d);
  const int reps = 400;
  Mat g(reps, 4);
  for (int r = 0; r < reps; ++r) {
    const MultiSample ms = generate(d, static_cast<std::size_t>(r));
    g.row(r) = dual_gradient(ms, kQuad, truth, pt).transpose() / std::sqrt(static_cast<double>(ms.total()));
  }
  const Vec mean = g.colwise().mean();
  const Vec sd = ((g.rowwise() - mean.transpose()).array().square().colwise().sum() / (reps - 1)).sqrt();
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_LT(std::abs(mean[j]), 4.0 * sd[j] / std::sqrt(reps)) << j;
}

TEST(DualHessian, ThetaBlockNegativeSemidefinite) {
  const auto ms = normal_samples({30, 40, 30}, {0, 1, 2}, {1, 1, 2}, 19);
  const std::vector<QuantileSpec> specs{{1, 0.5, 1.0}};
  for (int trial = 0; trial < 10; ++trial) {
    DualPoint pt = zero_point(1, 2, 3);
    pt.theta.theta = 0.2 * Mat::Random(2, 3);
    const Mat H = dual_hessian(ms, kQuad, specs, pt);
    const Mat Htt = H.bottomRightCorner(6, 6);
    Eigen::SelfAdjointEigenSolver<Mat> es(Htt);
    EXPECT_LT(es.eigenvalues().maxCoeff(), 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff()));
  }
}

TEST(DualHessian, ScaledHessianStaysFullRank) {
  Design d;
  d.mean = {0, 1, 2};
  d.sd = {1, 1.3, 1.5};
  d.specs = {{0, 0.5, std::nullopt}, {2, 0.5, std::nullopt}};
  const auto truth = true_specs(d);
  DualPoint pt;
  pt.lambda = Vec::Zero(2);
  pt.theta = true_drm_params(d);
  std::vector<double> smallest;
  for (std::size_t n : {100, 400, 1600}) {
    d.sizes = {n};
    const MultiSample ms = generate(d, 0);
    const Mat S = dual_hessian(ms, kQuad, truth, pt) / static_cast<double>(ms.total());
    Eigen::JacobiSVD<Mat> svd(S);
    smallest.push_back(svd.singularValues().minCoeff());
  }
  for (double s : smallest) EXPECT_GT(s, 1e-4);
  EXPECT_LT(*std::max_element(smallest.begin(), smallest.end()) / *std::min_element(smallest.begin(), smallest.end()),
            3.0);
}

TEST(Fit, SingleSampleIsEmpirical) {
  const MultiSample ms({{3, 1, 4, 1, 5, 9, 2, 6, 5, 3}});
  const auto fit = fit_unconstrained(ms, Basis::parse("1,x"));
  EXPECT_EQ(fit.theta_hat.m(), 0u);
  EXPECT_NEAR(fit.log_el, -10 * std::log(10.0), 1e-12);
  for (Eigen::Index i = 0; i < fit.weights.size(); ++i) EXPECT_NEAR(fit.weights[i], 0.1, 1e-15);
}

TEST(Fit, NormalizationHoldsForEveryPopulation) {
  const auto ms = normal_samples({50, 40, 60, 45}, {0, 0.5, 1, 2}, {1, 1.2, 0.7, 1.6}, 23);
  const auto fit = fit_unconstrained(ms, kQuad);
  ASSERT_TRUE(fit.report.converged);
  for (std::size_t r = 0; r <= ms.m(); ++r)
    EXPECT_NEAR(tilted_mass(ms, kQuad, fit.theta_hat, fit.weights, r), 1.0, 1e-8) << r;
  EXPECT_GT(fit.info_condition, 1.0);
  EXPECT_GT(fit.moment_min_eigenvalue, 0.0);
}

TEST(Fit, IdenticalPopulationsGiveSmallTheta) {
  std::vector<double> norms;
  for (std::size_t n : {100, 1600}) {
    const auto pool = normal_samples({2 * n}, {0}, {1}, 29);
    const auto s = pool.sample(0);
    const MultiSample ms({std::vector<double>(s.begin(), s.begin() + static_cast<long>(n)),
                          std::vector<double>(s.begin() + static_cast<long>(n), s.end())});
    norms.push_back(fit_unconstrained(ms, kQuad).theta_hat.theta.norm());
  }
  EXPECT_LT(norms[0], 1.0);
  EXPECT_LT(norms[1], norms[0]);
}

TEST(Fit, CollinearBasisIsRejected) {
  const MultiSample ms({{1, 2, 1, 2}, {1, 2, 2}});
  EXPECT_THROW(fit_unconstrained(ms, kQuad), SolverError);
}

TEST(Fit, AffineDataTransformIsInvariant) {
  // q(a x + c) is an invertible affine recombination of (1, x, x^2)
  const auto ms = normal_samples({40, 50, 45}, {0, 1, 0.5}, {1, 1.4, 0.8}, 31);
  std::vector<std::vector<double>> t(ms.populations());
  for (std::size_t k = 0; k < ms.populations(); ++k)
    for (double x : ms.sample(k)) t[k].push_back(2.5 * x - 3.0);
  const MultiSample mt(std::move(t));
  const auto f1 = fit_unconstrained(ms, kQuad);
  const auto f2 = fit_unconstrained(mt, kQuad);
  EXPECT_NEAR(f1.log_el, f2.log_el, 1e-6);
  EXPECT_LT((f1.weights - f2.weights).cwiseAbs().maxCoeff(), 1e-6);
  const std::vector<QuantileSpec> specs{{0, 0.5, std::nullopt}, {1, 0.25, std::nullopt}, {2, 0.9, std::nullopt}};
  const Vec q1 = mele_quantiles(f1, ms, kQuad, specs), q2 = mele_quantiles(f2, mt, kQuad, specs);
  for (Eigen::Index s = 0; s < q1.size(); ++s) EXPECT_NEAR(q2[s], 2.5 * q1[s] - 3.0, 1e-9);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto c1 = fitted_cdf(f1, ms, kQuad, r), c2 = fitted_cdf(f2, mt, kQuad, r);
    for (std::size_t i = 0; i < c1.jumps.size(); ++i)
      EXPECT_NEAR(c1.cumulative[i], c2(2.5 * c1.jumps[i] - 3.0), 1e-6);
  }
}

TEST(Fit, RecombinedDesignMatrixIsInvariant) {
  const auto ms = normal_samples({40, 50}, {0, 1}, {1, 1.4}, 37);
  const Mat Q = basis_matrix(ms, kQuad);
  Mat A(3, 3);
  A << 1, 0.5, -2, 0, 2, 0.3, 0, -1, 1.5;  // first column keeps the constant
  const Mat Qa = Q * A;
  DualSystem s1(ms, Q, {}), s2(ms, Qa, {});
  const std::vector<double> th{0.2, -0.1, 0.05};
  Vec x1(3), x2;
  x1 << th[0], th[1], th[2];
  x2 = A.inverse() * x1;  // theta^T q unchanged
  EXPECT_NEAR(s1.evaluate(x1, DualSystem::Order::value)->value, s2.evaluate(x2, DualSystem::Order::value)->value,
              1e-9);
  EXPECT_LT((s1.weights(x1) - s2.weights(x2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fit, BaseLabelSwapIsInvariant) {
  const auto ms = normal_samples({40, 55, 50}, {0, 1, 0.3}, {1, 1.5, 0.9}, 41);
  const MultiSample sw({std::vector<double>(ms.sample(1).begin(), ms.sample(1).end()),
                        std::vector<double>(ms.sample(0).begin(), ms.sample(0).end()),
                        std::vector<double>(ms.sample(2).begin(), ms.sample(2).end())});
  const auto f1 = fit_unconstrained(ms, kQuad);
  const auto f2 = fit_unconstrained(sw, kQuad);
  EXPECT_NEAR(f1.log_el, f2.log_el, 1e-6);
  // theta'_1 = -theta_1, theta'_2 = theta_2 - theta_1
  const Vec t1 = f1.theta_hat.theta.row(0), t2 = f1.theta_hat.theta.row(1);
  EXPECT_LT((Vec(f2.theta_hat.theta.row(0)) + t1).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT((Vec(f2.theta_hat.theta.row(1)) - (t2 - t1)).cwiseAbs().maxCoeff(), 1e-5);
  const std::size_t map[3] = {1, 0, 2};
  for (std::size_t r = 0; r < 3; ++r) {
    const auto c1 = fitted_cdf(f1, ms, kQuad, r), c2 = fitted_cdf(f2, sw, kQuad, map[r]);
    ASSERT_EQ(c1.jumps.size(), c2.jumps.size());
    for (std::size_t i = 0; i < c1.jumps.size(); ++i) EXPECT_NEAR(c1.cumulative[i], c2.cumulative[i], 1e-6);
  }
}

TEST(FittedCdf, MonotoneWithUnitMass) {
  const auto ms = normal_samples({30, 40, 35}, {0, 1, 2}, {1, 2, 1}, 43);
  const auto fit = fit_unconstrained(ms, kQuad);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto fc = fitted_cdf(fit, ms, kQuad, r);
    EXPECT_NEAR(fc.terminal(), 1.0, 1e-8);
    for (std::size_t i = 1; i < fc.cumulative.size(); ++i) EXPECT_GE(fc.cumulative[i], fc.cumulative[i - 1]);
    EXPECT_LE(fc.terminal(), 1.0 + 1e-8);
    EXPECT_EQ(fc(fc.jumps.front() - 1.0), 0.0);
    // right-continuous: the value at a jump includes the jump
    EXPECT_DOUBLE_EQ(fc(fc.jumps[3]), fc.cumulative[3]);
  }
}

TEST(FittedCdf, MeleQuantileInfDefinition) {
  const MultiSample ms({{1, 2, 3, 4}});
  const auto fit = fit_unconstrained(ms, Basis::parse("1,x"));
  const auto fc = fitted_cdf(fit, ms, Basis::parse("1,x"), 0);
  EXPECT_DOUBLE_EQ(mele_quantile(fc, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(mele_quantile(fc, 0.51), 3.0);
  EXPECT_DOUBLE_EQ(mele_quantile(fc, 0.01), 1.0);
  EXPECT_THROW(mele_quantile(fc, 1.0), ValidationError);
}

TEST(FittedCdf, TiesAreMerged) {
  const MultiSample ms({{1, 1, 2, 3}, {2, 2, 5}});
  const auto fit = fit_unconstrained(ms, Basis::parse("1,x"));
  const auto fc = fitted_cdf(fit, ms, Basis::parse("1,x"), 1);
  EXPECT_EQ(fc.jumps.size(), 4u);
  EXPECT_NEAR(fc.terminal(), 1.0, 1e-8);
}

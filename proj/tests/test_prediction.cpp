#include "doctest.h"
#include "rpm/prediction.hpp"

#include <cmath>
#include <numbers>

using namespace rpm;

namespace {

Dataset counts(std::uint64_t seed, Index n, double rate) {
  Rng rng = make_rng(seed, 0);
  Vector y(n);
  for (Index i = 0; i < n; ++i) y[i] = static_cast<double>(rng.poisson(rate));
  return Dataset(y);
}

Posterior point_posterior(const Model& model, const Vector& constrained) {
  MapResult mr;
  mr.point = model.layout().to_unconstrained(model.unflatten(constrained));
  return Posterior::from_map(mr, model.layout());
}

Posterior chain_posterior(const ParameterLayout& layout, Matrix draws) {
  SampleChain c;
  c.accepted.assign(static_cast<std::size_t>(draws.rows()), 1);
  c.draws = std::move(draws);
  return Posterior::from_chain(std::move(c), layout);
}

double log_poisson(double y, double rate) { return y * std::log(rate) - rate - std::lgamma(y + 1); }

// composite Simpson rule
template <typename F>
double simpson(const F& f, double lo, double hi, int n) {
  double h = (hi - lo) / n, s = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) s += f(lo + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

}  // namespace

TEST_CASE("unit weight gives a unit normalizer") {
  CHECK(std::abs(log_bernoulli_normalizer(0.3, 1.0)) < 1e-12);
  CHECK(std::abs(log_gaussian_normalizer(2.5, 1.0)) < 1e-12);
  CHECK(std::abs(log_poisson_normalizer(7.0, 1.0)) < 1e-12);
}

TEST_CASE("closed-form normalizer examples") {
  CHECK(std::exp(log_bernoulli_normalizer(0.5, 3.0)) == doctest::Approx(0.25).epsilon(1e-14));
  double c = std::exp(log_gaussian_normalizer(1.0, 2.0));
  // (2 pi)^(-1/2) * 2^(-1/2) = 1 / (2 sqrt(pi))
  CHECK(c == doctest::Approx(0.28209479177387814).epsilon(1e-12));
  double quad = simpson([](double y) { return std::exp(2.0 * (-0.5 * y * y - 0.5 * std::log(2 * std::numbers::pi))); },
                        -20, 20, 20000);
  CHECK(std::abs(quad - c) < 1e-8);

  ModelParameters p;
  p.add({"theta", Constraint::kPositive, 1, 1, Vector::Constant(1, 3.0)});
  CHECK(power_likelihood_normalizer(PoissonRateSpec{}, p, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(power_likelihood_normalizer(FiniteGmmSpec{}, p, 2.0), UnsupportedFamily);
  CHECK_THROWS_AS(log_poisson_normalizer(3.0, 0.0), DomainError);
}

TEST_CASE("tempered likelihoods integrate to one") {
  Rng rng = make_rng(31, 0);
  for (int trial = 0; trial < 20; ++trial) {
    double w = 0.05 + 3.0 * rng.uniform();
    double p = rng.uniform_open();
    double bern = std::exp(w * std::log(p) - log_bernoulli_normalizer(p, w)) +
                  std::exp(w * std::log1p(-p) - log_bernoulli_normalizer(p, w));
    CHECK(std::abs(bern - 1.0) < 1e-6);

    double var = std::exp(rng.normal());
    double lc = log_gaussian_normalizer(var, w);
    double half = 12.0 * std::sqrt(var / w);
    double gauss = simpson([&](double y) { return std::exp(w * log_normal_pdf(y, 0.0, std::sqrt(var)) - lc); },
                           -half, half, 20000);
    CHECK(std::abs(gauss - 1.0) < 1e-6);

    double rate = 0.5 + 40.0 * rng.uniform();
    double lp = log_poisson_normalizer(rate, w);
    double pois = 0.0;
    for (int y = 0; y < 20000; ++y) pois += std::exp(w * log_poisson(y, rate) - lp);
    CHECK(std::abs(pois - 1.0) < 1e-6);
  }
}

TEST_CASE("slowly decaying tempered Poisson sums use the tail quadrature accurately") {
  for (double w : {2e-3, 5e-4}) {
    double brute = -INFINITY;
    for (int y = 0; y < 3000000; ++y) {
      double t = w * log_poisson(y, 5.0);
      double m = std::max(brute, t);
      brute = m + std::log(std::exp(brute - m) + std::exp(t - m));
    }
    CHECK(std::abs(log_poisson_normalizer(5.0, w) - brute) < 1e-6);
  }
  CHECK(std::isfinite(log_poisson_normalizer(5.0, 1e-12)));
}

TEST_CASE("plug-in predictive equals the likelihood") {
  Dataset train = counts(1, 30, 5.0);
  Dataset test = counts(2, 10, 5.0);
  auto model = make_model(PoissonRateSpec{}, train);
  Posterior post = point_posterior(*model, Vector::Constant(1, 4.5));
  PredictiveEstimate est = predictive_original(post, PoissonRateSpec{}, test);
  for (Index n = 0; n < 10; ++n)
    CHECK(est.per_point_log_predictive[n] == doctest::Approx(log_poisson(test.responses()[n], 4.5)).epsilon(1e-14));
  CHECK(est.mean_log_predictive == doctest::Approx(est.per_point_log_predictive.mean()));
  CHECK(est.mc_draws_used == 1);
}

TEST_CASE("conjugate Poisson predictive is negative binomial") {
  Dataset train = counts(3, 40, 5.0);
  const double a = train.responses().sum() + 2.0, b = 40 + 0.5;
  auto model = make_model(PoissonRateSpec{}, train);
  Rng rng = make_rng(32, 0);
  const Index s = 20000;
  Matrix draws(s, 1);
  for (Index i = 0; i < s; ++i) draws(i, 0) = std::log(rng.gamma(a, b));
  Posterior post = chain_posterior(model->layout(), draws);
  Vector ys(4);
  ys << 0, 3, 5, 12;
  Dataset test(ys);
  PredictiveEstimate est = predictive_original(post, PoissonRateSpec{}, test, s);
  for (Index n = 0; n < 4; ++n) {
    double y = ys[n];
    double nb = std::lgamma(a + y) - std::lgamma(a) - std::lgamma(y + 1) + a * std::log(b / (b + 1)) -
                y * std::log(b + 1);
    // spread of the likelihood values over the posterior
    double m = 0, m2 = 0;
    for (Index i = 0; i < s; ++i) {
      double v = std::exp(log_poisson(y, std::exp(draws(i, 0))));
      m += v;
      m2 += v * v;
    }
    m /= s;
    double se = std::sqrt(m2 / s - m * m) / std::sqrt(static_cast<double>(s));
    CHECK(std::abs(std::exp(est.per_point_log_predictive[n]) - std::exp(nb)) < 3 * se);
  }
}

TEST_CASE("rpm predictive with unit weights is the original predictive") {
  Dataset train = counts(4, 30, 5.0);
  Dataset test = counts(5, 15, 5.0);
  auto model = make_model(PoissonRateSpec{}, train);
  Rng rng = make_rng(33, 0);
  Matrix draws(100, 1);
  for (Index i = 0; i < 100; ++i) draws(i, 0) = std::log(4.0 + rng.uniform());
  Posterior post = chain_posterior(model->layout(), draws);
  PredictiveEstimate orig = predictive_original(post, PoissonRateSpec{}, test);
  Rng r2 = make_rng(34, 0);
  PredictiveEstimate unit = predictive_rpm(post, PoissonRateSpec{}, [](Rng&) { return 1.0; }, test, r2, 7);
  for (Index n = 0; n < 15; ++n)
    CHECK(unit.per_point_log_predictive[n] == doctest::Approx(orig.per_point_log_predictive[n]).epsilon(1e-12));

  Rng r3 = make_rng(35, 0);
  PredictiveEstimate near = predictive_rpm(post, PoissonRateSpec{}, BetaBank{100, 1}, 30, test, r3);
  CHECK((near.per_point_log_predictive - orig.per_point_log_predictive).lpNorm<Eigen::Infinity>() < 0.05);

  Rng r4 = make_rng(35, 0);
  PredictiveEstimate again = predictive_rpm(post, PoissonRateSpec{}, BetaBank{100, 1}, 30, test, r4);
  CHECK(again.per_point_log_predictive == near.per_point_log_predictive);
}

TEST_CASE("mixtures fall back to the plug-in predictive") {
  Rng rng = make_rng(36, 0);
  Matrix x(20, 2);
  for (Index i = 0; i < 20; ++i) x(i, 0) = rng.normal(), x(i, 1) = rng.normal();
  Dataset d(Vector::Zero(20), x);
  FiniteGmmSpec spec;
  spec.components = 3;
  auto model = make_model(spec, d);
  Posterior post = point_posterior(*model, model->flatten(model->initial_params()));
  Rng r2 = make_rng(37, 0);
  PredictiveEstimate rpm = predictive_rpm(post, spec, GammaBank{2, 1}, 20, d, r2);
  PredictiveEstimate orig = predictive_original(post, spec, d);
  CHECK(rpm.per_point_log_predictive == orig.per_point_log_predictive);
}

TEST_CASE("localized predictive") {
  // vanishing local variance reproduces the original predictive
  Dataset train = counts(6, 30, 5.0);
  Dataset test = counts(7, 10, 5.0);
  LocalizedSpec spec;
  spec.fixed_local_var = 1e-8;
  LocalizedModel loc(spec, train);
  auto model = make_model(PoissonRateSpec{}, train);
  Rng rng = make_rng(38, 0);
  Matrix draws(50, 1);
  for (Index i = 0; i < 50; ++i) draws(i, 0) = std::log(4.0 + rng.uniform());
  Posterior top = chain_posterior(loc.top_layout(), draws);
  Posterior orig = chain_posterior(model->layout(), draws);
  Rng r1 = make_rng(39, 0);
  PredictiveEstimate lp = predictive_localized(top, loc, test, r1);
  PredictiveEstimate op = predictive_original(orig, PoissonRateSpec{}, test);
  CHECK((lp.per_point_log_predictive - op.per_point_log_predictive).lpNorm<Eigen::Infinity>() < 1e-3);
  Rng r2 = make_rng(39, 0);
  CHECK(predictive_localized(top, loc, test, r2).per_point_log_predictive == lp.per_point_log_predictive);

  // linear-Gaussian: marginal predictive is heteroscedastic normal
  Matrix x(3, 1);
  x << 1.0, -2.0, 0.5;
  Vector y(3);
  y << 2.0, -1.0, 0.3;
  Dataset lin(y, x);
  LocalizedSpec ls;
  ls.base = LinearRegressionSpec{};
  LocalizedModel lm(ls, lin);
  Vector top_vals(5);  // beta0, beta1, v0, v1, sigma_sq
  top_vals << 0.5, 1.2, 0.3, 0.6, 0.4;
  ModelParameters fixed_top = lm.initial_top();
  fixed_top.set("beta", top_vals.head(2));
  fixed_top.set("local_var", top_vals.segment(2, 2));
  fixed_top.set("sigma_sq", top_vals.tail(1));
  Matrix one = lm.top_layout().to_unconstrained(fixed_top).transpose();
  Posterior fixed = chain_posterior(lm.top_layout(), one);
  Rng r3 = make_rng(40, 0);
  const Index m = 40000;
  PredictiveEstimate est = predictive_localized(fixed, lm, lin, r3, m);
  for (Index n = 0; n < 3; ++n) {
    double mean = 0.5 + 1.2 * x(n, 0);
    double var_y = 0.4 + 0.3 + 0.6 * x(n, 0) * x(n, 0);
    double exact = log_normal_pdf(y[n], mean, std::sqrt(var_y));
    // Monte Carlo spread of N(y; x.b, sigma_sq) over the local draws
    Rng r4 = make_rng(41, 0);
    double s1 = 0, s2 = 0;
    for (Index i = 0; i < m; ++i) {
      double b0 = 0.5 + std::sqrt(0.3) * r4.normal(), b1 = 1.2 + std::sqrt(0.6) * r4.normal();
      double v = std::exp(log_normal_pdf(y[n], b0 + b1 * x(n, 0), std::sqrt(0.4)));
      s1 += v, s2 += v * v;
    }
    double se = std::sqrt(s2 / m - (s1 / m) * (s1 / m)) / std::sqrt(static_cast<double>(m));
    CHECK(std::abs(std::exp(est.per_point_log_predictive[n]) - std::exp(exact)) < 3 * se);
  }
}

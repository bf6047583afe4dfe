#include "doctest.h"
#include "rpm/robustness.hpp"

#include <cmath>

using namespace rpm;

namespace {

Dataset counts(std::uint64_t seed, Index n, double rate) {
  Rng rng = make_rng(seed, 0);
  Vector y(n);
  for (Index i = 0; i < n; ++i) y[i] = static_cast<double>(rng.poisson(rate));
  return Dataset(y);
}

}  // namespace

TEST_CASE("influence of the sample mean") {
  Rng rng = make_rng(51, 0);
  Vector y(40);
  for (Index i = 0; i < 40; ++i) y[i] = rng.normal(3, 2);
  Dataset d(y);
  for (double t : {1e-3, 1e-4, 1e-6})
    for (double z : {-10.0, 0.0, 7.5, 100.0})
      CHECK(std::abs(empirical_influence(sample_mean_estimator(), d, z, t) - (z - y.mean())) < 1e-6);
  CHECK_THROWS_AS(empirical_influence(sample_mean_estimator(), d, 1.0, 0.0), DomainError);
}

TEST_CASE("reweighted Poisson influence shrinks for unlikely points") {
  Dataset base = counts(52, 100, 5.0);
  WeightedEstimator est = rpm_map_estimator(PoissonRateSpec{}, GammaBank{2, 1});
  double if20 = empirical_influence(est, base, 20, 1e-3);
  double if50 = empirical_influence(est, base, 50, 1e-3);
  double if200 = empirical_influence(est, base, 200, 1e-3);
  CHECK(std::abs(if200) < std::abs(if50));
  CHECK(std::abs(if50) < std::abs(if20));

  // difference quotients at t and t/2 agree to first order
  double half = empirical_influence(est, base, 20, 5e-4);
  CHECK(std::abs(if20 - half) < 1e-3 * std::max(1.0, std::abs(if20)) * 10);

  CHECK_THROWS_AS(rpm_map_estimator(PoissonRateSpec{}, ScaledDirichlet{1}), UnsupportedPrior);
}

TEST_CASE("decay check: ordering, tail shape, and the unweighted contrast") {
  Dataset base = counts(53, 100, 5.0);
  Vector grid(4);
  grid << 120, 15, 60, 30;
  InfluenceCheck rpm = influence_decay_check(PoissonRateSpec{}, WeightPriorSpec(GammaBank{2, 1}), base, grid);
  CHECK(rpm.curve.z_grid[0] == 15);
  CHECK(rpm.curve.z_grid[3] == 120);
  for (Index i = 1; i < 4; ++i) {
    CHECK(rpm.curve.loglik_at_z[i] < rpm.curve.loglik_at_z[i - 1]);
    CHECK(std::abs(rpm.curve.if_values[i]) < std::abs(rpm.curve.if_values[i - 1]));
  }
  CHECK(rpm.curve.if_values.allFinite());

  InfluenceCheck plain = influence_decay_check(PoissonRateSpec{}, std::nullopt, base, grid);
  CHECK_FALSE(plain.pass);
  // unweighted influence grows linearly in z
  CHECK(std::abs(plain.curve.if_values[3]) > 5 * std::abs(plain.curve.if_values[0]));
}

TEST_CASE("symmetric grid on a Gaussian location model gives antisymmetric influence") {
  Rng rng = make_rng(54, 0);
  const Index n = 60;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y[i] = rng.normal(2.0, 1.0);
  // symmetrize the sample so the fitted location sits at its center
  for (Index i = 0; i < n / 2; ++i) y[n / 2 + i] = 4.0 - y[i];
  Dataset d(y, Matrix(n, 0));
  LinearRegressionSpec spec;
  spec.prior_sd = 1e6;
  for (auto prior : {std::optional<WeightPriorSpec>{}, std::optional<WeightPriorSpec>{GammaBank{2, 1}}}) {
    Vector grid(2);
    grid << 2.0 - 3.0, 2.0 + 3.0;
    InfluenceCheck c = influence_decay_check(spec, prior, d, grid, 1e-4);
    CHECK(std::abs(c.curve.if_values[0] + c.curve.if_values[1]) < 1e-3 * std::abs(c.curve.if_values[0]));
  }
}

TEST_CASE("weight bimodality") {
  WeightDiagnostic point = weight_bimodality(Vector::Constant(50, 0.99));
  CHECK(point.kde_mode_count == 1);
  CHECK_FALSE(point.bimodal_flag);
  CHECK(point.frac_below == 0.0);

  Vector two(100);
  two.head(50).setConstant(0.02);
  two.tail(50).setConstant(0.95);
  WeightDiagnostic split = weight_bimodality(two);
  CHECK(split.kde_mode_count == 2);
  CHECK(split.bimodal_flag);
  CHECK(split.frac_below == doctest::Approx(0.5));

  Rng rng = make_rng(55, 0);
  Vector mixed(80);
  for (Index i = 0; i < 80; ++i) mixed[i] = i < 20 ? rng.uniform(0.0, 0.05) : rng.uniform(0.7, 1.0);
  WeightDiagnostic a = weight_bimodality(mixed);
  std::vector<double> v(mixed.data(), mixed.data() + 80);
  rng.shuffle(v);
  WeightDiagnostic b = weight_bimodality(Eigen::Map<Vector>(v.data(), 80));
  CHECK(a.kde_mode_count == b.kde_mode_count);
  CHECK(a.frac_below == b.frac_below);
  CHECK(a.bimodal_flag == b.bimodal_flag);

  Vector unimodal(200);
  for (Index i = 0; i < 200; ++i) unimodal[i] = 0.8 + 0.05 * rng.normal();
  CHECK_FALSE(weight_bimodality(unimodal).bimodal_flag);
}

TEST_CASE("rank downweighted") {
  Vector w(3);
  w << 0.9, 0.1, 0.5;
  auto r = rank_downweighted(w, 2);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == std::pair<Index, double>{1, 0.1});
  CHECK(r[1] == std::pair<Index, double>{2, 0.5});
  auto eq = rank_downweighted(Vector::Constant(5, 1.0), 3);
  CHECK(eq[0].first == 0);
  CHECK(eq[1].first == 1);
  CHECK(eq[2].first == 2);
  CHECK_THROWS_AS(rank_downweighted(w, 4), DomainError);
}

#include "doctest.h"
#include "rpm/models.hpp"

#include <cmath>
#include <numbers>

using namespace rpm;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Dataset poisson_data(Rng& rng, Index n) {
  Vector y(n);
  for (Index i = 0; i < n; ++i) y[i] = static_cast<double>(rng.poisson(5.0));
  return Dataset(y);
}

Dataset logistic_data(Rng& rng, Index n) {
  Vector y(n);
  Matrix x(n, 1);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = rng.uniform(-10, 10);
    y[i] = rng.bernoulli(sigmoid(0.5 * x(i, 0))) ? 1.0 : 0.0;
  }
  return Dataset(y, x);
}

Dataset linear_data(Rng& rng, Index n) {
  Vector y(n);
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    x(i, 0) = rng.normal(10, 5);
    x(i, 1) = rng.normal(0, 10);
    y[i] = 1 + 2 * x(i, 0) - x(i, 1) + rng.normal();
  }
  return Dataset(y, x);
}

Dataset gmm_data(Rng& rng, Index n) {
  Matrix x(n, 2);
  for (Index i = 0; i < n; ++i) {
    double c = rng.uniform() < 0.5 ? -3.0 : 3.0;
    x(i, 0) = rng.normal(c, 1);
    x(i, 1) = rng.normal(0, 2);
  }
  return Dataset(Vector::Zero(n), x);
}

PFDataset pf_data(Rng& rng, Index users, Index items) {
  std::vector<PFEntry> e;
  for (Index u = 0; u < users; ++u)
    for (Index i = 0; i < items; ++i)
      if (rng.uniform() < 0.3) e.push_back({u, i, static_cast<double>(1 + rng.poisson(0.5))});
  return PFDataset(users, items, e);
}

double rel_err(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace

TEST_CASE("loglik term examples") {
  Dataset d5(vec({5}));
  ModelParameters p;
  p.add({"theta", Constraint::kPositive, 1, 1, vec({5})});
  CHECK(loglik_terms(PoissonRateSpec{}, p, d5)[0] ==
        doctest::Approx(5 * std::log(5.0) - 5 - std::log(120.0)).epsilon(1e-12));
  CHECK(loglik_terms(PoissonRateSpec{}, p, d5)[0] == doctest::Approx(-1.7403).epsilon(1e-4));

  Dataset dl(vec({1}), Matrix::Zero(1, 1));
  ModelParameters pl;
  pl.add({"beta", Constraint::kUnconstrained, 1, 1, vec({0.5})});
  CHECK(loglik_terms(LogisticRegressionSpec{}, pl, dl)[0] == doctest::Approx(std::log(0.5)));

  Dataset dr(vec({3}), Matrix::Constant(1, 1, 1.0));
  ModelParameters pr;
  pr.add({"beta", Constraint::kUnconstrained, 1, 2, vec({1, 2})});
  pr.add({"sigma_sq", Constraint::kPositive, 1, 1, vec({1})});
  CHECK(loglik_terms(LinearRegressionSpec{}, pr, dr)[0] ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi)));
}

TEST_CASE("log prior examples") {
  Dataset d(vec({1}));
  ModelParameters p;
  p.add({"theta", Constraint::kPositive, 1, 1, vec({4})});
  CHECK(log_prior(PoissonRateSpec{}, p, d) == doctest::Approx(-2.0));

  Dataset dl(vec({1}), Matrix::Zero(1, 1));
  ModelParameters pl;
  pl.add({"beta", Constraint::kUnconstrained, 1, 1, vec({0})});
  CHECK(log_prior(LogisticRegressionSpec{}, pl, dl) ==
        doctest::Approx(-0.5 * std::log(2 * std::numbers::pi * 100)));

  // Dirichlet(1) part of the mixture prior is log Gamma(30) at any simplex point
  Rng rng = make_rng(1, 0);
  Dataset dg = gmm_data(rng, 40);
  auto m = make_model(FiniteGmmSpec{}, dg);
  Vector x = m->flatten(m->initial_params());
  // strip the mean and scale parts to isolate the mixing prior
  double total = m->log_prior(x, nullptr);
  double no_mix = 0.0;
  for (Index j = 0; j < 60; ++j) {
    no_mix += log_normal_pdf(x[j], 0, 10);
    double ls = std::log(x[60 + j]);
    no_mix += log_normal_pdf(ls, 0, 10) - ls;
  }
  CHECK(total - no_mix == doctest::Approx(std::lgamma(30.0)));
}

TEST_CASE("reweighted joint identities") {
  Rng rng = make_rng(2, 0);
  Dataset d = poisson_data(rng, 20);
  ModelParameters p;
  p.add({"theta", Constraint::kPositive, 1, 1, vec({4.2})});
  PoissonRateSpec spec;
  Vector terms = loglik_terms(spec, p, d);
  for (auto prior : {WeightPriorSpec(GammaBank{2, 1}), WeightPriorSpec(BetaBank{2, 2}),
                     WeightPriorSpec(ScaledDirichlet{1})}) {
    double ones = prior.is_beta() ? 0.5 : 1.0;
    Vector w = Vector::Constant(20, ones);
    double base = log_joint_rpm(spec, prior, p, WeightVector(w), d);
    double expected = log_prior(spec, p, d) + log_density(prior, w) + ones * terms.sum();
    CHECK(base == doctest::Approx(expected).epsilon(1e-12));
  }
  // unit weights differ from the model joint by the constant log p_w(1)
  WeightPriorSpec g(GammaBank{2, 1});
  for (double theta : {1.0, 3.0, 7.5}) {
    ModelParameters q;
    q.add({"theta", Constraint::kPositive, 1, 1, vec({theta})});
    double diff = log_joint_rpm(spec, g, q, WeightVector(Vector::Ones(20)), d) -
                  (log_prior(spec, q, d) + loglik_terms(spec, q, d).sum());
    CHECK(diff == doctest::Approx(log_density(g, Vector::Ones(20))).epsilon(1e-12));
  }
  // doubling one Gamma weight adds exactly that term (prior part accounted separately)
  Vector w = Vector::Ones(20);
  Vector w2 = w;
  w2[3] = 2.0;
  double delta = log_joint_rpm(spec, g, p, WeightVector(w2), d) - log_joint_rpm(spec, g, p, WeightVector(w), d);
  CHECK(delta - (log_density(g, w2) - log_density(g, w)) == doctest::Approx(terms[3]).epsilon(1e-10));
  // vanishing weight removes the term
  Vector w0 = w;
  w0[5] = 1e-300;
  double with0 = log_joint_rpm(spec, g, p, WeightVector(w0), d) - log_density(g, w0);
  CHECK(with0 == doctest::Approx(log_prior(spec, p, d) + terms.sum() - terms[5]).epsilon(1e-12));
}

TEST_CASE("loglik terms are permutation equivariant") {
  Rng rng = make_rng(3, 0);
  Dataset d = linear_data(rng, 15);
  std::vector<Index> perm(15);
  for (Index i = 0; i < 15; ++i) perm[i] = i;
  rng.shuffle(perm);
  Dataset dp = d.subset(perm);
  auto m = make_model(LinearRegressionSpec{}, d);
  ModelParameters p = m->initial_params();
  p.set("beta", vec({0.5, 1.5, -0.7}));
  Vector t = loglik_terms(LinearRegressionSpec{}, p, d);
  Vector tp = loglik_terms(LinearRegressionSpec{}, p, dp);
  for (Index i = 0; i < 15; ++i) CHECK(tp[i] == t[perm[i]]);
}

TEST_CASE("mixture log-sum-exp survives very negative component densities") {
  Matrix x(2, 2);
  x << 1e4, 1e4, -1e4, 0;
  Dataset d(Vector::Zero(2), x);
  FiniteGmmSpec spec{3};
  auto m = make_model(spec, d);
  Vector flat(3 * 2 * 2 + 3);
  flat << 0, 0, 1, 1, 2, 2, 1, 1, 1, 1, 1, 1, 0.2, 0.3, 0.5;
  Vector t = m->loglik_terms(flat);
  CHECK(t.allFinite());
  CHECK(t[0] < -1e6);
}

TEST_CASE("unconstrained gradients match finite differences for every model and prior") {
  Rng rng = make_rng(4, 0);
  Dataset dp = poisson_data(rng, 12);
  Dataset dl = logistic_data(rng, 12);
  Dataset dr = linear_data(rng, 12);
  Dataset dg = gmm_data(rng, 12);
  PFDataset dpf = pf_data(rng, 6, 5);
  FiniteGmmSpec small_gmm{4};
  PoissonFactorizationSpec small_pf{3};

  struct Case {
    ModelSpec spec;
    DataView data;
  };
  std::vector<Case> cases = {{PoissonRateSpec{}, dp},
                             {LogisticRegressionSpec{}, dl},
                             {LogisticRegressionSpec{10.0, true}, dl},
                             {LinearRegressionSpec{}, dr},
                             {small_gmm, dg},
                             {small_pf, dpf}};
  std::vector<WeightPriorSpec> priors = {BetaBank{0.5, 2.0}, ScaledDirichlet{1.5}, GammaBank{2, 1}};

  for (const auto& c : cases) {
    std::shared_ptr<const Model> model = make_model(c.spec, c.data);
    for (const auto& prior : priors) {
      for (auto mode : {JacobianMode::kInclude, JacobianMode::kExclude}) {
        RpmObjective obj(model, prior, mode);
        for (int trial = 0; trial < 20; ++trial) {
          Vector z = obj.initial_point();
          for (Index i = 0; i < z.size(); ++i) z[i] += 0.3 * rng.normal();
          Vector g;
          obj.eval(z, &g);
          Vector fd = finite_diff_gradient([&](const Vector& v) { return obj.eval(v, nullptr); }, z, 1e-6);
          CHECK(rel_err(g, fd) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("free-function gradient and stationary Gamma weights") {
  Rng rng = make_rng(5, 0);
  Dataset d = poisson_data(rng, 30);
  PoissonRateSpec spec;
  WeightPriorSpec prior(GammaBank{2, 1});
  auto m = make_model(spec, d);
  RpmObjective obj(std::shared_ptr<const Model>(make_model(spec, d)), prior, JacobianMode::kInclude);
  Vector z = obj.initial_point();
  auto [v, g] = grad_log_joint_unconstrained(spec, prior, z.head(1), z.tail(30), d);
  Vector g2;
  CHECK(v == doctest::Approx(obj.eval(z, &g2)));
  CHECK((g - g2).norm() < 1e-12);

  ModelParameters p;
  p.add({"theta", Constraint::kPositive, 1, 1, vec({4.0})});
  Vector terms = loglik_terms(spec, p, d);
  Vector w(30);
  for (Index n = 0; n < 30; ++n) w[n] = map_weight_gamma(2, 1, terms[n]);
  Vector wg = grad_log_density(prior, w) + terms;
  CHECK(wg.lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("Poisson sufficient statistic identity") {
  Rng rng = make_rng(6, 0);
  Dataset d = poisson_data(rng, 40);
  auto m = make_model(PoissonRateSpec{}, d);
  Vector x = vec({d.responses().mean()});
  Vector g = Vector::Zero(1);
  m->weighted_loglik(x, Vector::Ones(40), nullptr, &g);
  CHECK(std::abs(g[0]) < 1e-10);
}

TEST_CASE("factorization MM sweep does not decrease the weighted objective") {
  Rng rng = make_rng(7, 0);
  PFDataset d = pf_data(rng, 10, 8);
  auto m = make_model(PoissonFactorizationSpec{3}, d);
  Vector x = m->flatten(m->initial_params());
  Vector c = Vector::Constant(10, 0.7);
  double prev = m->weighted_loglik(x, c, nullptr, nullptr) + m->log_prior(x, nullptr);
  for (int it = 0; it < 30; ++it) {
    m->mm_step(x, c);
    double now = m->weighted_loglik(x, c, nullptr, nullptr) + m->log_prior(x, nullptr);
    CHECK(now >= prev - 1e-9 * std::abs(prev));
    prev = now;
  }
}

TEST_CASE("sparse dataset validation") {
  CHECK_THROWS_AS(PFDataset(2, 2, {{0, 0, 1}, {0, 0, 1}}), ShapeError);
  CHECK_THROWS_AS(PFDataset(2, 2, {{0, 3, 1}}), ShapeError);
  PFDataset d(2, 3, {{1, 2, 1}, {0, 1, 1}, {1, 0, 2}});
  CHECK(d.row(1).size() == 2);
  CHECK(d.row(1)[0].item == 0);
  CHECK(d.has(0, 1));
  CHECK(!d.has(0, 2));
}

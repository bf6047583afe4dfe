#include "doctest.h"
#include "rpm/datagen.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

using namespace rpm;

namespace {

// Newton-Raphson logistic MLE without intercept
double logistic_slope(const Dataset& d) {
  double b = 0.0;
  for (int it = 0; it < 50; ++it) {
    double g = 0.0, h = 0.0;
    for (Index i = 0; i < d.n_obs(); ++i) {
      double x = d.covariates()(i, 0);
      double p = sigmoid(b * x);
      g += (d.responses()[i] - p) * x;
      h += p * (1 - p) * x * x;
    }
    b += g / h;
  }
  return b;
}

Vector ols(const Matrix& x, const Vector& y) {
  Matrix design(x.rows(), x.cols() + 1);
  design.col(0).setOnes();
  design.rightCols(x.cols()) = x;
  return (design.transpose() * design).ldlt().solve(design.transpose() * y);
}

}  // namespace

TEST_CASE("poisson outliers") {
  Rng rng = make_rng(61, 0);
  LabeledDataset clean = gen_poisson_outliers(1000, 0.0, rng);
  CHECK(clean.n_corrupted() == 0);
  CHECK(std::abs(clean.dense().responses().mean() - 5.0) < 3 * std::sqrt(5.0 / 1000));

  LabeledDataset bad = gen_poisson_outliers(100, 0.25, rng);
  CHECK(bad.n_corrupted() == 25);
  CHECK(bad.corrupted_mask.size() == 100);
  double hi = 0, lo = 0;
  for (Index i = 0; i < 100; ++i) (bad.corrupted_mask[static_cast<std::size_t>(i)] ? hi : lo) += bad.dense().responses()[i];
  CHECK(hi / 25 > 3 * lo / 75);
  // the corrupted block is spread out, not left in front
  CHECK(std::count(bad.corrupted_mask.begin(), bad.corrupted_mask.begin() + 25, 1) < 25);
  CHECK(gen_poisson_outliers(100, 0.125, rng).n_corrupted() == 13);
  CHECK(bad.truth.at("outlier_rate") == 50.0);

  Rng a = make_rng(7, 3), b = make_rng(7, 3);
  LabeledDataset da = gen_poisson_outliers(50, 0.2, a), db = gen_poisson_outliers(50, 0.2, b);
  CHECK(da.dense().responses() == db.dense().responses());
  CHECK(da.corrupted_mask == db.corrupted_mask);
  CHECK_THROWS_AS(gen_poisson_outliers(10, 1.0, rng), DomainError);
}

TEST_CASE("missing latent group") {
  Rng rng = make_rng(62, 0);
  LabeledDataset big = gen_missing_group(10000, 0.0, rng);
  CHECK(std::abs(logistic_slope(big.dense()) - 0.5) < 0.05);

  LabeledDataset mixed = gen_missing_group(100000, 0.3, rng);
  double ones = 0, count = 0;
  for (Index i = 0; i < mixed.dense().n_obs(); ++i)
    if (std::abs(mixed.dense().covariates()(i, 0)) < 0.1) {
      ones += mixed.dense().responses()[i];
      ++count;
    }
  CHECK(std::abs(ones / count - 0.5) < 4 * std::sqrt(0.25 / count));

  LabeledDataset small = gen_missing_group(100, 0.4, rng);
  CHECK(small.n_corrupted() == 40);
  CHECK(small.dense().covariates().cwiseAbs().maxCoeff() <= 10.0);
}

TEST_CASE("misspecified linear regression") {
  Rng rng = make_rng(63, 0);
  LabeledDataset zero = gen_linreg_misspec(20000, MisspecVariant::kQuadratic, rng, std::array<double, 4>{0, 0, 0, 0});
  const Vector& y = zero.dense().responses();
  double var = (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1);
  CHECK(std::abs(var - 1.0) < 0.05);

  LabeledDataset inter = gen_linreg_misspec(2000, MisspecVariant::kInteraction, rng, std::array<double, 4>{1, -3, 2, 0});
  REQUIRE(inter.dense().n_covariates() == 2);
  Vector b = ols(inter.dense().covariates(), inter.dense().responses());
  CHECK(std::abs(b[1] + 3) < 0.05);
  CHECK(std::abs(b[2] - 2) < 0.05);

  LabeledDataset miss = gen_linreg_misspec(100, MisspecVariant::kMissingCovariate, rng);
  CHECK(miss.dense().n_covariates() == 1);
  CHECK(miss.truth.at("beta3") == 0.0);
  LabeledDataset quad = gen_linreg_misspec(100, MisspecVariant::kQuadratic, rng);
  for (int j = 0; j < 4; ++j) {
    double v = quad.truth.at("beta" + std::to_string(j));
    CHECK(v >= -10.0);
    CHECK(v <= 10.0);
  }
  LabeledDataset test = gen_linreg_misspec_like(30, MisspecVariant::kQuadratic, quad.truth, rng);
  CHECK(test.truth == quad.truth);
  CHECK(parse_misspec_variant(to_string(MisspecVariant::kMissingCovariate)) == MisspecVariant::kMissingCovariate);
  CHECK_THROWS_AS(parse_misspec_variant("cubic"), ConfigError);
}

TEST_CASE("skewnormal sampler and mixture") {
  Rng rng = make_rng(64, 0);
  const int n = 100000;
  auto moments = [&](double alpha) {
    double s1 = 0, s2 = 0, s3 = 0;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = sample_skewnormal(1.0, 2.0, alpha, rng);
    for (double x : v) s1 += x;
    double m = s1 / n;
    for (double x : v) {
      s2 += (x - m) * (x - m);
      s3 += (x - m) * (x - m) * (x - m);
    }
    double sd = std::sqrt(s2 / n);
    return std::array<double, 2>{m, (s3 / n) / (sd * sd * sd)};
  };
  CHECK(std::abs(moments(0.0)[1]) < 0.1);
  const double delta = 15.0 / std::sqrt(1.0 + 225.0);
  CHECK(std::abs((moments(15.0)[0] - 1.0) / 2.0 - delta * std::sqrt(2.0 / std::numbers::pi)) < 0.02);

  LabeledDataset mix = gen_skewnormal_mixture(2000, rng);
  CHECK(mix.dense().covariates().rows() == 2000);
  CHECK(mix.dense().covariates().cols() == 2);
  CHECK(mix.n_corrupted() == 0);
  std::array<double, 3> counts{};
  for (Index k : mix.component) ++counts[static_cast<std::size_t>(k)];
  const std::array<double, 3> expect{600, 600, 800};
  const std::array<double, 3> p{0.3, 0.3, 0.4};
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(counts[k] - expect[k]) < 3 * std::sqrt(2000 * p[k] * (1 - p[k])));
  CHECK(mix.truth.at("c2_shape") == 15.0);
}

TEST_CASE("ratings ingestion") {
  std::istringstream two("1::10::5::0\n1::20::3::0\n");
  RatingsMatrix m = parse_movielens(two);
  CHECK(m.data.n_users() == 1);
  CHECK(m.data.n_items() == 2);
  REQUIRE(m.data.entries().size() == 2);
  for (const PFEntry& e : m.data.entries()) CHECK(e.count == 1.0);
  CHECK(m.item_ids == std::vector<std::int64_t>{10, 20});

  std::istringstream bad("1::10::5\n");
  try {
    parse_movielens(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
  std::istringstream bad3("1::10::5::0\n2::11::4::0\nx::1::1::1\n");
  CHECK_THROWS_AS(parse_movielens(bad3), ParseError);

  std::istringstream dup("7::3::5::0\n7::3::1::9\n9::3::2::0\n");
  RatingsMatrix d = parse_movielens(dup);
  CHECK(d.duplicate_pairs == 1);
  CHECK(d.data.entries().size() == 2);
  CHECK(d.user_ids == std::vector<std::int64_t>{7, 9});

  Rng rng = make_rng(65, 0);
  RatingsMatrix syn = gen_synthetic_ratings(120, 80, 5, 15, rng);
  CHECK(syn.data.n_users() == 120);
  CHECK(syn.data.n_items() == 80);
  std::stringstream round;
  write_movielens(syn, round);
  RatingsMatrix back = parse_movielens(round);
  CHECK(back.data.entries().size() == syn.data.entries().size());

  RatingsMatrix sub = densest_subset(syn, 30, 20);
  CHECK(sub.data.n_users() <= 30);
  CHECK(sub.data.n_items() <= 20);
  double dens_sub = static_cast<double>(sub.data.entries().size()) / static_cast<double>(sub.data.n_users() * sub.data.n_items());
  double dens_all = static_cast<double>(syn.data.entries().size()) / (120.0 * 80.0);
  CHECK(dens_sub > dens_all);
}

TEST_CASE("user corruption") {
  Rng rng = make_rng(66, 0);
  PFDataset data = gen_synthetic_ratings(100, 200, 4, 20, rng).data;

  LabeledDataset none = corrupt_users(data, 0.05, 1e-6, rng);
  CHECK(none.n_corrupted() == 5);
  CHECK(none.sparse().entries().size() == data.entries().size());
  for (std::size_t k = 0; k < data.entries().size(); ++k) {
    CHECK(none.sparse().entries()[k].user == data.entries()[k].user);
    CHECK(none.sparse().entries()[k].item == data.entries()[k].item);
  }

  LabeledDataset full = corrupt_users(data, 0.1, 1.0, rng);
  CHECK(full.n_corrupted() == 10);
  for (Index u = 0; u < 100; ++u) {
    CHECK(full.sparse().row(u).size() == data.row(u).size());
    if (!full.corrupted_mask[static_cast<std::size_t>(u)]) continue;
    for (const PFEntry& e : full.sparse().row(u)) CHECK_FALSE(data.has(u, e.item));
  }

  LabeledDataset half = corrupt_users(data, 0.1, 0.5, rng);
  for (Index u = 0; u < 100; ++u) {
    if (!half.corrupted_mask[static_cast<std::size_t>(u)]) continue;
    Index kept = 0;
    for (const PFEntry& e : half.sparse().row(u)) kept += data.has(u, e.item) ? 1 : 0;
    auto m = static_cast<double>(data.row(u).size());
    CHECK(kept == static_cast<Index>(data.row(u).size()) - round_half_up(0.5 * m));
  }

  PFDataset packed(1, 3, {{0, 0, 1}, {0, 1, 1}});
  CHECK_THROWS_AS(corrupt_users(packed, 1.0, 1.0, rng), InsufficientItems);
  CHECK_THROWS_AS(corrupt_users(data, 0.0, 0.5, rng), DomainError);
}

TEST_CASE("splits") {
  Rng rng = make_rng(67, 0);
  IndexSplit s = split_indices(101, 0.2, rng);
  CHECK(s.test.size() == 20);
  std::set<Index> all(s.train.begin(), s.train.end());
  for (Index i : s.test) CHECK(all.insert(i).second);
  CHECK(all.size() == 101);

  PFDataset data = gen_synthetic_ratings(40, 60, 3, 10, rng).data;
  RowSplit r = split_rows(data, rng);
  CHECK(r.fit.entries().size() + r.score.entries().size() == data.entries().size());
  for (const PFEntry& e : r.score.entries()) CHECK_FALSE(r.fit.has(e.user, e.item));
  for (Index u = 0; u < 40; ++u)
    if (!data.row(u).empty()) CHECK(!r.fit.row(u).empty());

  PFDataset picked = select_users(data, {3, 1});
  CHECK(picked.n_users() == 2);
  CHECK(picked.row(0).size() == data.row(3).size());
}

TEST_CASE("csv round trip") {
  Rng rng = make_rng(68, 0);
  LabeledDataset d = gen_linreg_misspec(25, MisspecVariant::kInteraction, rng);
  std::stringstream ss;
  write_dataset_csv(d.dense(), ss);
  Dataset back = read_dataset_csv(ss);
  CHECK(back.responses() == d.dense().responses());
  CHECK(back.covariates() == d.dense().covariates());

  std::stringstream plain;
  write_dataset_csv(Dataset(Vector::LinSpaced(4, 0, 3)), plain);
  CHECK(plain.str().substr(0, 2) == "y\n");
  CHECK_FALSE(read_dataset_csv(plain).has_covariates());

  std::stringstream pf;
  write_pf_csv(PFDataset(2, 2, {{1, 0, 1}}), pf);
  CHECK(pf.str() == "user,item,count\n1,0,1\n");
}

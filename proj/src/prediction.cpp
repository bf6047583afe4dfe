#include "rpm/prediction.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace rpm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void require_weight(double w) {
  if (!(w > 0.0) || !std::isfinite(w)) throw DomainError("tempering weight must be positive and finite");
}

// log of the integral over [start, inf) of exp(log_f(y)) dy, via y = start * e^u
template <typename F>
double log_tail_integral(const F& log_f, double start) {
  auto h = [&](double u) { return log_f(start * std::exp(u)) + std::log(start) + u; };
  const double step = 0.5;
  double peak = h(0.0), u_end = 0.0;
  for (double u = step;; u += step) {
    double v = h(u);
    peak = std::max(peak, v);
    if (v < peak - 60.0) {
      u_end = u;
      break;
    }
    if (u > 200.0) throw NonFiniteValue("tempered Poisson tail does not decay");
  }
  const int n = 4000;
  const double du = u_end / n;
  double acc = kNegInf;
  for (int i = 0; i <= n; ++i) {
    double v = h(du * i) + std::log(du);
    if (i == 0 || i == n) v -= std::numbers::ln2;
    acc = log_add(acc, v);
  }
  return acc;
}

Index bernoulli_offset(const ModelSpec& spec) {
  return std::get<LogisticRegressionSpec>(spec).with_intercept ? 1 : 0;
}

std::vector<Index> draw_indices(const Posterior& post, Index max_draws) {
  if (post.n_draws() < 1) throw EmptyChain("posterior has no draws");
  std::vector<Index> idx = post.thinned(max_draws);
  if (idx.empty()) throw EmptyChain("posterior has no draws");
  return idx;
}

PredictiveEstimate finish(const std::vector<std::vector<double>>& values, Index draws) {
  PredictiveEstimate est;
  est.per_point_log_predictive.resize(static_cast<Index>(values.size()));
  for (std::size_t n = 0; n < values.size(); ++n)
    est.per_point_log_predictive[static_cast<Index>(n)] = log_mean_exp(values[n]);
  est.mean_log_predictive = values.empty() ? 0.0 : est.per_point_log_predictive.mean();
  est.mc_draws_used = draws;
  return est;
}

}  // namespace

double log_bernoulli_normalizer(double p, double w) {
  require_weight(w);
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("probability outside [0, 1]");
  return log_add(w * std::log(p), w * std::log1p(-p));
}

double log_gaussian_normalizer(double variance, double w) {
  require_weight(w);
  if (!(variance > 0.0)) throw DomainError("variance must be positive");
  return 0.5 * (1.0 - w) * std::log(2.0 * std::numbers::pi * variance) - 0.5 * std::log(w);
}

double log_poisson_normalizer(double rate, double w) {
  require_weight(w);
  if (!(rate > 0.0)) throw DomainError("rate must be positive");
  if (w == 1.0) return 0.0;
  const double log_rate = std::log(rate);
  auto log_term = [&](double y) { return w * (y * log_rate - rate - std::lgamma(y + 1.0)); };
  constexpr int kDirect = 4000;
  const double cut = std::log(1e-16);
  double acc = kNegInf;
  for (int y = 0; y < kDirect; ++y) {
    double t = log_term(y);
    acc = log_add(acc, t);
    if (y > rate && t < acc + cut) return acc;
  }
  // slowly decaying terms: Euler-Maclaurin tail, integral plus half the first term
  const double start = kDirect;
  double tail = log_add(log_tail_integral(log_term, start), log_term(start) - std::numbers::ln2);
  return log_add(acc, tail);
}

bool has_power_normalizer(const ModelSpec& spec) {
  return std::holds_alternative<PoissonRateSpec>(spec) || std::holds_alternative<LogisticRegressionSpec>(spec) ||
         std::holds_alternative<LinearRegressionSpec>(spec);
}

Vector log_power_normalizers(const ModelSpec& spec, const Vector& x, double w, const Dataset& points) {
  const Index n = points.n_obs();
  if (std::holds_alternative<PoissonRateSpec>(spec)) return Vector::Constant(n, log_poisson_normalizer(x[0], w));
  if (std::holds_alternative<LinearRegressionSpec>(spec))
    return Vector::Constant(n, log_gaussian_normalizer(x[x.size() - 1], w));
  if (std::holds_alternative<LogisticRegressionSpec>(spec)) {
    const Matrix& cov = points.covariates();
    const Index off = bernoulli_offset(spec);
    if (x.size() != cov.cols() + off) throw ShapeError("coefficient count does not match covariates");
    Vector out(n);
    for (Index i = 0; i < n; ++i) {
      double eta = cov.row(i).dot(x.tail(cov.cols())) + (off ? x[0] : 0.0);
      require_weight(w);
      out[i] = log_add(w * log_sigmoid(eta), w * log_sigmoid(-eta));
    }
    return out;
  }
  throw UnsupportedFamily("no tractable normalizer for the tempered likelihood of this family");
}

double power_likelihood_normalizer(const ModelSpec& spec, const ModelParameters& params, double w,
                                   const Dataset* point) {
  if (!has_power_normalizer(spec)) throw UnsupportedFamily("no tractable normalizer for this family");
  Vector flat(0);
  for (const ParamBlock& b : params.blocks()) {
    flat.conservativeResize(flat.size() + b.values.size());
    flat.tail(b.values.size()) = b.values;
  }
  if (std::holds_alternative<LogisticRegressionSpec>(spec)) {
    if (!point) throw ShapeError("logistic normalizer needs the observation's covariates");
    return std::exp(log_power_normalizers(spec, flat, w, *point)[0]);
  }
  Dataset dummy(Vector::Zero(1));
  return std::exp(log_power_normalizers(spec, flat, w, dummy)[0]);
}

PredictiveEstimate predictive_original(const Posterior& post, const ModelSpec& spec, const Dataset& y_new,
                                       Index max_draws) {
  std::vector<Index> idx = draw_indices(post, max_draws);
  std::unique_ptr<Model> model = make_model(spec, y_new);
  std::vector<std::vector<double>> values(static_cast<std::size_t>(y_new.n_obs()));
  for (Index s : idx) {
    Vector terms = model->loglik_terms(post.params_at(s));
    for (Index n = 0; n < terms.size(); ++n) values[static_cast<std::size_t>(n)].push_back(terms[n]);
  }
  return finish(values, static_cast<Index>(idx.size()));
}

PredictiveEstimate predictive_localized(const Posterior& post, const LocalizedModel& model, const Dataset& y_new,
                                        Rng& rng, Index local_draws, Index max_draws) {
  if (local_draws < 1) throw ConfigError("need at least one local draw");
  std::vector<Index> idx = draw_indices(post, max_draws);
  std::vector<std::vector<double>> values(static_cast<std::size_t>(y_new.n_obs()));
  for (Index s : idx) {
    Vector top = post.params_at(s);
    for (Index n = 0; n < y_new.n_obs(); ++n)
      for (Index m = 0; m < local_draws; ++m) {
        Vector local = model.draw_local(top, rng);
        values[static_cast<std::size_t>(n)].push_back(model.point_loglik(top, local, y_new, n));
      }
  }
  return finish(values, static_cast<Index>(idx.size()) * local_draws);
}

PredictiveEstimate predictive_rpm(const Posterior& post, const ModelSpec& spec, const WeightSampler& draw_weight,
                                  const Dataset& y_new, Rng& rng, Index weight_draws, Index max_draws) {
  if (!has_power_normalizer(spec)) return predictive_original(post, spec, y_new, max_draws);
  if (weight_draws < 1) throw ConfigError("need at least one weight draw");
  std::vector<Index> idx = draw_indices(post, max_draws);
  std::unique_ptr<Model> model = make_model(spec, y_new);
  std::vector<std::vector<double>> values(static_cast<std::size_t>(y_new.n_obs()));
  for (Index s : idx) {
    Vector x = post.params_at(s);
    Vector terms = model->loglik_terms(x);
    for (Index m = 0; m < weight_draws; ++m) {
      double w = draw_weight(rng);
      Vector log_c = log_power_normalizers(spec, x, w, y_new);
      for (Index n = 0; n < terms.size(); ++n)
        values[static_cast<std::size_t>(n)].push_back(w * terms[n] - log_c[n]);
    }
  }
  return finish(values, static_cast<Index>(idx.size()) * weight_draws);
}

PredictiveEstimate predictive_rpm(const Posterior& post, const ModelSpec& spec, const WeightPriorSpec& prior_w,
                                  Index n_train, const Dataset& y_new, Rng& rng, Index weight_draws,
                                  Index max_draws) {
  WeightSampler sampler = [prior_w, n_train](Rng& r) {
    // below this floor the tempered term is flat over any plausible count
    // range and contributes nothing to the average
    return std::max(sample_single_weight(prior_w, n_train, r), 1e-12);
  };
  return predictive_rpm(post, spec, sampler, y_new, rng, weight_draws, max_draws);
}

}  // namespace rpm

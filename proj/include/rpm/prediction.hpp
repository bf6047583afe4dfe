#pragma once

#include "rpm/core.hpp"
#include "rpm/inference.hpp"
#include "rpm/localization.hpp"
#include "rpm/models.hpp"
#include "rpm/weight_priors.hpp"

#include <functional>

namespace rpm {

struct PredictiveEstimate {
  double mean_log_predictive = 0.0;
  Vector per_point_log_predictive;
  Index mc_draws_used = 0;

  double total_log_predictive() const { return per_point_log_predictive.sum(); }
};

// ---------------------------------------------------------------------------
// Normalizers of the tempered likelihood l(y | beta)^w over y

double log_bernoulli_normalizer(double p, double w);
double log_gaussian_normalizer(double variance, double w);
/// Direct summation over counts, switching to a quadrature of the tail when
/// the terms decay too slowly (tiny w).
double log_poisson_normalizer(double rate, double w);

bool has_power_normalizer(const ModelSpec& spec);

/// log C(beta, w) for every row of `points` (the Bernoulli normalizer depends
/// on covariates). Throws UnsupportedFamily for mixtures and factorizations.
Vector log_power_normalizers(const ModelSpec& spec, const Vector& flat_params, double w, const Dataset& points);

/// C(beta, w). Logistic models need the observation whose success
/// probability defines the normalizer.
double power_likelihood_normalizer(const ModelSpec& spec, const ModelParameters& params, double w,
                                   const Dataset* point = nullptr);

// ---------------------------------------------------------------------------
// Posterior predictive likelihoods

constexpr Index kDefaultPredictiveDraws = 250;

/// log mean over posterior draws of l(y_new | beta). MAP posteriors use the
/// plug-in value.
PredictiveEstimate predictive_original(const Posterior& post, const ModelSpec& spec, const Dataset& y_new,
                                       Index max_draws = kDefaultPredictiveDraws);

/// Draws fresh local coefficients around every top-level draw.
PredictiveEstimate predictive_localized(const Posterior& post, const LocalizedModel& model, const Dataset& y_new,
                                        Rng& rng, Index local_draws = 10,
                                        Index max_draws = kDefaultPredictiveDraws);

using WeightSampler = std::function<double(Rng&)>;

/// log mean over (beta draw, fresh weight) of l^w / C. Families without a
/// normalizer fall back to the unit-weight plug-in.
PredictiveEstimate predictive_rpm(const Posterior& post, const ModelSpec& spec, const WeightSampler& draw_weight,
                                  const Dataset& y_new, Rng& rng, Index weight_draws = 50,
                                  Index max_draws = kDefaultPredictiveDraws);

/// Weights drawn from the single-weight marginal of `prior_w` for a training
/// set of size n_train.
PredictiveEstimate predictive_rpm(const Posterior& post, const ModelSpec& spec, const WeightPriorSpec& prior_w,
                                  Index n_train, const Dataset& y_new, Rng& rng, Index weight_draws = 50,
                                  Index max_draws = kDefaultPredictiveDraws);

}  // namespace rpm

#pragma once

#include "rpm/core.hpp"
#include "rpm/inference.hpp"
#include "rpm/models.hpp"
#include "rpm/transforms.hpp"

#include <optional>

namespace rpm {

/// Hierarchical variant of a base model where each observation gets its own
/// copy of the coefficients, drawn around a shared top-level value.
///
/// Poisson: theta ~ Gamma(gamma_a, gamma_b), theta_n ~ N(theta, v) with
/// theta_n > 0 enforced by the likelihood only, v ~ lognormal(0, scale_lognormal_sd).
/// Logistic: beta_j ~ N(0, coef_prior_sd), beta_nj ~ N(beta_j, v),
/// v ~ Gamma(gamma_a, gamma_b).
/// Linear: beta_j ~ N(0, coef_prior_sd), beta_nj ~ N(beta_j, v_j),
/// v_j ~ lognormal(0, scale_lognormal_sd), sigma_sq ~ Gamma(gamma_a, gamma_b).
struct LocalizedSpec {
  ModelSpec base = PoissonRateSpec{};
  double scale_lognormal_sd = 1.0;
  double gamma_a = 2.0;
  double gamma_b = 2.0;
  double coef_prior_sd = 10.0;
  /// Pins every local variance to this value (the "local_var" block is dropped).
  std::optional<double> fixed_local_var;
};

/// Joint density over z = [top-level params | per-observation copies] in
/// unconstrained space. With `marginalize` the linear model integrates its
/// copies out exactly and carries no local coordinates.
class LocalizedModel {
 public:
  LocalizedModel(LocalizedSpec spec, const Dataset& data, bool marginalize = true);

  const LocalizedSpec& spec() const noexcept { return spec_; }
  const ParameterLayout& top_layout() const noexcept { return top_layout_; }
  ModelParameters initial_top() const;
  /// Coefficients localized per observation (1 for Poisson).
  Index n_coef() const noexcept { return n_coef_; }
  Index n_obs() const noexcept { return y_.size(); }
  bool marginalized() const noexcept { return marginal_; }
  Index n_local_coords() const noexcept { return marginal_ ? 0 : n_obs() * n_coef_; }
  Index dimension() const noexcept { return top_layout_.unconstrained_size() + n_local_coords(); }

  /// Constrained-space joint. Locals are N x n_coef; ignored when marginalized.
  double log_joint(const Vector& top, const Matrix& locals, Vector* grad_top = nullptr,
                   Matrix* grad_locals = nullptr) const;

  double eval(const Vector& z, Vector* grad, JacobianMode mode) const;
  LogDensityFn as_log_density(JacobianMode mode = JacobianMode::kInclude) const;
  Vector initial_point() const;

  Vector top_from(const Vector& z) const;
  Matrix locals_from(const Vector& z) const;

  /// One draw of a new observation's local coefficients given top values.
  Vector draw_local(const Vector& top, Rng& rng) const;
  /// log l(y_n | local coefficients) for row n of `data`; `top` supplies
  /// shared noise terms.
  double point_loglik(const Vector& top, const Vector& local, const Dataset& data, Index n) const;

 private:
  enum class Family { kPoisson, kLogistic, kLinear };
  Vector design_row(const Dataset& data, Index n) const;
  bool free_var() const noexcept { return !spec_.fixed_local_var.has_value(); }

  LocalizedSpec spec_;
  Family family_;
  bool marginal_;
  bool logistic_intercept_ = false;
  std::vector<Index> linear_columns_;
  Matrix design_;
  Vector y_;
  Vector lgamma_y_;
  Index n_coef_ = 1;
  ParameterLayout top_layout_;
};

double log_joint_localized(const LocalizedSpec& spec, const ModelParameters& top,
                           const Matrix& locals, const Dataset& data);

/// Samples the localized joint and summarizes over the top-level blocks.
Posterior fit_localized(const LocalizedModel& model, const SamplerConfig& cfg);

/// Weights under which reweighted least squares matches a localized slope:
/// 1 / ((x_n - mean(x))^2 * lambda_sq + sigma_sq).
Vector glm_localization_weights(const Vector& x, double lambda_sq, double sigma_sq);

struct GlmEquivalence {
  Vector beta_localized;  // (intercept, slope) on the original x scale
  Vector beta_weighted;
  double max_abs_diff = 0.0;
};

/// Fits the centered regression twice: weighted least squares with the
/// localization weights, and the maximum-likelihood fit of the marginal
/// heteroscedastic model by Newton steps on whitened rows.
GlmEquivalence verify_glm_equivalence(const Dataset& data, double lambda_sq, double sigma_sq);

/// Draw from N(mean, var) restricted to (0, inf).
double sample_positive_normal(double mean, double var, Rng& rng);

}  // namespace rpm

#pragma once

#include "rpm/core.hpp"
#include "rpm/transforms.hpp"
#include "rpm/weight_priors.hpp"

#include <memory>
#include <utility>
#include <variant>
#include <vector>

namespace rpm {

// ---------------------------------------------------------------------------
// Model specifications

struct PoissonRateSpec {
  double gamma_a = 2.0;
  double gamma_b = 0.5;
};

struct LogisticRegressionSpec {
  double prior_sd = 10.0;
  bool with_intercept = false;
};

/// Intercept plus the listed covariate columns.
struct LinearRegressionSpec {
  double prior_sd = 10.0;
  double noise_a = 1.0;
  double noise_b = 1.0;
  std::vector<Index> design;
};

/// Diagonal-covariance mixture. Scales are standard deviations with a
/// lognormal(0, scale_prior_sd) prior.
struct FiniteGmmSpec {
  Index components = 30;
  double mean_prior_sd = 10.0;
  double scale_prior_sd = 10.0;
  double mix_concentration = 1.0;
};

struct PoissonFactorizationSpec {
  Index latent_dim = 20;
  double gamma_shape = 1.0;
  double gamma_rate = 0.001;
};

using ModelSpec = std::variant<PoissonRateSpec, LogisticRegressionSpec, LinearRegressionSpec,
                               FiniteGmmSpec, PoissonFactorizationSpec>;

// ---------------------------------------------------------------------------
// Sparse count matrix for factorization models

struct PFEntry {
  Index user;
  Index item;
  double count;
};

class PFDataset {
 public:
  PFDataset() = default;
  /// Throws ShapeError on out-of-range indices or duplicate (user, item) pairs.
  PFDataset(Index n_users, Index n_items, std::vector<PFEntry> entries);

  Index n_users() const noexcept { return n_users_; }
  Index n_items() const noexcept { return n_items_; }
  const std::vector<PFEntry>& entries() const noexcept { return entries_; }
  /// Entries of one user, sorted by item.
  std::span<const PFEntry> row(Index user) const;
  bool has(Index user, Index item) const;

 private:
  Index n_users_ = 0;
  Index n_items_ = 0;
  std::vector<PFEntry> entries_;  // sorted by (user, item)
  std::vector<std::size_t> row_start_;
};

/// Non-owning reference to whichever dataset kind a model consumes.
class DataView {
 public:
  DataView(const Dataset& d) : data_(&d) {}
  DataView(const PFDataset& d) : data_(&d) {}

  const Dataset& dense() const;
  const PFDataset& sparse() const;
  bool is_sparse() const noexcept { return std::holds_alternative<const PFDataset*>(data_); }

 private:
  std::variant<const Dataset*, const PFDataset*> data_;
};

// ---------------------------------------------------------------------------
// Model evaluation on flat constrained vectors

class Model {
 public:
  virtual ~Model() = default;

  /// Parameter blocks at their initial values.
  virtual ModelParameters initial_params() const = 0;
  /// Number of likelihood terms (observations, or users for factorization).
  virtual Index n_terms() const = 0;
  /// Returns sum_n c_n * loglik_n. Optionally writes the per-term values and
  /// adds the constrained-space gradient into `grad`.
  virtual double weighted_loglik(const Vector& x, const Vector& c, Vector* terms,
                                 Vector* grad) const = 0;
  /// log p(beta); adds its gradient into `grad` when given.
  virtual double log_prior(const Vector& x, Vector* grad) const = 0;

  /// Majorize-minimize update of the parameters at fixed term weights.
  virtual bool has_mm_step() const { return false; }
  virtual void mm_step(Vector& /*x*/, const Vector& /*c*/) const {}

  /// Random restart point in constrained space (defaults to the initial point).
  virtual Vector random_start(Rng& rng) const;

  const ParameterLayout& layout() const noexcept { return layout_; }
  Vector flatten(const ModelParameters& params) const;
  ModelParameters unflatten(const Vector& x) const;
  Vector loglik_terms(const Vector& x) const;

 protected:
  void set_layout(const ModelParameters& schema) { layout_ = ParameterLayout(schema); }

 private:
  ParameterLayout layout_;
};

/// Builds an evaluator; the model keeps its own copy of the data.
std::unique_ptr<Model> make_model(const ModelSpec& spec, DataView data);

Vector loglik_terms(const ModelSpec& spec, const ModelParameters& params, DataView data);
double log_prior(const ModelSpec& spec, const ModelParameters& params, DataView data);
double log_joint_rpm(const ModelSpec& spec, const WeightPriorSpec& prior_w,
                     const ModelParameters& params, const WeightVector& w, DataView data);

enum class JacobianMode { kExclude, kInclude };

/// The reweighted joint over z = [parameters | weights] in unconstrained
/// space. Beta weights use a logit map, Gamma weights a log map, and
/// scaled-Dirichlet weights an anchored softmax of size N scaled by N.
class RpmObjective {
 public:
  RpmObjective(std::shared_ptr<const Model> model, WeightPriorSpec prior_w, JacobianMode mode);

  const Model& model() const noexcept { return *model_; }
  const WeightPriorSpec& weight_prior() const noexcept { return prior_w_; }
  Index n_params() const noexcept { return model_->layout().unconstrained_size(); }
  Index n_weight_coords() const noexcept { return n_weight_coords_; }
  Index dimension() const noexcept { return n_params() + n_weight_coords_; }

  double eval(const Vector& z, Vector* grad) const;
  LogDensityFn as_log_density() const;

  Vector weights_from(const Vector& z_weights) const;
  Vector weights_to_unconstrained(const Vector& w) const;
  Vector pack(const ModelParameters& params, const Vector& w) const;
  Vector initial_point() const;

  ModelParameters params_from(const Vector& z) const;
  Vector weights_of(const Vector& z) const { return weights_from(z.tail(n_weight_coords_)); }

 private:
  std::shared_ptr<const Model> model_;
  WeightPriorSpec prior_w_;
  JacobianMode mode_;
  Index n_weight_coords_;
};

/// Value and gradient of the reweighted joint in unconstrained space
/// (Jacobian terms included).
std::pair<double, Vector> grad_log_joint_unconstrained(const ModelSpec& spec,
                                                       const WeightPriorSpec& prior_w,
                                                       const Vector& z_params,
                                                       const Vector& z_weights, DataView data);

/// The model alone (all weights fixed at one) over unconstrained parameters.
class ModelObjective {
 public:
  ModelObjective(std::shared_ptr<const Model> model, JacobianMode mode, Vector term_weights = {});

  double eval(const Vector& z, Vector* grad) const;
  LogDensityFn as_log_density() const;
  const Model& model() const noexcept { return *model_; }

 private:
  std::shared_ptr<const Model> model_;
  JacobianMode mode_;
  Vector term_weights_;
};

}  // namespace rpm

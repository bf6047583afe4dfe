#pragma once

#include "rpm/core.hpp"
#include "rpm/models.hpp"
#include "rpm/transforms.hpp"
#include "rpm/weight_priors.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rpm {

// ---------------------------------------------------------------------------
// Optimization

struct MapResult {
  Vector point;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

class NotConverged : public Error {
 public:
  NotConverged(const std::string& what, MapResult best) : Error(what), best_(std::move(best)) {}
  const MapResult& best() const noexcept { return best_; }

 private:
  MapResult best_;
};

struct MapConfig {
  int max_iter = 5000;
  double grad_tol = 1e-6;
  /// Relative change in value below which a run counts as stalled.
  double value_tol = 1e-12;
  int history = 10;
  /// When false a run that misses grad_tol returns with converged = false
  /// instead of raising NotConverged.
  bool throw_on_failure = true;
};

/// Quasi-Newton (limited-memory BFGS) ascent with backtracking. Converged
/// when the infinity norm of the gradient drops below grad_tol.
MapResult map_estimate(const LogDensityFn& f, const Vector& init, const MapConfig& cfg = {});

struct CoordinateConfig {
  int max_sweeps = 500;
  double value_tol = 1e-9;
  MapConfig inner;
  int mm_steps_per_sweep = 1;
  /// Parameters to start from; the model's initial point when empty.
  std::optional<Vector> init_params;
};

struct CoordinateResult {
  MapResult result;              // point over [params | weights] in RpmObjective coordinates
  std::vector<double> trace;     // joint value after every sweep
  Vector weights;                // final weights in their own coordinates
  bool used_fallback = false;    // weight prior had no stationary function
};

/// Alternates the exact per-weight update with a parameter step at fixed
/// weights. Objective is the constrained-space joint (no Jacobian).
CoordinateResult coordinate_map(const ModelSpec& spec, const WeightPriorSpec& prior_w, DataView data,
                                const CoordinateConfig& cfg = {});
CoordinateResult coordinate_map(std::shared_ptr<const Model> model, const WeightPriorSpec& prior_w,
                                const CoordinateConfig& cfg = {});

// ---------------------------------------------------------------------------
// Sampling

enum class SamplerMethod { kRandomWalk, kLeapfrog };

struct SamplerConfig {
  int n_warmup = 1000;
  int n_draws = 1000;
  SamplerMethod method = SamplerMethod::kLeapfrog;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  int leapfrog_steps = 16;
  double target_accept = 0.75;
  bool adapt_metric = true;
};

struct SampleChain {
  Matrix draws;  // S x dim, unconstrained
  std::vector<char> accepted;
  double accept_rate = 0.0;
  int warmup_discarded = 0;
  int non_finite = 0;
  double step_size = 0.0;
};

SampleChain sample_posterior(const LogDensityFn& f, const Vector& init, const SamplerConfig& cfg);

// ---------------------------------------------------------------------------
// Posterior summaries

/// Either a MAP point (with optional Laplace covariance) or a sample chain,
/// over an unconstrained vector whose leading coordinates follow `layout`.
/// Coordinates after the parameters (weights) are mapped by `weight_map`.
class Posterior {
 public:
  static Posterior from_map(MapResult map, ParameterLayout layout,
                            std::optional<Matrix> laplace_cov = std::nullopt);
  static Posterior from_chain(SampleChain chain, ParameterLayout layout);

  void set_weight_map(std::function<Vector(const Vector&)> f) { weight_map_ = std::move(f); }

  bool is_chain() const noexcept { return chain_.has_value(); }
  const ParameterLayout& layout() const noexcept { return layout_; }
  const std::optional<MapResult>& map() const noexcept { return map_; }
  const std::optional<Matrix>& laplace_cov() const noexcept { return laplace_cov_; }
  const std::optional<SampleChain>& chain() const noexcept { return chain_; }

  /// Number of stored draws (1 for a MAP posterior).
  Index n_draws() const;
  /// Flat constrained parameters of draw s.
  Vector params_at(Index s) const;
  /// Up to `max_draws` evenly thinned draw indices.
  std::vector<Index> thinned(Index max_draws) const;
  /// Weights of draw s; throws ShapeError when no weight map is set.
  Vector weights_at(Index s) const;
  Vector weight_means() const;

 private:
  Posterior() = default;
  ParameterLayout layout_;
  std::optional<MapResult> map_;
  std::optional<Matrix> laplace_cov_;
  std::optional<SampleChain> chain_;
  std::function<Vector(const Vector&)> weight_map_;
};

struct BlockSummary {
  Vector mean;
  Vector ci95_low;
  Vector ci95_high;
};

/// Means and 95% intervals of a named block in constrained space. The block
/// name "weights" summarizes the weight map.
BlockSummary posterior_summary(const Posterior& post, const std::string& block);

/// Negative inverse Hessian of f at x by central differences of the gradient.
Matrix laplace_covariance(const LogDensityFn& f, const Vector& x, double h = 1e-5);

}  // namespace rpm

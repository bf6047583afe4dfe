#pragma once

#include "rpm/core.hpp"
#include "rpm/models.hpp"
#include "rpm/weight_priors.hpp"

#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace rpm {

/// Scalar estimator evaluated with a multiplicity per observation.
using WeightedEstimator = std::function<double(const Dataset& data, const Vector& multiplicity)>;

WeightedEstimator sample_mean_estimator();

/// MAP of the first model parameter at fixed term multiplicities, without
/// reweighting.
WeightedEstimator model_map_estimator(const ModelSpec& spec);

/// MAP of the first model parameter under the reweighted model; each
/// weight is profiled out through its stationary function.
WeightedEstimator rpm_map_estimator(const ModelSpec& spec, const WeightPriorSpec& prior_w);

/// Appends an observation with response z (covariates zero when present).
Dataset append_observation(const Dataset& base, double z);

/// Difference quotient of the estimator under contamination t at z. The
/// contaminating point enters with multiplicity t N / (1 - t).
double empirical_influence(const WeightedEstimator& estimator, const Dataset& base, double z, double t);

struct InfluenceCurve {
  Vector z_grid;  // sorted by decreasing loglik_at_z
  Vector if_values;
  Vector loglik_at_z;
};

struct InfluenceCheck {
  InfluenceCurve curve;
  bool pass = false;
};

/// Influence along z_grid. Passes when |IF| at the least likely z is below a
/// tenth of |IF| at the most likely z and the tail never grows by more than
/// 20% between neighbours. No weight prior means the unweighted model.
InfluenceCheck influence_decay_check(const ModelSpec& spec, const std::optional<WeightPriorSpec>& prior_w,
                                     const Dataset& base, const Vector& z_grid, double t = 1e-3);

struct BimodalityConfig {
  double threshold = 0.5;
  double prominence = 0.05;  // fraction of the highest density peak
  double min_frac_below = 0.05;
  int grid_points = 256;
};

struct WeightDiagnostic {
  int kde_mode_count = 0;
  double frac_below = 0.0;
  double threshold = 0.5;
  bool bimodal_flag = false;
};

/// Gaussian KDE with Silverman's bandwidth over [0, 1.2 max(w)].
WeightDiagnostic weight_bimodality(const Vector& w, const BimodalityConfig& cfg = {});

/// The k smallest weights in ascending order, ties broken by index.
std::vector<std::pair<Index, double>> rank_downweighted(const Vector& w, Index k);

}  // namespace rpm

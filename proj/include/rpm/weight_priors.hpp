#pragma once

#include "rpm/core.hpp"

#include <string>
#include <string_view>
#include <variant>

namespace rpm {

struct BetaBank {
  double a;
  double b;
};

/// w = N * v with v ~ Dirichlet(a, ..., a).
struct ScaledDirichlet {
  double a;
};

struct GammaBank {
  double a;  // shape
  double b;  // rate
};

class WeightPriorSpec {
 public:
  using Variant = std::variant<BetaBank, ScaledDirichlet, GammaBank>;

  WeightPriorSpec(BetaBank p);
  WeightPriorSpec(ScaledDirichlet p);
  WeightPriorSpec(GammaBank p);

  /// Accepts `beta:A,B`, `dirichlet:A`, `gamma:A,B`. Throws ConfigError.
  static WeightPriorSpec parse(std::string_view text);
  std::string to_string() const;

  const Variant& variant() const noexcept { return variant_; }
  bool is_beta() const noexcept { return std::holds_alternative<BetaBank>(variant_); }
  bool is_dirichlet() const noexcept { return std::holds_alternative<ScaledDirichlet>(variant_); }
  bool is_gamma() const noexcept { return std::holds_alternative<GammaBank>(variant_); }

  /// Starting value for every weight: 0.5 under Beta, 1 otherwise.
  double initial_weight() const noexcept { return is_beta() ? 0.5 : 1.0; }

 private:
  Variant variant_;
};

inline constexpr double kBetaWeightClip = 1e-12;

/// Throws SupportError if w lies outside the prior's support.
void check_support(const WeightPriorSpec& spec, const Vector& w);

double log_density(const WeightPriorSpec& spec, const WeightVector& w);
double log_density(const WeightPriorSpec& spec, const Vector& w);
Vector grad_log_density(const WeightPriorSpec& spec, const WeightVector& w);
Vector grad_log_density(const WeightPriorSpec& spec, const Vector& w);

/// Stationary weight under a Gamma(a, b) prior: (a - 1) / (b - loglik).
double map_weight_gamma(double a, double b, double loglik);

/// The single-weight maximizer of log p_w(w) + loglik * w.
double induced_weight_function(const WeightPriorSpec& spec, double loglik);

struct InfluenceConditions {
  bool w_limit_zero = false;
  bool a_times_w_bounded = false;
};

InfluenceConditions check_influence_conditions(const WeightPriorSpec& spec);

/// One draw from the marginal of a single weight; `n_obs` scales the Dirichlet case.
double sample_single_weight(const WeightPriorSpec& spec, Index n_obs, Rng& rng);

}  // namespace rpm

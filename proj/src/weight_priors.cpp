#include "rpm/weight_priors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <vector>

namespace rpm {

namespace {

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw ConfigError(std::string("weight prior ") + what + " must be positive and finite");
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_number(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("bad number '" + std::string(s) + "' in weight prior");
  return v;
}

std::vector<double> parse_list(std::string_view s) {
  std::vector<double> out;
  while (true) {
    auto comma = s.find(',');
    out.push_back(parse_number(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

double clip_beta(double w) { return std::clamp(w, kBetaWeightClip, 1.0 - kBetaWeightClip); }

// Objective of a single Beta-prior weight and its derivative.
double beta_objective(double a, double b, double loglik, double w) {
  return (a - 1.0) * std::log(w) + (b - 1.0) * std::log1p(-w) + loglik * w;
}
double beta_slope(double a, double b, double loglik, double w) {
  return (a - 1.0) / w - (b - 1.0) / (1.0 - w) + loglik;
}

// Root of a decreasing function on [lo, hi] with f(lo) > 0 > f(hi).
template <typename F>
double bisect_decreasing(F f, double lo, double hi) {
  while (hi - lo > 1e-12) {
    double mid = 0.5 * (lo + hi);
    if (f(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

WeightPriorSpec::WeightPriorSpec(BetaBank p) : variant_(p) {
  require_positive(p.a, "a");
  require_positive(p.b, "b");
}
WeightPriorSpec::WeightPriorSpec(ScaledDirichlet p) : variant_(p) { require_positive(p.a, "a"); }
WeightPriorSpec::WeightPriorSpec(GammaBank p) : variant_(p) {
  require_positive(p.a, "a");
  require_positive(p.b, "b");
}

WeightPriorSpec WeightPriorSpec::parse(std::string_view text) {
  auto colon = text.find(':');
  if (colon == std::string_view::npos)
    throw ConfigError("weight prior '" + std::string(text) + "' lacks a ':'");
  std::string_view kind = text.substr(0, colon);
  std::vector<double> args = parse_list(text.substr(colon + 1));
  if (kind == "beta" && args.size() == 2) return BetaBank{args[0], args[1]};
  if (kind == "gamma" && args.size() == 2) return GammaBank{args[0], args[1]};
  if (kind == "dirichlet" && args.size() == 1) return ScaledDirichlet{args[0]};
  throw ConfigError("unrecognised weight prior '" + std::string(text) + "'");
}

std::string WeightPriorSpec::to_string() const {
  return std::visit(
      [](const auto& p) -> std::string {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, BetaBank>)
          return "beta:" + format_number(p.a) + "," + format_number(p.b);
        else if constexpr (std::is_same_v<T, GammaBank>)
          return "gamma:" + format_number(p.a) + "," + format_number(p.b);
        else
          return "dirichlet:" + format_number(p.a);
      },
      variant_);
}

void check_support(const WeightPriorSpec& spec, const Vector& w) {
  for (Index n = 0; n < w.size(); ++n)
    if (!(w[n] > 0.0) || !std::isfinite(w[n]))
      throw SupportError("weight " + std::to_string(n) + " is not positive");
  if (spec.is_beta() && (w.array() >= 1.0).any())
    throw SupportError("Beta-prior weights must be below 1");
  if (spec.is_dirichlet()) {
    double n = static_cast<double>(w.size());
    if (std::abs(w.sum() - n) > 1e-8 * std::max(1.0, n))
      throw SupportError("scaled-Dirichlet weights must sum to N");
  }
}

double log_density(const WeightPriorSpec& spec, const WeightVector& w) {
  return log_density(spec, w.values());
}

double log_density(const WeightPriorSpec& spec, const Vector& w) {
  check_support(spec, w);
  const double n = static_cast<double>(w.size());
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        double total = 0.0;
        if constexpr (std::is_same_v<T, BetaBank>) {
          for (Index i = 0; i < w.size(); ++i) {
            double x = clip_beta(w[i]);
            total += (p.a - 1.0) * std::log(x) + (p.b - 1.0) * std::log1p(-x);
          }
          total -= n * log_beta_fn(p.a, p.b);
        } else if constexpr (std::is_same_v<T, GammaBank>) {
          for (Index i = 0; i < w.size(); ++i) total += (p.a - 1.0) * std::log(w[i]) - p.b * w[i];
          total += n * (p.a * std::log(p.b) - std::lgamma(p.a));
        } else {
          for (Index i = 0; i < w.size(); ++i) total += (p.a - 1.0) * std::log(w[i] / n);
          total += std::lgamma(n * p.a) - n * std::lgamma(p.a) - (n - 1.0) * std::log(n);
        }
        return total;
      },
      spec.variant());
}

Vector grad_log_density(const WeightPriorSpec& spec, const WeightVector& w) {
  return grad_log_density(spec, w.values());
}

Vector grad_log_density(const WeightPriorSpec& spec, const Vector& w) {
  check_support(spec, w);
  Vector g(w.size());
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        for (Index i = 0; i < w.size(); ++i) {
          if constexpr (std::is_same_v<T, BetaBank>) {
            double x = clip_beta(w[i]);
            g[i] = (p.a - 1.0) / x - (p.b - 1.0) / (1.0 - x);
          } else if constexpr (std::is_same_v<T, GammaBank>) {
            g[i] = (p.a - 1.0) / w[i] - p.b;
          } else {
            g[i] = (p.a - 1.0) / w[i];
          }
        }
      },
      spec.variant());
  return g;
}

double map_weight_gamma(double a, double b, double loglik) {
  if (!(a > 1.0)) throw DomainError("closed-form Gamma weight needs a > 1");
  double denom = b - loglik;
  if (!(denom > 0.0)) throw DomainError("closed-form Gamma weight needs b - loglik > 0");
  return (a - 1.0) / denom;
}

double induced_weight_function(const WeightPriorSpec& spec, double loglik) {
  if (!std::isfinite(loglik)) throw DomainError("log-likelihood must be finite");
  if (const auto* g = std::get_if<GammaBank>(&spec.variant())) {
    if (!(g->a > 1.0)) throw UnsupportedPrior("induced weight needs Gamma shape a > 1");
    return map_weight_gamma(g->a, g->b, loglik);
  }
  if (const auto* p = std::get_if<BetaBank>(&spec.variant())) {
    const double a = p->a, b = p->b;
    if (!(a > 1.0)) throw UnsupportedPrior("induced weight needs Beta shape a > 1");
    const double lo = kBetaWeightClip, hi = 1.0 - kBetaWeightClip;
    auto slope = [&](double w) { return beta_slope(a, b, loglik, w); };
    if (b >= 1.0) {
      // objective is concave: single stationary point or the upper clip
      if (slope(hi) >= 0.0) return hi;
      return bisect_decreasing(slope, lo, hi);
    }
    // b < 1: slope is convex with its minimum at w_m; the objective has a
    // local max below w_m and grows toward the upper boundary
    double ra = std::sqrt(a - 1.0), rb = std::sqrt(1.0 - b);
    double w_m = ra / (ra + rb);
    if (slope(w_m) >= 0.0) return hi;
    double root = bisect_decreasing(slope, lo, w_m);
    return beta_objective(a, b, loglik, root) >= beta_objective(a, b, loglik, hi) ? root : hi;
  }
  throw UnsupportedPrior("scaled-Dirichlet weights have no per-weight stationary function");
}

InfluenceConditions check_influence_conditions(const WeightPriorSpec& spec) {
  std::vector<double> w_vals, aw_vals;
  for (int k = 1; k <= 12; ++k) {
    double ll = -std::pow(10.0, k);
    double w = induced_weight_function(spec, ll);
    w_vals.push_back(w);
    aw_vals.push_back(std::abs(ll * w));
  }
  InfluenceConditions out;
  out.w_limit_zero = w_vals.back() < 1e-8;
  double at_six = aw_vals[5];
  double tail_max = *std::max_element(aw_vals.begin() + 5, aw_vals.end());
  out.a_times_w_bounded = std::isfinite(tail_max) && tail_max < 10.0 * at_six;
  return out;
}

double sample_single_weight(const WeightPriorSpec& spec, Index n_obs, Rng& rng) {
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, BetaBank>) {
          return clip_beta(rng.beta(p.a, p.b));
        } else if constexpr (std::is_same_v<T, GammaBank>) {
          return std::max(rng.gamma(p.a, p.b), 1e-300);
        } else {
          double n = static_cast<double>(n_obs);
          if (n_obs <= 1) return 1.0;
          return std::max(n * rng.beta(p.a, (n - 1.0) * p.a), 1e-300);
        }
      },
      spec.variant());
}

}  // namespace rpm

#include "rpm/robustness.hpp"

#include "rpm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rpm {

namespace {

Vector map_params(const Model& model, const LogDensityFn& f) {
  MapConfig cfg;
  cfg.grad_tol = 1e-10;
  cfg.value_tol = 1e-15;
  cfg.throw_on_failure = false;
  MapResult r = map_estimate(f, model.layout().to_unconstrained(model.initial_params()), cfg);
  return model.layout().constrained_values(r.point);
}

Vector model_fit(const ModelSpec& spec, const Dataset& d, const Vector& c) {
  std::shared_ptr<const Model> model = make_model(spec, d);
  ModelObjective obj(model, JacobianMode::kExclude, c);
  return map_params(*model, obj.as_log_density());
}

Vector rpm_fit(const ModelSpec& spec, const WeightPriorSpec& prior_w, const Dataset& d, const Vector& c) {
  std::shared_ptr<const Model> model = make_model(spec, d);
  // profile objective: each weight maximized in closed form; by the envelope
  // theorem its gradient is the reweighted score
  LogDensityFn f{model->layout().unconstrained_size(), [model, prior_w, c](const Vector& z, Vector* grad) {
                   Vector x = model->layout().constrained_values(z);
                   Vector terms;
                   model->weighted_loglik(x, c, &terms, nullptr);
                   Vector eff(terms.size());
                   double value = 0.0;
                   for (Index n = 0; n < terms.size(); ++n) {
                     double w = induced_weight_function(prior_w, terms[n]);
                     eff[n] = c[n] * w;
                     value += c[n] * (w * terms[n] + log_density(prior_w, Vector::Constant(1, w)));
                   }
                   Vector gx;
                   if (grad) gx = Vector::Zero(x.size());
                   model->weighted_loglik(x, eff, nullptr, grad ? &gx : nullptr);
                   value += model->log_prior(x, grad ? &gx : nullptr);
                   if (!std::isfinite(value)) throw NonFiniteValue("profile objective is not finite");
                   if (grad) *grad = model->layout().pullback(z, gx, false);
                   return value;
                 }};
  return map_params(*model, f);
}

}  // namespace

WeightedEstimator sample_mean_estimator() {
  return [](const Dataset& d, const Vector& c) { return c.dot(d.responses()) / c.sum(); };
}

WeightedEstimator model_map_estimator(const ModelSpec& spec) {
  return [spec](const Dataset& d, const Vector& c) { return model_fit(spec, d, c)[0]; };
}

WeightedEstimator rpm_map_estimator(const ModelSpec& spec, const WeightPriorSpec& prior_w) {
  induced_weight_function(prior_w, -1.0);  // rejects priors without a stationary weight
  return [spec, prior_w](const Dataset& d, const Vector& c) { return rpm_fit(spec, prior_w, d, c)[0]; };
}

Dataset append_observation(const Dataset& base, double z) {
  const Index n = base.n_obs();
  Vector y(n + 1);
  y.head(n) = base.responses();
  y[n] = z;
  if (!base.has_covariates()) return Dataset(y);
  Matrix x = Matrix::Zero(n + 1, base.n_covariates());
  x.topRows(n) = base.covariates();
  return Dataset(y, x);
}

double empirical_influence(const WeightedEstimator& estimator, const Dataset& base, double z, double t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("contamination must lie in (0, 1)");
  const Index n = base.n_obs();
  const double t_base = estimator(base, Vector::Ones(n));
  Vector mult = Vector::Ones(n + 1);
  mult[n] = t * static_cast<double>(n) / (1.0 - t);
  const double t_cont = estimator(append_observation(base, z), mult);
  double influence = (t_cont - t_base) / t;
  if (!std::isfinite(influence)) throw NonFiniteValue("influence is not finite");
  return influence;
}

InfluenceCheck influence_decay_check(const ModelSpec& spec, const std::optional<WeightPriorSpec>& prior_w,
                                     const Dataset& base, const Vector& z_grid, double t) {
  if (z_grid.size() < 2) throw ShapeError("influence grid needs at least two points");
  WeightedEstimator est;
  if (prior_w) {
    check_influence_conditions(*prior_w);
    est = rpm_map_estimator(spec, *prior_w);
  } else {
    est = model_map_estimator(spec);
  }

  // likelihood of each grid point under the fitted model
  std::shared_ptr<const Model> model = make_model(spec, base);
  const Vector ones = Vector::Ones(base.n_obs());
  ModelParameters fitted = model->unflatten(prior_w ? rpm_fit(spec, *prior_w, base, ones) : model_fit(spec, base, ones));
  Vector ll(z_grid.size());
  for (Index i = 0; i < z_grid.size(); ++i) {
    Dataset point = append_observation(base, z_grid[i]).subset(std::vector<Index>{base.n_obs()});
    ll[i] = loglik_terms(spec, fitted, point)[0];
  }
  std::vector<Index> order(static_cast<std::size_t>(z_grid.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return ll[a] > ll[b]; });

  InfluenceCheck out;
  out.curve.z_grid.resize(z_grid.size());
  out.curve.loglik_at_z.resize(z_grid.size());
  out.curve.if_values.resize(z_grid.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Index k = static_cast<Index>(i);
    out.curve.z_grid[k] = z_grid[order[i]];
    out.curve.loglik_at_z[k] = ll[order[i]];
    out.curve.if_values[k] = empirical_influence(est, base, z_grid[order[i]], t);
  }
  const Vector mag = out.curve.if_values.cwiseAbs();
  bool monotone = true;
  for (Index i = 1; i + 1 < mag.size(); ++i) monotone = monotone && mag[i + 1] <= 1.2 * mag[i];
  out.pass = monotone && mag[mag.size() - 1] < 0.1 * mag[0];
  return out;
}

WeightDiagnostic weight_bimodality(const Vector& w, const BimodalityConfig& cfg) {
  WeightDiagnostic d;
  d.threshold = cfg.threshold;
  const Index n = w.size();
  if (n == 0) return d;
  d.frac_below = static_cast<double>((w.array() < cfg.threshold).count()) / static_cast<double>(n);

  const double hi = 1.2 * w.maxCoeff();
  Vector clipped = w.cwiseMax(0.0).cwiseMin(hi);
  std::vector<double> sorted(clipped.data(), clipped.data() + n);
  const double mean = clipped.mean();
  const double sd = n > 1 ? std::sqrt((clipped.array() - mean).square().sum() / static_cast<double>(n - 1)) : 0.0;
  const double iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  const double bw = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  if (!(bw > 0.0) || !(hi > 0.0)) {
    d.kde_mode_count = 1;  // point mass
    return d;
  }

  const int g = cfg.grid_points;
  std::vector<double> dens(static_cast<std::size_t>(g), 0.0);
  for (int i = 0; i < g; ++i) {
    double x = hi * i / (g - 1);
    double s = 0.0;
    for (Index k = 0; k < n; ++k) {
      double u = (x - clipped[k]) / bw;
      s += std::exp(-0.5 * u * u);
    }
    dens[static_cast<std::size_t>(i)] = s;
  }
  const double peak = *std::max_element(dens.begin(), dens.end());
  // topographic prominence of every local maximum, boundaries included
  int modes = 0;
  for (int i = 0; i < g; ++i) {
    double v = dens[static_cast<std::size_t>(i)];
    bool left_ok = i == 0 || v > dens[static_cast<std::size_t>(i - 1)];
    bool right_ok = i == g - 1 || v >= dens[static_cast<std::size_t>(i + 1)];
    if (!left_ok || !right_ok) continue;
    double left_min = v, right_min = v;
    bool left_higher = false, right_higher = false;
    for (int j = i - 1; j >= 0; --j) {
      double u = dens[static_cast<std::size_t>(j)];
      if (u > v) {
        left_higher = true;
        break;
      }
      left_min = std::min(left_min, u);
    }
    for (int j = i + 1; j < g; ++j) {
      double u = dens[static_cast<std::size_t>(j)];
      if (u > v) {
        right_higher = true;
        break;
      }
      right_min = std::min(right_min, u);
    }
    double base_level;
    if (left_higher && right_higher) base_level = std::max(left_min, right_min);
    else if (left_higher) base_level = left_min;
    else if (right_higher) base_level = right_min;
    else base_level = 0.0;  // the highest peak
    if (v - base_level > cfg.prominence * peak) ++modes;
  }
  d.kde_mode_count = std::max(modes, 1);
  d.bimodal_flag = d.kde_mode_count >= 2 && d.frac_below >= cfg.min_frac_below;
  return d;
}

std::vector<std::pair<Index, double>> rank_downweighted(const Vector& w, Index k) {
  if (k < 0 || k > w.size()) throw DomainError("k must lie in [0, N]");
  std::vector<Index> idx(static_cast<std::size_t>(w.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return w[a] < w[b]; });
  std::vector<std::pair<Index, double>> out;
  for (Index i = 0; i < k; ++i) out.emplace_back(idx[static_cast<std::size_t>(i)], w[idx[static_cast<std::size_t>(i)]]);
  return out;
}

}  // namespace rpm

#include "rpm/inference.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace rpm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Evaluates f, mapping evaluation failures to -inf so searches can back off.
double try_eval(const LogDensityFn& f, const Vector& x, Vector* g) {
  try {
    double v = f.eval(x, g);
    if (!std::isfinite(v)) return kNegInf;
    if (g && !g->allFinite()) return kNegInf;
    return v;
  } catch (const Error&) {
    return kNegInf;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

MapResult map_estimate(const LogDensityFn& f, const Vector& init, const MapConfig& cfg) {
  Vector x = init;
  Vector g;
  double fx = f.eval(x, &g);
  if (!std::isfinite(fx) || !g.allFinite()) throw NonFiniteValue("objective not finite at the initial point");

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  MapResult res;
  int stalled = 0;
  int iter = 0;
  for (; iter < cfg.max_iter; ++iter) {
    double gnorm = g.lpNorm<Eigen::Infinity>();
    if (gnorm < cfg.grad_tol) break;

    // two-loop recursion on the ascent gradient
    Vector d = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(d);
      d -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) d *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      double beta = rho_hist[i] * y_hist[i].dot(d);
      d += (alpha[i] - beta) * s_hist[i];
    }
    double slope = d.dot(g);
    if (!(slope > 0.0) || !d.allFinite()) {
      s_hist.clear(), y_hist.clear(), rho_hist.clear();
      d = g;
      slope = g.squaredNorm();
    }

    double t = s_hist.empty() ? std::min(1.0, 1.0 / std::max(gnorm, 1e-300)) : 1.0;
    Vector xn, gn;
    double fn = kNegInf;
    bool ok = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + t * d;
      fn = try_eval(f, xn, &gn);
      if (fn >= fx + 1e-4 * t * slope) {
        ok = true;
        break;
      }
      t *= 0.5;
    }
    if (!ok) {
      if (!s_hist.empty()) {
        s_hist.clear(), y_hist.clear(), rho_hist.clear();
        continue;
      }
      break;
    }

    Vector s = xn - x;
    Vector y = g - gn;  // gradient change of the minimized function -f
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > cfg.history) {
        s_hist.pop_front(), y_hist.pop_front(), rho_hist.pop_front();
      }
    }
    double improvement = fn - fx;
    x = std::move(xn);
    g = std::move(gn);
    fx = fn;
    if (improvement <= cfg.value_tol * std::max(1.0, std::abs(fx))) {
      if (++stalled >= 20) {
        ++iter;
        break;
      }
    } else {
      stalled = 0;
    }
  }
  res.point = x;
  res.value = fx;
  res.grad_norm = g.lpNorm<Eigen::Infinity>();
  res.iterations = iter;
  res.converged = res.grad_norm < cfg.grad_tol;
  if (!res.converged && cfg.throw_on_failure)
    throw NotConverged("optimizer stopped with gradient norm " + std::to_string(res.grad_norm), res);
  return res;
}

// ---------------------------------------------------------------------------

CoordinateResult coordinate_map(const ModelSpec& spec, const WeightPriorSpec& prior_w, DataView data,
                                const CoordinateConfig& cfg) {
  return coordinate_map(std::shared_ptr<const Model>(make_model(spec, data)), prior_w, cfg);
}

CoordinateResult coordinate_map(std::shared_ptr<const Model> model, const WeightPriorSpec& prior_w,
                                const CoordinateConfig& cfg) {
  CoordinateResult out;
  RpmObjective joint(model, prior_w, JacobianMode::kExclude);
  const ParameterLayout& layout = model->layout();

  bool closed_form = true;
  try {
    induced_weight_function(prior_w, -1.0);
  } catch (const UnsupportedPrior&) {
    closed_form = false;
  }

  Vector x = cfg.init_params ? *cfg.init_params : model->flatten(model->initial_params());
  if (!closed_form) {
    out.used_fallback = true;
    Vector z0 = joint.pack(model->unflatten(x),
                           Vector::Constant(model->n_terms(), prior_w.initial_weight()));
    MapConfig inner = cfg.inner;
    inner.throw_on_failure = false;
    out.result = map_estimate(joint.as_log_density(), z0, inner);
    out.trace.push_back(out.result.value);
    out.weights = joint.weights_of(out.result.point);
    return out;
  }

  auto weight_step = [&](const Vector& params) {
    Vector terms = model->loglik_terms(params);
    Vector w(terms.size());
    for (Index n = 0; n < terms.size(); ++n) w[n] = induced_weight_function(prior_w, terms[n]);
    return w;
  };
  auto joint_value = [&](const Vector& params, const Vector& w) {
    return model->log_prior(params, nullptr) + log_density(prior_w, w) +
           model->weighted_loglik(params, w, nullptr, nullptr);
  };

  Vector w;
  bool converged = false;
  double prev = kNegInf;
  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    w = weight_step(x);
    if (model->has_mm_step()) {
      for (int k = 0; k < cfg.mm_steps_per_sweep; ++k) model->mm_step(x, w);
    } else {
      ModelObjective partial(model, JacobianMode::kExclude, w);
      LogDensityFn fp = partial.as_log_density();
      Vector z = layout.to_unconstrained(model->unflatten(x));
      MapConfig inner = cfg.inner;
      inner.throw_on_failure = false;
      MapResult r = map_estimate(fp, z, inner);
      if (r.value >= fp.value(z)) x = layout.constrained_values(r.point);
    }
    double value = joint_value(x, w);
    out.trace.push_back(value);
    if (value - prev < cfg.value_tol * std::max(1.0, std::abs(prev))) {
      converged = true;
      break;
    }
    prev = value;
  }
  w = weight_step(x);
  double final_value = joint_value(x, w);
  out.trace.push_back(final_value);

  out.result.point = joint.pack(model->unflatten(x), w);
  out.weights = w;
  Vector grad;
  out.result.value = joint.eval(out.result.point, &grad);
  out.result.grad_norm = grad.lpNorm<Eigen::Infinity>();
  out.result.iterations = static_cast<int>(out.trace.size());
  out.result.converged = converged;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct DualAveraging {
  double mu = 0.0, hbar = 0.0, log_eps_bar = 0.0;
  int t = 0;
  double target = 0.75;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    hbar = 0.0;
    log_eps_bar = 0.0;
    t = 0;
  }
  double update(double accept) {
    constexpr double gamma = 0.05, t0 = 10.0, kappa = 0.75;
    ++t;
    double eta = 1.0 / (t + t0);
    hbar = (1.0 - eta) * hbar + eta * (target - accept);
    double log_eps = mu - std::sqrt(static_cast<double>(t)) / gamma * hbar;
    double w = std::pow(static_cast<double>(t), -kappa);
    log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
    return std::exp(log_eps);
  }
  double final_eps() const { return std::exp(log_eps_bar); }
};

struct LeapfrogOutcome {
  Vector q, g;
  double lp = kNegInf;
  double accept = 0.0;
  bool finite = false;
};

LeapfrogOutcome leapfrog(const LogDensityFn& f, const Vector& q0, const Vector& g0, double lp0,
                         const Vector& p0, const Vector& inv_metric, double eps, int steps) {
  LeapfrogOutcome out;
  Vector q = q0, p = p0, g = g0;
  double lp = lp0;
  double h0 = -lp0 + 0.5 * p0.cwiseProduct(p0).dot(inv_metric);
  p += 0.5 * eps * g;
  for (int l = 0; l < steps; ++l) {
    q += eps * inv_metric.cwiseProduct(p);
    lp = try_eval(f, q, &g);
    if (lp == kNegInf) return out;
    p += (l + 1 == steps ? 0.5 : 1.0) * eps * g;
  }
  double h1 = -lp + 0.5 * p.cwiseProduct(p).dot(inv_metric);
  out.finite = std::isfinite(h1);
  out.accept = out.finite ? std::min(1.0, std::exp(h0 - h1)) : 0.0;
  if (std::isnan(out.accept)) out.accept = 0.0;
  out.q = std::move(q);
  out.g = std::move(g);
  out.lp = lp;
  return out;
}

Vector draw_momentum(Rng& rng, const Vector& inv_metric) {
  Vector p(inv_metric.size());
  for (Index i = 0; i < p.size(); ++i) p[i] = rng.normal() / std::sqrt(inv_metric[i]);
  return p;
}

double reasonable_step(const LogDensityFn& f, const Vector& q, const Vector& g, double lp,
                       const Vector& inv_metric, Rng& rng, double eps) {
  Vector p = draw_momentum(rng, inv_metric);
  auto ratio = [&](double e) { return leapfrog(f, q, g, lp, p, inv_metric, e, 1).accept; };
  double a = ratio(eps);
  int direction = a > 0.5 ? 1 : -1;
  for (int k = 0; k < 60; ++k) {
    if (direction == 1 && !(a > 0.5)) break;
    if (direction == -1 && !(a < 0.5)) break;
    eps *= direction == 1 ? 2.0 : 0.5;
    if (eps > 1e3 || eps < 1e-10) break;
    a = ratio(eps);
  }
  return eps;
}

// Ends of the slow windows used to re-estimate the diagonal metric.
std::vector<int> metric_window_ends(int n_warmup) {
  std::vector<int> ends;
  if (n_warmup < 40) return ends;
  int init = static_cast<int>(0.15 * n_warmup);
  int term = static_cast<int>(0.1 * n_warmup);
  int slow_end = n_warmup - term;
  int start = init, size = std::max(25, (slow_end - init) / 15);
  while (start < slow_end) {
    int end = start + size;
    if (end + 2 * size > slow_end) end = slow_end;
    ends.push_back(end);
    start = end;
    size *= 2;
  }
  return ends;
}

SampleChain run_leapfrog(const LogDensityFn& f, const Vector& init, const SamplerConfig& cfg, Rng& rng) {
  const Index dim = init.size();
  Vector q = init, g;
  double lp = f.eval(q, &g);
  if (!std::isfinite(lp) || !g.allFinite()) throw NonFiniteValue("log density not finite at the initial point");

  Vector inv_metric = Vector::Ones(dim);
  double eps = reasonable_step(f, q, g, lp, inv_metric, rng, 0.1);
  DualAveraging da;
  da.target = cfg.target_accept;
  da.restart(eps);

  std::vector<int> window_ends = cfg.adapt_metric ? metric_window_ends(cfg.n_warmup) : std::vector<int>{};
  std::size_t next_window = 0;
  int window_start = cfg.n_warmup >= 40 ? static_cast<int>(0.15 * cfg.n_warmup) : 0;
  Vector w_mean = Vector::Zero(dim), w_m2 = Vector::Zero(dim);
  int w_count = 0;

  SampleChain chain;
  chain.draws.resize(cfg.n_draws, dim);
  chain.accepted.reserve(static_cast<std::size_t>(cfg.n_draws));
  chain.warmup_discarded = cfg.n_warmup;

  const int total = cfg.n_warmup + cfg.n_draws;
  for (int it = 0; it < total; ++it) {
    const bool warm = it < cfg.n_warmup;
    if (it == cfg.n_warmup) eps = da.final_eps();
    double eps_it = eps * (0.9 + 0.2 * rng.uniform());
    Vector p = draw_momentum(rng, inv_metric);
    LeapfrogOutcome prop = leapfrog(f, q, g, lp, p, inv_metric, eps_it, cfg.leapfrog_steps);
    bool acc = prop.finite && rng.uniform() < prop.accept;
    if (acc) {
      q = std::move(prop.q);
      g = std::move(prop.g);
      lp = prop.lp;
    }
    if (warm) {
      eps = da.update(prop.accept);
      if (next_window < window_ends.size() && it >= window_start) {
        ++w_count;
        Vector delta = q - w_mean;
        w_mean += delta / w_count;
        w_m2 += delta.cwiseProduct(q - w_mean);
        if (it + 1 == window_ends[next_window]) {
          if (w_count > 2) {
            double n = w_count;
            Vector var = w_m2 / (n - 1.0);
            inv_metric = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
            eps = reasonable_step(f, q, g, lp, inv_metric, rng, eps);
            da.restart(eps);
          }
          ++next_window;
          window_start = it + 1;
          w_mean.setZero();
          w_m2.setZero();
          w_count = 0;
        }
      }
    } else {
      int s = it - cfg.n_warmup;
      chain.draws.row(s) = q.transpose();
      chain.accepted.push_back(acc ? 1 : 0);
      if (!prop.finite) ++chain.non_finite;
    }
  }
  chain.step_size = eps;
  return chain;
}

SampleChain run_random_walk(const LogDensityFn& f, const Vector& init, const SamplerConfig& cfg, Rng& rng) {
  const Index dim = init.size();
  Vector q = init;
  double lp = f.value(q);
  if (!std::isfinite(lp)) throw NonFiniteValue("log density not finite at the initial point");

  Vector scale = Vector::Ones(dim);
  double log_s = std::log(2.38 / std::sqrt(static_cast<double>(dim))) + std::log(0.1);
  const double target = 0.3;
  Vector w_mean = Vector::Zero(dim), w_m2 = Vector::Zero(dim);
  int w_count = 0;
  const int cov_start = cfg.n_warmup / 4, cov_end = cfg.n_warmup / 2;

  SampleChain chain;
  chain.draws.resize(cfg.n_draws, dim);
  chain.warmup_discarded = cfg.n_warmup;
  const int total = cfg.n_warmup + cfg.n_draws;
  for (int it = 0; it < total; ++it) {
    const bool warm = it < cfg.n_warmup;
    Vector prop = q;
    double s = std::exp(log_s);
    for (Index i = 0; i < dim; ++i) prop[i] += s * scale[i] * rng.normal();
    double lp_prop = try_eval(f, prop, nullptr);
    double accept = lp_prop == kNegInf ? 0.0 : std::min(1.0, std::exp(lp_prop - lp));
    bool acc = rng.uniform() < accept;
    if (acc) {
      q = std::move(prop);
      lp = lp_prop;
    }
    if (warm) {
      log_s += (accept - target) / std::pow(it + 1.0, 0.6);
      if (it >= cov_start && it < cov_end) {
        ++w_count;
        Vector delta = q - w_mean;
        w_mean += delta / w_count;
        w_m2 += delta.cwiseProduct(q - w_mean);
        if (it + 1 == cov_end && w_count > 2) {
          Vector sd = (w_m2 / (w_count - 1.0)).array().sqrt().max(1e-8);
          scale = sd;
          log_s = std::log(2.38 / std::sqrt(static_cast<double>(dim)));
        }
      }
    } else {
      int k = it - cfg.n_warmup;
      chain.draws.row(k) = q.transpose();
      chain.accepted.push_back(acc ? 1 : 0);
      if (lp_prop == kNegInf) ++chain.non_finite;
    }
  }
  chain.step_size = std::exp(log_s);
  return chain;
}

}  // namespace

SampleChain sample_posterior(const LogDensityFn& f, const Vector& init, const SamplerConfig& cfg) {
  if (cfg.n_draws < 1) throw ConfigError("sampler needs at least one draw");
  if (cfg.n_warmup < 0) throw ConfigError("warmup length must be nonnegative");
  Rng rng(cfg.seed, cfg.stream);
  SampleChain chain = cfg.method == SamplerMethod::kLeapfrog ? run_leapfrog(f, init, cfg, rng)
                                                             : run_random_walk(f, init, cfg, rng);
  int n_acc = 0;
  for (char a : chain.accepted) n_acc += a;
  chain.accept_rate = static_cast<double>(n_acc) / static_cast<double>(chain.accepted.size());
  if (2 * chain.non_finite > cfg.n_draws)
    throw DivergentChain(std::to_string(chain.non_finite) + " of " + std::to_string(cfg.n_draws) +
                         " proposals were non-finite");
  return chain;
}

// ---------------------------------------------------------------------------

Posterior Posterior::from_map(MapResult map, ParameterLayout layout, std::optional<Matrix> laplace_cov) {
  Posterior p;
  if (laplace_cov) {
    if (laplace_cov->rows() != map.point.size() || laplace_cov->cols() != map.point.size())
      throw ShapeError("Laplace covariance has wrong shape");
  }
  p.map_ = std::move(map);
  p.layout_ = std::move(layout);
  p.laplace_cov_ = std::move(laplace_cov);
  return p;
}

Posterior Posterior::from_chain(SampleChain chain, ParameterLayout layout) {
  if (chain.draws.rows() < 1) throw EmptyChain("chain has no draws");
  Posterior p;
  p.chain_ = std::move(chain);
  p.layout_ = std::move(layout);
  return p;
}

Index Posterior::n_draws() const { return chain_ ? chain_->draws.rows() : 1; }

Vector Posterior::params_at(Index s) const {
  const Index np = layout_.unconstrained_size();
  if (chain_) {
    if (s < 0 || s >= chain_->draws.rows()) throw ShapeError("draw index out of range");
    return layout_.constrained_values(chain_->draws.row(s).head(np).transpose());
  }
  return layout_.constrained_values(map_->point.head(np));
}

std::vector<Index> Posterior::thinned(Index max_draws) const {
  Index n = n_draws();
  std::vector<Index> out;
  if (max_draws <= 0 || n <= max_draws) {
    for (Index s = 0; s < n; ++s) out.push_back(s);
    return out;
  }
  for (Index j = 0; j < max_draws; ++j) out.push_back((j * n) / max_draws);
  return out;
}

Vector Posterior::weights_at(Index s) const {
  if (!weight_map_) throw ShapeError("posterior carries no weights");
  if (chain_) return weight_map_(chain_->draws.row(s).transpose());
  return weight_map_(map_->point);
}

Vector Posterior::weight_means() const {
  Vector acc = weights_at(0);
  for (Index s = 1; s < n_draws(); ++s) acc += weights_at(s);
  return acc / static_cast<double>(n_draws());
}

BlockSummary posterior_summary(const Posterior& post, const std::string& block) {
  BlockSummary out;
  const Index n = post.n_draws();
  auto summarize = [&](auto value_of, Index width) {
    out.mean = Vector::Zero(width);
    out.ci95_low.resize(width);
    out.ci95_high.resize(width);
    std::vector<Vector> draws;
    draws.reserve(static_cast<std::size_t>(n));
    for (Index s = 0; s < n; ++s) draws.push_back(value_of(s));
    for (Index j = 0; j < width; ++j) {
      std::vector<double> col(static_cast<std::size_t>(n));
      double sum = 0.0;
      for (Index s = 0; s < n; ++s) {
        col[static_cast<std::size_t>(s)] = draws[static_cast<std::size_t>(s)][j];
        sum += col[static_cast<std::size_t>(s)];
      }
      out.mean[j] = sum / static_cast<double>(n);
      out.ci95_low[j] = quantile(col, 0.025);
      out.ci95_high[j] = quantile(col, 0.975);
    }
  };

  if (block == "weights") {
    Index width = post.weights_at(0).size();
    summarize([&](Index s) { return post.weights_at(s); }, width);
    return out;
  }

  const ParameterLayout& layout = post.layout();
  const auto pieces = layout.pieces_for(block);
  const Index x_off = pieces.front().x_offset;
  Index width = 0;
  for (const auto& p : pieces) width += p.transform.dim_constrained;

  if (post.is_chain() || !post.laplace_cov()) {
    summarize([&](Index s) -> Vector { return post.params_at(s).segment(x_off, width); }, width);
    return out;
  }

  // MAP with a Laplace covariance: interval endpoints pushed through the transform
  const Matrix& cov = *post.laplace_cov();
  const Vector& z = post.map()->point;
  Vector x = post.params_at(0);
  out.mean = x.segment(x_off, width);
  out.ci95_low.resize(width);
  out.ci95_high.resize(width);
  Index col = 0;
  for (const auto& p : pieces) {
    const Index nx = p.transform.dim_constrained;
    if (p.transform.kind == TransformKind::kSimplex) {
      Vector xs = x.segment(p.x_offset, nx);
      Matrix jac(nx, nx - 1);
      for (Index k = 0; k < nx; ++k)
        for (Index j = 0; j < nx - 1; ++j) jac(k, j) = xs[k] * ((k == j ? 1.0 : 0.0) - xs[j]);
      Matrix block_cov = cov.block(p.z_offset, p.z_offset, nx - 1, nx - 1);
      Vector var = (jac * block_cov * jac.transpose()).diagonal();
      for (Index k = 0; k < nx; ++k) {
        double sd = std::sqrt(std::max(var[k], 0.0));
        out.ci95_low[col + k] = std::max(0.0, xs[k] - 1.96 * sd);
        out.ci95_high[col + k] = std::min(1.0, xs[k] + 1.96 * sd);
      }
    } else {
      for (Index k = 0; k < nx; ++k) {
        Index zi = p.z_offset + k;
        double sd = std::sqrt(std::max(cov(zi, zi), 0.0));
        double lo = z[zi] - 1.96 * sd, hi = z[zi] + 1.96 * sd;
        switch (p.transform.kind) {
          case TransformKind::kLogPositive: lo = std::exp(lo), hi = std::exp(hi); break;
          case TransformKind::kLogit: lo = sigmoid(lo), hi = sigmoid(hi); break;
          default: break;
        }
        out.ci95_low[col + k] = lo;
        out.ci95_high[col + k] = hi;
      }
    }
    col += nx;
  }
  return out;
}

Matrix laplace_covariance(const LogDensityFn& f, const Vector& x, double h) {
  const Index d = x.size();
  Matrix hess(d, d);
  Vector probe = x, gp, gm;
  for (Index i = 0; i < d; ++i) {
    probe[i] = x[i] + h;
    f.eval(probe, &gp);
    probe[i] = x[i] - h;
    f.eval(probe, &gm);
    probe[i] = x[i];
    if (!gp.allFinite() || !gm.allFinite()) throw NonFiniteValue("non-finite gradient in Hessian probe");
    hess.col(i) = (gp - gm) / (2.0 * h);
  }
  Matrix neg = -0.5 * (hess + hess.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(neg);
  Vector inv = eig.eigenvalues().unaryExpr([](double v) { return 1.0 / std::max(v, 1e-12); });
  Matrix cov = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (cov + cov.transpose());
}

}  // namespace rpm

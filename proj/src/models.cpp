#include "rpm/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rpm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

ParamBlock make_block(std::string name, Constraint c, Index rows, Index cols, Vector values) {
  ParamBlock b;
  b.name = std::move(name);
  b.constraint = c;
  b.rows = rows;
  b.cols = cols;
  b.values = std::move(values);
  return b;
}

// ---------------------------------------------------------------------------

class PoissonRateModel final : public Model {
 public:
  PoissonRateModel(PoissonRateSpec spec, const Dataset& data) : spec_(spec), data_(data) {
    data_.require_counts();
    ModelParameters p;
    p.add(make_block("theta", Constraint::kPositive, 1, 1, Vector::Constant(1, 1.0)));
    set_layout(p);
    lgamma_y_ = data_.responses().unaryExpr([](double y) { return std::lgamma(y + 1.0); });
  }

  ModelParameters initial_params() const override {
    ModelParameters p;
    // prior mean a / b
    p.add(make_block("theta", Constraint::kPositive, 1, 1,
                     Vector::Constant(1, spec_.gamma_a / spec_.gamma_b)));
    return p;
  }

  Index n_terms() const override { return data_.n_obs(); }

  double weighted_loglik(const Vector& x, const Vector& c, Vector* terms, Vector* grad) const override {
    const double theta = x[0];
    if (!(theta > 0.0)) throw DomainError("Poisson rate must be positive");
    const Vector& y = data_.responses();
    const double log_theta = std::log(theta);
    if (terms) terms->resize(y.size());
    double total = 0.0, dtheta = 0.0;
    for (Index n = 0; n < y.size(); ++n) {
      double ll = y[n] * log_theta - theta - lgamma_y_[n];
      if (terms) (*terms)[n] = ll;
      total += c[n] * ll;
      dtheta += c[n] * (y[n] / theta - 1.0);
    }
    if (grad) (*grad)[0] += dtheta;
    return total;
  }

  double log_prior(const Vector& x, Vector* grad) const override {
    const double theta = x[0];
    if (!(theta > 0.0)) throw SupportError("Poisson rate must be positive");
    if (grad) (*grad)[0] += (spec_.gamma_a - 1.0) / theta - spec_.gamma_b;
    return log_gamma_pdf(theta, spec_.gamma_a, spec_.gamma_b);
  }

 private:
  PoissonRateSpec spec_;
  Dataset data_;
  Vector lgamma_y_;
};

// ---------------------------------------------------------------------------

class LogisticModel final : public Model {
 public:
  LogisticModel(LogisticRegressionSpec spec, const Dataset& data) : spec_(spec), data_(data) {
    data_.require_binary();
    if (!data_.has_covariates()) throw ShapeError("logistic regression needs covariates");
    n_coef_ = data_.n_covariates() + (spec_.with_intercept ? 1 : 0);
    set_layout(initial_params());
  }

  ModelParameters initial_params() const override {
    ModelParameters p;
    p.add(make_block("beta", Constraint::kUnconstrained, 1, n_coef_, Vector::Zero(n_coef_)));
    return p;
  }

  Index n_terms() const override { return data_.n_obs(); }

  double weighted_loglik(const Vector& x, const Vector& c, Vector* terms, Vector* grad) const override {
    const Matrix& cov = data_.covariates();
    const Vector& y = data_.responses();
    const Index off = spec_.with_intercept ? 1 : 0;
    Vector eta = cov * x.tail(cov.cols());
    if (spec_.with_intercept) eta.array() += x[0];
    if (terms) terms->resize(y.size());
    double total = 0.0;
    Vector resid(y.size());
    for (Index n = 0; n < y.size(); ++n) {
      double ll = y[n] * eta[n] - softplus(eta[n]);
      if (terms) (*terms)[n] = ll;
      total += c[n] * ll;
      resid[n] = c[n] * (y[n] - sigmoid(eta[n]));
    }
    if (grad) {
      grad->segment(off, cov.cols()) += cov.transpose() * resid;
      if (spec_.with_intercept) (*grad)[0] += resid.sum();
    }
    return total;
  }

  double log_prior(const Vector& x, Vector* grad) const override {
    const double var = spec_.prior_sd * spec_.prior_sd;
    if (grad) *grad -= x / var;
    double lp = 0.0;
    for (Index j = 0; j < x.size(); ++j) lp += log_normal_pdf(x[j], 0.0, spec_.prior_sd);
    return lp;
  }

 private:
  LogisticRegressionSpec spec_;
  Dataset data_;
  Index n_coef_;
};

// ---------------------------------------------------------------------------

class LinearModel final : public Model {
 public:
  LinearModel(LinearRegressionSpec spec, const Dataset& data) : spec_(std::move(spec)) {
    if (!data.has_covariates()) throw ShapeError("linear regression needs covariates");
    const Matrix& cov = data.covariates();
    std::vector<Index> cols = spec_.design;
    if (cols.empty())
      for (Index j = 0; j < cov.cols(); ++j) cols.push_back(j);
    design_.resize(cov.rows(), static_cast<Index>(cols.size()) + 1);
    design_.col(0).setOnes();
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (cols[j] < 0 || cols[j] >= cov.cols())
        throw ShapeError("design column " + std::to_string(cols[j]) + " does not exist");
      design_.col(static_cast<Index>(j) + 1) = cov.col(cols[j]);
    }
    y_ = data.responses();
    set_layout(initial_params());
  }

  ModelParameters initial_params() const override {
    ModelParameters p;
    p.add(make_block("beta", Constraint::kUnconstrained, 1, design_.cols(), Vector::Zero(design_.cols())));
    p.add(make_block("sigma_sq", Constraint::kPositive, 1, 1, Vector::Constant(1, 1.0)));
    return p;
  }

  Index n_terms() const override { return y_.size(); }

  double weighted_loglik(const Vector& x, const Vector& c, Vector* terms, Vector* grad) const override {
    const Index p = design_.cols();
    const double s2 = x[p];
    if (!(s2 > 0.0)) throw DomainError("noise variance must be positive");
    Vector r = y_ - design_ * x.head(p);
    const double log_norm = -0.5 * (kLog2Pi + std::log(s2));
    if (terms) *terms = (log_norm - 0.5 * r.array().square() / s2).matrix();
    double total = 0.0, weighted_sq = 0.0;
    for (Index n = 0; n < r.size(); ++n) {
      total += c[n] * (log_norm - 0.5 * r[n] * r[n] / s2);
      weighted_sq += c[n] * r[n] * r[n];
    }
    if (grad) {
      grad->head(p) += design_.transpose() * (c.cwiseProduct(r)) / s2;
      (*grad)[p] += -0.5 * c.sum() / s2 + 0.5 * weighted_sq / (s2 * s2);
    }
    return total;
  }

  double log_prior(const Vector& x, Vector* grad) const override {
    const Index p = design_.cols();
    const double s2 = x[p];
    if (!(s2 > 0.0)) throw SupportError("noise variance must be positive");
    double lp = 0.0;
    for (Index j = 0; j < p; ++j) lp += log_normal_pdf(x[j], 0.0, spec_.prior_sd);
    lp += log_gamma_pdf(s2, spec_.noise_a, spec_.noise_b);
    if (grad) {
      grad->head(p) -= x.head(p) / (spec_.prior_sd * spec_.prior_sd);
      (*grad)[p] += (spec_.noise_a - 1.0) / s2 - spec_.noise_b;
    }
    return lp;
  }

 private:
  LinearRegressionSpec spec_;
  Matrix design_;
  Vector y_;
};

// ---------------------------------------------------------------------------

class GmmModel final : public Model {
 public:
  GmmModel(FiniteGmmSpec spec, const Dataset& data) : spec_(spec) {
    if (!data.has_covariates()) throw ShapeError("mixture model reads observations from covariates");
    if (spec_.components < 1) throw ShapeError("mixture needs at least one component");
    obs_ = data.covariates();
    k_ = spec_.components;
    d_ = obs_.cols();
    Vector mean = obs_.colwise().mean();
    spread_ = ((obs_.rowwise() - mean.transpose()).array().square().colwise().sum() /
               std::max<double>(1.0, static_cast<double>(obs_.rows() - 1)))
                  .sqrt()
                  .matrix()
                  .transpose();
    set_layout(initial_params());
  }

  ModelParameters initial_params() const override {
    Vector mu(k_ * d_), sigma(k_ * d_);
    const Index n = obs_.rows();
    for (Index k = 0; k < k_; ++k) {
      Index row = std::min(n - 1, (k * n) / k_);
      for (Index d = 0; d < d_; ++d) {
        mu[k * d_ + d] = obs_(row, d);
        sigma[k * d_ + d] = spread_[d];
      }
    }
    return make_params(mu, sigma, Vector::Constant(k_, 1.0 / static_cast<double>(k_)));
  }

  Vector random_start(Rng& rng) const override {
    Vector mu(k_ * d_), sigma(k_ * d_);
    for (Index k = 0; k < k_; ++k) {
      Index row = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(obs_.rows())));
      for (Index d = 0; d < d_; ++d) {
        mu[k * d_ + d] = obs_(row, d);
        sigma[k * d_ + d] = spread_[d];
      }
    }
    Vector pi(k_);
    for (Index k = 0; k < k_; ++k) pi[k] = rng.gamma(1.0, 1.0) + 1e-3;
    pi /= pi.sum();
    return flatten(make_params(mu, sigma, pi));
  }

  Index n_terms() const override { return obs_.rows(); }

  double weighted_loglik(const Vector& x, const Vector& c, Vector* terms, Vector* grad) const override {
    const Index kd = k_ * d_;
    const double* mu = x.data();
    const double* sigma = x.data() + kd;
    const double* pi = x.data() + 2 * kd;
    std::vector<double> inv_var(kd), comp_const(k_);
    for (Index k = 0; k < k_; ++k) {
      if (!(pi[k] > 0.0)) throw DomainError("mixture weight must be positive");
      double cst = std::log(pi[k]);
      for (Index d = 0; d < d_; ++d) {
        double s = sigma[k * d_ + d];
        if (!(s > 0.0)) throw DomainError("component scale must be positive");
        inv_var[k * d_ + d] = 1.0 / (s * s);
        cst -= std::log(s) + 0.5 * kLog2Pi;
      }
      comp_const[k] = cst;
    }
    if (terms) terms->resize(obs_.rows());
    std::vector<double> lp(k_);
    double total = 0.0;
    for (Index n = 0; n < obs_.rows(); ++n) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < k_; ++k) {
        double q = 0.0;
        for (Index d = 0; d < d_; ++d) {
          double diff = obs_(n, d) - mu[k * d_ + d];
          q += diff * diff * inv_var[k * d_ + d];
        }
        lp[k] = comp_const[k] - 0.5 * q;
        m = std::max(m, lp[k]);
      }
      double s = 0.0;
      for (Index k = 0; k < k_; ++k) s += std::exp(lp[k] - m);
      double ll = m + std::log(s);
      if (terms) (*terms)[n] = ll;
      total += c[n] * ll;
      if (!grad) continue;
      for (Index k = 0; k < k_; ++k) {
        double r = c[n] * std::exp(lp[k] - ll);
        if (r == 0.0) continue;
        (*grad)[2 * kd + k] += r / pi[k];
        for (Index d = 0; d < d_; ++d) {
          Index j = k * d_ + d;
          double diff = obs_(n, d) - mu[j];
          (*grad)[j] += r * diff * inv_var[j];
          (*grad)[kd + j] += r * (diff * diff * inv_var[j] - 1.0) / sigma[j];
        }
      }
    }
    return total;
  }

  double log_prior(const Vector& x, Vector* grad) const override {
    const Index kd = k_ * d_;
    const double mean_var = spec_.mean_prior_sd * spec_.mean_prior_sd;
    const double scale_var = spec_.scale_prior_sd * spec_.scale_prior_sd;
    const double alpha = spec_.mix_concentration;
    double lp = 0.0;
    for (Index j = 0; j < kd; ++j) {
      lp += log_normal_pdf(x[j], 0.0, spec_.mean_prior_sd);
      double s = x[kd + j];
      if (!(s > 0.0)) throw SupportError("component scale must be positive");
      double ls = std::log(s);
      lp += log_normal_pdf(ls, 0.0, spec_.scale_prior_sd) - ls;
      if (grad) {
        (*grad)[j] -= x[j] / mean_var;
        (*grad)[kd + j] += (-1.0 - ls / scale_var) / s;
      }
    }
    lp += std::lgamma(alpha * static_cast<double>(k_)) - static_cast<double>(k_) * std::lgamma(alpha);
    for (Index k = 0; k < k_; ++k) {
      double p = x[2 * kd + k];
      if (!(p > 0.0)) throw SupportError("mixture weight must be positive");
      lp += (alpha - 1.0) * std::log(p);
      if (grad) (*grad)[2 * kd + k] += (alpha - 1.0) / p;
    }
    return lp;
  }

  bool has_mm_step() const override { return true; }

  // Weighted ECM sweep: responsibilities, then means, scales and mixture
  // weights, each maximized given the others under the priors.
  void mm_step(Vector& x, const Vector& c) const override {
    const Index kd = k_ * d_, n_obs = obs_.rows();
    double* mu = x.data();
    double* sigma = x.data() + kd;
    double* pi = x.data() + 2 * kd;
    Matrix resp(n_obs, k_);
    std::vector<double> lp(k_);
    for (Index n = 0; n < n_obs; ++n) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < k_; ++k) {
        double v = std::log(pi[k]);
        for (Index d = 0; d < d_; ++d) {
          double s = sigma[k * d_ + d], z = (obs_(n, d) - mu[k * d_ + d]) / s;
          v -= std::log(s) + 0.5 * z * z;
        }
        lp[k] = v;
        m = std::max(m, v);
      }
      double tot = 0.0;
      for (Index k = 0; k < k_; ++k) tot += std::exp(lp[k] - m);
      for (Index k = 0; k < k_; ++k) resp(n, k) = c[n] * std::exp(lp[k] - m) / tot;
    }
    const double mean_prec = 1.0 / (spec_.mean_prior_sd * spec_.mean_prior_sd);
    const double scale_prec = 1.0 / (spec_.scale_prior_sd * spec_.scale_prior_sd);
    Vector mass = resp.colwise().sum().transpose();
    for (Index k = 0; k < k_; ++k) {
      for (Index d = 0; d < d_; ++d) {
        const Index j = k * d_ + d;
        const double var = sigma[j] * sigma[j];
        mu[j] = resp.col(k).dot(obs_.col(d)) / (mass[k] + var * mean_prec);
        const double ss = resp.col(k).dot((obs_.col(d).array() - mu[j]).square().matrix());
        // log-scale t maximizes -(mass + 1) t - ss e^{-2t} / 2 - t^2 prec / 2 (concave)
        double t = std::log(sigma[j]);
        for (int it = 0; it < 50; ++it) {
          double e = ss * std::exp(-2.0 * t);
          double g = -(mass[k] + 1.0) + e - scale_prec * t;
          double h = -2.0 * e - scale_prec;
          double step = g / h;
          t -= std::clamp(step, -2.0, 2.0);
          if (std::abs(step) < 1e-12) break;
        }
        sigma[j] = std::max(std::exp(t), kScaleFloor * spread_[d]);
      }
    }
    const double a1 = spec_.mix_concentration - 1.0;
    double total = 0.0;
    for (Index k = 0; k < k_; ++k) total += std::max(mass[k] + a1, 0.0);
    for (Index k = 0; k < k_; ++k) pi[k] = std::max(std::max(mass[k] + a1, 0.0) / total, kMixFloor);
    double z = 0.0;
    for (Index k = 0; k < k_; ++k) z += pi[k];
    for (Index k = 0; k < k_; ++k) pi[k] /= z;
  }

 private:
  static constexpr double kScaleFloor = 1e-6;
  static constexpr double kMixFloor = 1e-300;

  ModelParameters make_params(const Vector& mu, const Vector& sigma, const Vector& pi) const {
    ModelParameters p;
    p.add(make_block("mu", Constraint::kUnconstrained, k_, d_, mu));
    p.add(make_block("sigma", Constraint::kPositive, k_, d_, sigma));
    p.add(make_block("pi", Constraint::kSimplex, 1, k_, pi));
    return p;
  }

  FiniteGmmSpec spec_;
  Matrix obs_;
  Vector spread_;
  Index k_ = 0;
  Index d_ = 0;
};

// ---------------------------------------------------------------------------

class PoissonFactorizationModel final : public Model {
 public:
  PoissonFactorizationModel(PoissonFactorizationSpec spec, const PFDataset& data)
      : spec_(spec), data_(data) {
    if (spec_.latent_dim < 1) throw ShapeError("latent dimension must be positive");
    k_ = spec_.latent_dim;
    lgamma_const_.assign(static_cast<std::size_t>(data_.n_users()), 0.0);
    for (const auto& e : data_.entries())
      lgamma_const_[static_cast<std::size_t>(e.user)] += std::lgamma(e.count + 1.0);
    set_layout(initial_params());
  }

  ModelParameters initial_params() const override {
    // symmetric starts are fixed points of the updates, so jitter deterministically
    Rng rng(0x5eedULL, 0);
    return jittered(rng);
  }

  Vector random_start(Rng& rng) const override { return flatten(jittered(rng)); }

  Index n_terms() const override { return data_.n_users(); }

  double weighted_loglik(const Vector& x, const Vector& c, Vector* terms, Vector* grad) const override {
    const Index U = data_.n_users(), I = data_.n_items();
    const double* theta = x.data();
    const double* beta = x.data() + U * k_;
    std::vector<double> beta_sum(static_cast<std::size_t>(k_), 0.0);
    for (Index i = 0; i < I; ++i)
      for (Index k = 0; k < k_; ++k) beta_sum[k] += beta[i * k_ + k];
    if (terms) terms->resize(U);
    double total = 0.0;
    for (Index u = 0; u < U; ++u) {
      const double* th = theta + u * k_;
      double ll = -lgamma_const_[static_cast<std::size_t>(u)];
      for (Index k = 0; k < k_; ++k) ll -= th[k] * beta_sum[k];
      for (const auto& e : data_.row(u)) {
        const double* bi = beta + e.item * k_;
        double rate = 0.0;
        for (Index k = 0; k < k_; ++k) rate += th[k] * bi[k];
        if (!(rate > 0.0)) throw DomainError("Poisson rate must be positive");
        ll += e.count * std::log(rate);
        if (grad) {
          double scale = c[u] * e.count / rate;
          for (Index k = 0; k < k_; ++k) {
            (*grad)[u * k_ + k] += scale * bi[k];
            (*grad)[U * k_ + e.item * k_ + k] += scale * th[k];
          }
        }
      }
      if (terms) (*terms)[u] = ll;
      total += c[u] * ll;
      if (grad) {
        for (Index k = 0; k < k_; ++k) (*grad)[u * k_ + k] -= c[u] * beta_sum[k];
      }
    }
    if (grad) {
      std::vector<double> theta_wsum(static_cast<std::size_t>(k_), 0.0);
      for (Index u = 0; u < U; ++u)
        for (Index k = 0; k < k_; ++k) theta_wsum[k] += c[u] * theta[u * k_ + k];
      for (Index i = 0; i < I; ++i)
        for (Index k = 0; k < k_; ++k) (*grad)[U * k_ + i * k_ + k] -= theta_wsum[k];
    }
    return total;
  }

  double log_prior(const Vector& x, Vector* grad) const override {
    const double a = spec_.gamma_shape, b = spec_.gamma_rate;
    double lp = 0.0;
    for (Index j = 0; j < x.size(); ++j) {
      if (!(x[j] > 0.0)) throw SupportError("factor values must be positive");
      lp += log_gamma_pdf(x[j], a, b);
      if (grad) (*grad)[j] += (a - 1.0) / x[j] - b;
    }
    return lp;
  }

  bool has_mm_step() const override { return true; }

  // One sweep of multiplicative updates: user factors, then item factors.
  void mm_step(Vector& x, const Vector& c) const override {
    const Index U = data_.n_users(), I = data_.n_items();
    const double a1 = std::max(spec_.gamma_shape - 1.0, 0.0), b = spec_.gamma_rate;
    double* theta = x.data();
    double* beta = x.data() + U * k_;
    std::vector<double> beta_sum(static_cast<std::size_t>(k_), 0.0);
    for (Index i = 0; i < I; ++i)
      for (Index k = 0; k < k_; ++k) beta_sum[k] += beta[i * k_ + k];
    std::vector<double> acc(static_cast<std::size_t>(k_));
    for (Index u = 0; u < U; ++u) {
      double* th = theta + u * k_;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& e : data_.row(u)) {
        const double* bi = beta + e.item * k_;
        double rate = 0.0;
        for (Index k = 0; k < k_; ++k) rate += th[k] * bi[k];
        for (Index k = 0; k < k_; ++k) acc[k] += e.count * th[k] * bi[k] / rate;
      }
      for (Index k = 0; k < k_; ++k)
        th[k] = std::max((a1 + c[u] * acc[k]) / (b + c[u] * beta_sum[k]), kFloor);
    }
    std::vector<double> theta_wsum(static_cast<std::size_t>(k_), 0.0);
    for (Index u = 0; u < U; ++u)
      for (Index k = 0; k < k_; ++k) theta_wsum[k] += c[u] * theta[u * k_ + k];
    std::vector<double> item_acc(static_cast<std::size_t>(I * k_), 0.0);
    for (Index u = 0; u < U; ++u) {
      const double* th = theta + u * k_;
      for (const auto& e : data_.row(u)) {
        const double* bi = beta + e.item * k_;
        double rate = 0.0;
        for (Index k = 0; k < k_; ++k) rate += th[k] * bi[k];
        for (Index k = 0; k < k_; ++k)
          item_acc[static_cast<std::size_t>(e.item * k_ + k)] += c[u] * e.count * th[k] * bi[k] / rate;
      }
    }
    for (Index i = 0; i < I; ++i)
      for (Index k = 0; k < k_; ++k)
        beta[i * k_ + k] = std::max(
            (a1 + item_acc[static_cast<std::size_t>(i * k_ + k)]) / (b + theta_wsum[k]), kFloor);
  }

 private:
  static constexpr double kFloor = 1e-30;

  ModelParameters jittered(Rng& rng) const {
    const Index U = data_.n_users(), I = data_.n_items();
    double density = static_cast<double>(data_.entries().size()) /
                     std::max(1.0, static_cast<double>(U) * static_cast<double>(I));
    double base = std::sqrt(std::max(density, 1e-6) / static_cast<double>(k_));
    Vector theta(U * k_), beta(I * k_);
    for (Index j = 0; j < theta.size(); ++j) theta[j] = base * (0.5 + rng.uniform());
    for (Index j = 0; j < beta.size(); ++j) beta[j] = base * (0.5 + rng.uniform());
    ModelParameters p;
    p.add(make_block("theta", Constraint::kPositive, U, k_, theta));
    p.add(make_block("beta", Constraint::kPositive, I, k_, beta));
    return p;
  }

  PoissonFactorizationSpec spec_;
  PFDataset data_;
  Index k_ = 0;
  std::vector<double> lgamma_const_;
};

}  // namespace

// ---------------------------------------------------------------------------

PFDataset::PFDataset(Index n_users, Index n_items, std::vector<PFEntry> entries)
    : n_users_(n_users), n_items_(n_items), entries_(std::move(entries)) {
  std::sort(entries_.begin(), entries_.end(), [](const PFEntry& a, const PFEntry& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
  });
  for (std::size_t j = 0; j < entries_.size(); ++j) {
    const auto& e = entries_[j];
    if (e.user < 0 || e.user >= n_users_ || e.item < 0 || e.item >= n_items_)
      throw ShapeError("factorization entry index out of range");
    if (!(e.count >= 0.0) || std::floor(e.count) != e.count)
      throw DomainError("factorization counts must be nonnegative integers");
    if (j > 0 && entries_[j - 1].user == e.user && entries_[j - 1].item == e.item)
      throw ShapeError("duplicate (user, item) pair");
  }
  row_start_.assign(static_cast<std::size_t>(n_users_) + 1, 0);
  for (const auto& e : entries_) ++row_start_[static_cast<std::size_t>(e.user) + 1];
  for (std::size_t u = 1; u < row_start_.size(); ++u) row_start_[u] += row_start_[u - 1];
}

std::span<const PFEntry> PFDataset::row(Index user) const {
  auto u = static_cast<std::size_t>(user);
  return {entries_.data() + row_start_[u], row_start_[u + 1] - row_start_[u]};
}

bool PFDataset::has(Index user, Index item) const {
  auto r = row(user);
  return std::binary_search(r.begin(), r.end(), PFEntry{user, item, 0.0},
                            [](const PFEntry& a, const PFEntry& b) { return a.item < b.item; });
}

const Dataset& DataView::dense() const {
  if (auto p = std::get_if<const Dataset*>(&data_)) return **p;
  throw ShapeError("model expects a dense dataset");
}

const PFDataset& DataView::sparse() const {
  if (auto p = std::get_if<const PFDataset*>(&data_)) return **p;
  throw ShapeError("model expects a sparse count matrix");
}

Vector Model::random_start(Rng&) const { return flatten(initial_params()); }

Vector Model::flatten(const ModelParameters& params) const {
  Vector x(layout_.constrained_size());
  Index off = 0;
  for (const auto& b : layout_.schema().blocks()) {
    const auto& v = params.values(b.name);
    if (v.size() != b.size()) throw ShapeError("block '" + b.name + "' has wrong size");
    x.segment(off, v.size()) = v;
    off += v.size();
  }
  return x;
}

ModelParameters Model::unflatten(const Vector& x) const {
  if (x.size() != layout_.constrained_size()) throw ShapeError("flat parameter vector has wrong length");
  ModelParameters out;
  Index off = 0;
  for (const auto& b : layout_.schema().blocks()) {
    ParamBlock nb = b;
    nb.values = x.segment(off, b.size());
    off += b.size();
    out.add(std::move(nb));
  }
  return out;
}

Vector Model::loglik_terms(const Vector& x) const {
  Vector terms;
  weighted_loglik(x, Vector::Ones(n_terms()), &terms, nullptr);
  return terms;
}

std::unique_ptr<Model> make_model(const ModelSpec& spec, DataView data) {
  return std::visit(
      [&](const auto& s) -> std::unique_ptr<Model> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, PoissonRateSpec>)
          return std::make_unique<PoissonRateModel>(s, data.dense());
        else if constexpr (std::is_same_v<T, LogisticRegressionSpec>)
          return std::make_unique<LogisticModel>(s, data.dense());
        else if constexpr (std::is_same_v<T, LinearRegressionSpec>)
          return std::make_unique<LinearModel>(s, data.dense());
        else if constexpr (std::is_same_v<T, FiniteGmmSpec>)
          return std::make_unique<GmmModel>(s, data.dense());
        else
          return std::make_unique<PoissonFactorizationModel>(s, data.sparse());
      },
      spec);
}

Vector loglik_terms(const ModelSpec& spec, const ModelParameters& params, DataView data) {
  auto model = make_model(spec, data);
  return model->loglik_terms(model->flatten(params));
}

double log_prior(const ModelSpec& spec, const ModelParameters& params, DataView data) {
  auto model = make_model(spec, data);
  return model->log_prior(model->flatten(params), nullptr);
}

double log_joint_rpm(const ModelSpec& spec, const WeightPriorSpec& prior_w,
                     const ModelParameters& params, const WeightVector& w, DataView data) {
  auto model = make_model(spec, data);
  if (w.size() != model->n_terms()) throw ShapeError("weight count differs from likelihood terms");
  Vector x = model->flatten(params);
  return model->log_prior(x, nullptr) + log_density(prior_w, w) +
         model->weighted_loglik(x, w.values(), nullptr, nullptr);
}

// ---------------------------------------------------------------------------

RpmObjective::RpmObjective(std::shared_ptr<const Model> model, WeightPriorSpec prior_w,
                           JacobianMode mode)
    : model_(std::move(model)), prior_w_(prior_w), mode_(mode) {
  n_weight_coords_ = model_->n_terms() - (prior_w_.is_dirichlet() ? 1 : 0);
  if (prior_w_.is_dirichlet() && model_->n_terms() < 2)
    throw ShapeError("scaled-Dirichlet weights need at least two terms");
}

Vector RpmObjective::weights_from(const Vector& zw) const {
  const Index n = model_->n_terms();
  if (zw.size() != n_weight_coords_) throw ShapeError("weight coordinates have wrong length");
  if (prior_w_.is_beta()) {
    Vector w(n);
    for (Index i = 0; i < n; ++i)
      w[i] = std::clamp(sigmoid(zw[i]), std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
    return w;
  }
  if (prior_w_.is_gamma()) return zw.array().exp().max(std::numeric_limits<double>::min()).matrix();
  auto [v, lj] = from_unconstrained_with_logjac({TransformKind::kSimplex, n}, zw);
  (void)lj;
  return static_cast<double>(n) * v;
}

Vector RpmObjective::weights_to_unconstrained(const Vector& w) const {
  const Index n = model_->n_terms();
  if (w.size() != n) throw ShapeError("weight vector has wrong length");
  if (prior_w_.is_beta()) return to_unconstrained({TransformKind::kLogit, n}, w);
  if (prior_w_.is_gamma()) return to_unconstrained({TransformKind::kLogPositive, n}, w);
  return to_unconstrained({TransformKind::kSimplex, n}, w / static_cast<double>(n));
}

Vector RpmObjective::pack(const ModelParameters& params, const Vector& w) const {
  Vector z(dimension());
  z.head(n_params()) = model_->layout().to_unconstrained(params);
  z.tail(n_weight_coords_) = weights_to_unconstrained(w);
  return z;
}

Vector RpmObjective::initial_point() const {
  return pack(model_->initial_params(), Vector::Constant(model_->n_terms(), prior_w_.initial_weight()));
}

ModelParameters RpmObjective::params_from(const Vector& z) const {
  return model_->layout().from_unconstrained(z.head(n_params()));
}

double RpmObjective::eval(const Vector& z, Vector* grad) const {
  if (z.size() != dimension()) throw ShapeError("objective input has wrong length");
  const Index p = n_params();
  const Index n = model_->n_terms();
  const bool with_jac = mode_ == JacobianMode::kInclude;
  const Vector zp = z.head(p);
  const Vector zw = z.tail(n_weight_coords_);

  double lj_params = 0.0;
  Vector x = model_->layout().constrained_values(zp, &lj_params);
  Vector w = weights_from(zw);

  Vector terms;
  Vector gx;
  if (grad) gx = Vector::Zero(x.size());
  double value = model_->weighted_loglik(x, w, &terms, grad ? &gx : nullptr);
  value += model_->log_prior(x, grad ? &gx : nullptr);
  value += log_density(prior_w_, w);

  double lj_weights = 0.0;
  if (prior_w_.is_beta()) {
    for (Index i = 0; i < n; ++i) lj_weights += log_sigmoid(zw[i]) + log_sigmoid(-zw[i]);
  } else if (prior_w_.is_gamma()) {
    lj_weights = zw.sum();
  } else {
    lj_weights = w.array().log().sum() - static_cast<double>(n) * std::log(static_cast<double>(n)) +
                 static_cast<double>(n - 1) * std::log(static_cast<double>(n));
  }
  if (with_jac) value += lj_params + lj_weights;
  if (!std::isfinite(value)) throw NonFiniteValue("reweighted joint is not finite");

  if (grad) {
    grad->resize(dimension());
    grad->head(p) = model_->layout().pullback(zp, gx, with_jac);
    Vector gw = grad_log_density(prior_w_, w);
    if (prior_w_.is_beta()) {
      for (Index i = 0; i < n; ++i) {
        // the clipped prior is flat outside its clip range
        if (w[i] <= kBetaWeightClip || w[i] >= 1.0 - kBetaWeightClip) gw[i] = 0.0;
        double dw = std::exp(log_sigmoid(zw[i]) + log_sigmoid(-zw[i]));
        (*grad)[p + i] = (gw[i] + terms[i]) * dw + (with_jac ? 1.0 - 2.0 * w[i] : 0.0);
      }
    } else if (prior_w_.is_gamma()) {
      grad->tail(n) = (gw + terms).cwiseProduct(w);
      if (with_jac) grad->tail(n).array() += 1.0;
    } else {
      Vector v = w / static_cast<double>(n);
      Vector gv = static_cast<double>(n) * (gw + terms);
      grad->tail(n - 1) = pullback_gradient({TransformKind::kSimplex, n}, v, gv, with_jac);
    }
    for (Index i = 0; i < grad->size(); ++i)
      if (!std::isfinite((*grad)[i])) throw NonFiniteValue("reweighted joint gradient is not finite");
  }
  return value;
}

LogDensityFn RpmObjective::as_log_density() const {
  auto self = std::make_shared<RpmObjective>(*this);
  return {dimension(), [self](const Vector& z, Vector* g) { return self->eval(z, g); }};
}

std::pair<double, Vector> grad_log_joint_unconstrained(const ModelSpec& spec,
                                                       const WeightPriorSpec& prior_w,
                                                       const Vector& z_params,
                                                       const Vector& z_weights, DataView data) {
  std::shared_ptr<const Model> model = make_model(spec, data);
  RpmObjective obj(model, prior_w, JacobianMode::kInclude);
  Vector z(obj.dimension());
  if (z_params.size() != obj.n_params() || z_weights.size() != obj.n_weight_coords())
    throw ShapeError("unconstrained inputs have wrong length");
  z << z_params, z_weights;
  Vector g;
  double v = obj.eval(z, &g);
  return {v, g};
}

// ---------------------------------------------------------------------------

ModelObjective::ModelObjective(std::shared_ptr<const Model> model, JacobianMode mode,
                               Vector term_weights)
    : model_(std::move(model)), mode_(mode), term_weights_(std::move(term_weights)) {
  if (term_weights_.size() == 0) term_weights_ = Vector::Ones(model_->n_terms());
  if (term_weights_.size() != model_->n_terms()) throw ShapeError("term weights have wrong length");
}

double ModelObjective::eval(const Vector& z, Vector* grad) const {
  double lj = 0.0;
  Vector x = model_->layout().constrained_values(z, &lj);
  Vector gx;
  if (grad) gx = Vector::Zero(x.size());
  double value = model_->weighted_loglik(x, term_weights_, nullptr, grad ? &gx : nullptr) +
                 model_->log_prior(x, grad ? &gx : nullptr);
  if (mode_ == JacobianMode::kInclude) value += lj;
  if (!std::isfinite(value)) throw NonFiniteValue("log joint is not finite");
  if (grad) {
    *grad = model_->layout().pullback(z, gx, mode_ == JacobianMode::kInclude);
    for (Index i = 0; i < grad->size(); ++i)
      if (!std::isfinite((*grad)[i])) throw NonFiniteValue("log joint gradient is not finite");
  }
  return value;
}

LogDensityFn ModelObjective::as_log_density() const {
  auto self = std::make_shared<ModelObjective>(*this);
  return {model_->layout().unconstrained_size(), [self](const Vector& z, Vector* g) { return self->eval(z, g); }};
}

}  // namespace rpm

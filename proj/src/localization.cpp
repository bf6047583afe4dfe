#include "rpm/localization.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <cmath>

namespace rpm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

ParamBlock block(std::string name, Constraint c, Index cols, Vector values) {
  ParamBlock b;
  b.name = std::move(name);
  b.constraint = c;
  b.rows = 1;
  b.cols = cols;
  b.values = std::move(values);
  return b;
}

// log N(b | c, v) with partials in b, c and v
struct NormalTerm {
  double value, d_b, d_c, d_v;
};

NormalTerm normal_term(double b, double c, double v) {
  double r = b - c;
  return {-0.5 * (kLog2Pi + std::log(v)) - 0.5 * r * r / v, -r / v, r / v,
          -0.5 / v + 0.5 * r * r / (v * v)};
}

double log_lognormal(double v, double sd, double* d_v) {
  double lv = std::log(v);
  if (d_v) *d_v = -1.0 / v - lv / (sd * sd * v);
  return -lv - 0.5 * kLog2Pi - std::log(sd) - 0.5 * lv * lv / (sd * sd);
}

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw SupportError(std::string(what) + " must be positive");
}

}  // namespace

LocalizedModel::LocalizedModel(LocalizedSpec spec, const Dataset& data, bool marginalize)
    : spec_(std::move(spec)), y_(data.responses()) {
  if (spec_.fixed_local_var && !(*spec_.fixed_local_var > 0.0))
    throw ConfigError("fixed local variance must be positive");
  if (std::holds_alternative<PoissonRateSpec>(spec_.base)) {
    data.require_counts();
    family_ = Family::kPoisson;
    n_coef_ = 1;
    lgamma_y_ = y_.unaryExpr([](double y) { return std::lgamma(y + 1.0); });
  } else if (const auto* l = std::get_if<LogisticRegressionSpec>(&spec_.base)) {
    data.require_binary();
    family_ = Family::kLogistic;
    logistic_intercept_ = l->with_intercept;
    const Matrix& cov = data.covariates();
    design_.resize(cov.rows(), cov.cols() + (logistic_intercept_ ? 1 : 0));
    if (logistic_intercept_) design_.col(0).setOnes();
    design_.rightCols(cov.cols()) = cov;
    n_coef_ = design_.cols();
  } else if (const auto* r = std::get_if<LinearRegressionSpec>(&spec_.base)) {
    family_ = Family::kLinear;
    const Matrix& cov = data.covariates();
    linear_columns_ = r->design;
    if (linear_columns_.empty())
      for (Index j = 0; j < cov.cols(); ++j) linear_columns_.push_back(j);
    for (Index c : linear_columns_)
      if (c < 0 || c >= cov.cols()) throw ShapeError("design column " + std::to_string(c) + " does not exist");
    design_.resize(cov.rows(), static_cast<Index>(linear_columns_.size()) + 1);
    for (Index n = 0; n < cov.rows(); ++n) design_.row(n) = design_row(data, n).transpose();
    n_coef_ = design_.cols();
  } else {
    throw UnsupportedFamily("localization is defined for Poisson, logistic and linear models");
  }
  marginal_ = marginalize && family_ == Family::kLinear;
  top_layout_ = ParameterLayout(initial_top());
}

Vector LocalizedModel::design_row(const Dataset& data, Index n) const {
  const Matrix& cov = data.covariates();
  Vector d(n_coef_);
  if (family_ == Family::kLogistic) {
    if (cov.cols() != n_coef_ - (logistic_intercept_ ? 1 : 0)) throw ShapeError("covariate count mismatch");
    if (logistic_intercept_) d[0] = 1.0;
    d.tail(cov.cols()) = cov.row(n).transpose();
  } else {
    d.resize(static_cast<Index>(linear_columns_.size()) + 1);
    d[0] = 1.0;
    for (std::size_t j = 0; j < linear_columns_.size(); ++j) {
      if (linear_columns_[j] >= cov.cols()) throw ShapeError("covariate count mismatch");
      d[static_cast<Index>(j) + 1] = cov(n, linear_columns_[j]);
    }
  }
  return d;
}

ModelParameters LocalizedModel::initial_top() const {
  ModelParameters p;
  switch (family_) {
    case Family::kPoisson:
      p.add(block("theta", Constraint::kPositive, 1, Vector::Constant(1, y_.mean() + 0.5)));
      if (free_var()) p.add(block("local_var", Constraint::kPositive, 1, Vector::Constant(1, 1.0)));
      break;
    case Family::kLogistic:
      p.add(block("beta", Constraint::kUnconstrained, n_coef_, Vector::Zero(n_coef_)));
      if (free_var()) p.add(block("local_var", Constraint::kPositive, 1, Vector::Constant(1, 1.0)));
      break;
    case Family::kLinear: {
      Matrix gram = design_.transpose() * design_;
      gram.diagonal().array() += 1e-8;
      Vector beta = gram.ldlt().solve(design_.transpose() * y_);
      double resid = (y_ - design_ * beta).squaredNorm() / static_cast<double>(y_.size());
      p.add(block("beta", Constraint::kUnconstrained, n_coef_, beta));
      if (free_var()) p.add(block("local_var", Constraint::kPositive, n_coef_, Vector::Constant(n_coef_, 1.0)));
      p.add(block("sigma_sq", Constraint::kPositive, 1, Vector::Constant(1, std::max(resid, 1e-3))));
      break;
    }
  }
  return p;
}

double LocalizedModel::log_joint(const Vector& top, const Matrix& locals, Vector* gt, Matrix* gl) const {
  const Index n_obs = y_.size(), p = n_coef_;
  if (top.size() != top_layout_.constrained_size()) throw ShapeError("top-level vector has wrong length");
  if (!marginal_ && (locals.rows() != n_obs || locals.cols() != p)) throw ShapeError("locals must be N x n_coef");
  if (gt) *gt = Vector::Zero(top.size());
  if (gl) *gl = Matrix::Zero(marginal_ ? 0 : n_obs, marginal_ ? 0 : p);
  const double fixed = spec_.fixed_local_var.value_or(0.0);
  const double a = spec_.gamma_a, b = spec_.gamma_b, nu = spec_.scale_lognormal_sd;
  double lp = 0.0;

  switch (family_) {
    case Family::kPoisson: {
      const double theta = top[0];
      const double v = free_var() ? top[1] : fixed;
      require_positive(theta, "theta");
      require_positive(v, "local variance");
      lp += log_gamma_pdf(theta, a, b);
      if (gt) (*gt)[0] += (a - 1.0) / theta - b;
      if (free_var()) {
        double dv = 0.0;
        lp += log_lognormal(v, nu, &dv);
        if (gt) (*gt)[1] += dv;
      }
      // theta_n > 0 comes from the Poisson support, the local prior is not renormalized
      for (Index n = 0; n < n_obs; ++n) {
        const double t = locals(n, 0);
        require_positive(t, "local rate");
        NormalTerm nt = normal_term(t, theta, v);
        lp += nt.value + y_[n] * std::log(t) - t - lgamma_y_[n];
        if (gl) (*gl)(n, 0) = nt.d_b + y_[n] / t - 1.0;
        if (gt) {
          (*gt)[0] += nt.d_c;
          if (free_var()) (*gt)[1] += nt.d_v;
        }
      }
      break;
    }
    case Family::kLogistic: {
      const double tau = spec_.coef_prior_sd;
      const double v = free_var() ? top[p] : fixed;
      require_positive(v, "local variance");
      for (Index j = 0; j < p; ++j) {
        lp += log_normal_pdf(top[j], 0.0, tau);
        if (gt) (*gt)[j] -= top[j] / (tau * tau);
      }
      if (free_var()) {
        lp += log_gamma_pdf(v, a, b);
        if (gt) (*gt)[p] += (a - 1.0) / v - b;
      }
      for (Index n = 0; n < n_obs; ++n) {
        for (Index j = 0; j < p; ++j) {
          NormalTerm nt = normal_term(locals(n, j), top[j], v);
          lp += nt.value;
          if (gl) (*gl)(n, j) += nt.d_b;
          if (gt) {
            (*gt)[j] += nt.d_c;
            if (free_var()) (*gt)[p] += nt.d_v;
          }
        }
        const double eta = design_.row(n).dot(locals.row(n));
        lp += y_[n] * eta - softplus(eta);
        if (gl) gl->row(n) += (y_[n] - sigmoid(eta)) * design_.row(n);
      }
      break;
    }
    case Family::kLinear: {
      const double tau = spec_.coef_prior_sd;
      const Index s2_at = free_var() ? 2 * p : p;
      const double s2 = top[s2_at];
      require_positive(s2, "noise variance");
      Vector v = free_var() ? Vector(top.segment(p, p)) : Vector::Constant(p, fixed);
      for (Index j = 0; j < p; ++j) {
        require_positive(v[j], "local variance");
        lp += log_normal_pdf(top[j], 0.0, tau);
        if (gt) (*gt)[j] -= top[j] / (tau * tau);
        if (free_var()) {
          double dv = 0.0;
          lp += log_lognormal(v[j], nu, &dv);
          if (gt) (*gt)[p + j] += dv;
        }
      }
      lp += log_gamma_pdf(s2, a, b);
      if (gt) (*gt)[s2_at] += (a - 1.0) / s2 - b;
      const Vector beta = top.head(p);
      for (Index n = 0; n < n_obs; ++n) {
        if (marginal_) {
          const double var = s2 + design_.row(n).array().square().matrix().dot(v);
          const double r = y_[n] - design_.row(n).dot(beta);
          NormalTerm nt = normal_term(y_[n], y_[n] - r, var);
          lp += nt.value;
          if (gt) {
            gt->head(p) += nt.d_c * design_.row(n).transpose();
            (*gt)[s2_at] += nt.d_v;
            if (free_var()) gt->segment(p, p) += nt.d_v * design_.row(n).array().square().matrix().transpose();
          }
        } else {
          for (Index j = 0; j < p; ++j) {
            NormalTerm nt = normal_term(locals(n, j), beta[j], v[j]);
            lp += nt.value;
            if (gl) (*gl)(n, j) += nt.d_b;
            if (gt) {
              (*gt)[j] += nt.d_c;
              if (free_var()) (*gt)[p + j] += nt.d_v;
            }
          }
          const double mean = design_.row(n).dot(locals.row(n));
          NormalTerm nt = normal_term(y_[n], mean, s2);
          lp += nt.value;
          if (gl) gl->row(n) += nt.d_c * design_.row(n);
          if (gt) (*gt)[s2_at] += nt.d_v;
        }
      }
      break;
    }
  }
  return lp;
}

Vector LocalizedModel::top_from(const Vector& z) const {
  return top_layout_.constrained_values(z.head(top_layout_.unconstrained_size()));
}

Matrix LocalizedModel::locals_from(const Vector& z) const {
  if (marginal_) return Matrix(0, 0);
  const Index off = top_layout_.unconstrained_size();
  Matrix locals(n_obs(), n_coef_);
  for (Index n = 0; n < n_obs(); ++n)
    for (Index j = 0; j < n_coef_; ++j) {
      double v = z[off + n * n_coef_ + j];
      locals(n, j) = family_ == Family::kPoisson ? std::max(std::exp(v), 1e-300) : v;
    }
  return locals;
}

double LocalizedModel::eval(const Vector& z, Vector* grad, JacobianMode mode) const {
  if (z.size() != dimension()) throw ShapeError("localized point has wrong dimension");
  const bool with_jac = mode == JacobianMode::kInclude;
  const Index off = top_layout_.unconstrained_size();
  double lj = 0.0;
  Vector top = top_layout_.constrained_values(z.head(off), &lj);
  Matrix locals = locals_from(z);
  if (family_ == Family::kPoisson) lj += z.tail(n_local_coords()).sum();
  Vector gt;
  Matrix gl;
  double value = log_joint(top, locals, grad ? &gt : nullptr, grad ? &gl : nullptr);
  if (with_jac) value += lj;
  if (!std::isfinite(value)) throw NonFiniteValue("localized log joint is not finite");
  if (grad) {
    grad->resize(dimension());
    grad->head(off) = top_layout_.pullback(z.head(off), gt, with_jac);
    for (Index n = 0; n < gl.rows(); ++n)
      for (Index j = 0; j < n_coef_; ++j) {
        double g = gl(n, j);
        if (family_ == Family::kPoisson) g = g * locals(n, j) + (with_jac ? 1.0 : 0.0);
        (*grad)[off + n * n_coef_ + j] = g;
      }
    if (!grad->allFinite()) throw NonFiniteValue("localized gradient is not finite");
  }
  return value;
}

LogDensityFn LocalizedModel::as_log_density(JacobianMode mode) const {
  auto self = std::make_shared<LocalizedModel>(*this);
  return {dimension(), [self, mode](const Vector& z, Vector* g) { return self->eval(z, g, mode); }};
}

Vector LocalizedModel::initial_point() const {
  ModelParameters top = initial_top();
  Vector z(dimension());
  const Index off = top_layout_.unconstrained_size();
  z.head(off) = top_layout_.to_unconstrained(top);
  if (marginal_) return z;
  for (Index n = 0; n < n_obs(); ++n)
    for (Index j = 0; j < n_coef_; ++j)
      z[off + n * n_coef_ + j] =
          family_ == Family::kPoisson ? std::log(y_[n] + 0.5) : top.values("beta")[j];
  return z;
}

Vector LocalizedModel::draw_local(const Vector& top, Rng& rng) const {
  const Index p = n_coef_;
  const double fixed = spec_.fixed_local_var.value_or(0.0);
  Vector local(p);
  switch (family_) {
    case Family::kPoisson:
      local[0] = sample_positive_normal(top[0], free_var() ? top[1] : fixed, rng);
      break;
    case Family::kLogistic: {
      const double sd = std::sqrt(free_var() ? top[p] : fixed);
      for (Index j = 0; j < p; ++j) local[j] = top[j] + sd * rng.normal();
      break;
    }
    case Family::kLinear:
      for (Index j = 0; j < p; ++j) local[j] = top[j] + std::sqrt(free_var() ? top[p + j] : fixed) * rng.normal();
      break;
  }
  return local;
}

double LocalizedModel::point_loglik(const Vector& top, const Vector& local, const Dataset& data, Index n) const {
  const double y = data.responses()[n];
  switch (family_) {
    case Family::kPoisson:
      return y * std::log(local[0]) - local[0] - std::lgamma(y + 1.0);
    case Family::kLogistic: {
      const double eta = design_row(data, n).dot(local);
      return y * eta - softplus(eta);
    }
    case Family::kLinear: {
      const double s2 = top[free_var() ? 2 * n_coef_ : n_coef_];
      return normal_term(y, design_row(data, n).dot(local), s2).value;
    }
  }
  return 0.0;
}

double log_joint_localized(const LocalizedSpec& spec, const ModelParameters& top, const Matrix& locals,
                           const Dataset& data) {
  LocalizedModel model(spec, data, false);
  Vector flat(model.top_layout().constrained_size());
  Index at = 0;
  const ModelParameters schema = model.initial_top();
  for (const ParamBlock& b : schema.blocks()) {
    const Vector& v = top.values(b.name);
    if (v.size() != b.values.size()) throw ShapeError("block " + b.name + " has wrong size");
    flat.segment(at, v.size()) = v;
    at += v.size();
  }
  return model.log_joint(flat, locals);
}

Posterior fit_localized(const LocalizedModel& model, const SamplerConfig& cfg) {
  SampleChain chain = sample_posterior(model.as_log_density(JacobianMode::kInclude), model.initial_point(), cfg);
  return Posterior::from_chain(std::move(chain), model.top_layout());
}

Vector glm_localization_weights(const Vector& x, double lambda_sq, double sigma_sq) {
  if (!(sigma_sq > 0.0)) throw DomainError("sigma_sq must be positive");
  if (!(lambda_sq >= 0.0)) throw DomainError("lambda_sq must be nonnegative");
  if (x.size() == 0) return x;
  const double mean = x.mean();
  return ((x.array() - mean).square() * lambda_sq + sigma_sq).inverse().matrix();
}

GlmEquivalence verify_glm_equivalence(const Dataset& data, double lambda_sq, double sigma_sq) {
  if (data.n_covariates() != 1) throw ShapeError("equivalence check takes exactly one covariate");
  if (data.n_obs() < 3) throw ShapeError("equivalence check needs at least 3 observations");
  const Vector x = data.covariates().col(0);
  const Vector& y = data.responses();
  const double xbar = x.mean();
  const Index n = x.size();
  Matrix design(n, 2);
  design.col(0).setOnes();
  design.col(1) = x.array() - xbar;

  const Vector w = glm_localization_weights(x, lambda_sq, sigma_sq);
  Matrix normal = design.transpose() * w.asDiagonal() * design;
  Eigen::LDLT<Matrix> ldlt(normal);
  const Vector d = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || d.cwiseAbs().minCoeff() <= 1e-12 * d.cwiseAbs().maxCoeff())
    throw SingularDesign("weighted normal equations are singular");
  Vector weighted = ldlt.solve(design.transpose() * w.asDiagonal() * y);

  // marginal variances of the localized model
  const Vector sd = ((x.array() - xbar).square() * lambda_sq + sigma_sq).sqrt().matrix();
  Matrix whitened = sd.cwiseInverse().asDiagonal() * design;
  Eigen::ColPivHouseholderQR<Matrix> qr(whitened);
  if (qr.rank() < 2) throw SingularDesign("whitened design is rank deficient");
  Vector localized = Vector::Zero(2);
  for (int it = 0; it < 50; ++it) {
    Vector resid = (y - design * localized).cwiseQuotient(sd);
    Vector step = qr.solve(resid);
    localized += step;
    if (step.lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + localized.lpNorm<Eigen::Infinity>())) break;
  }

  auto uncenter = [xbar](const Vector& c) {
    Vector out(2);
    out << c[0] - c[1] * xbar, c[1];
    return out;
  };
  GlmEquivalence out;
  out.beta_weighted = uncenter(weighted);
  out.beta_localized = uncenter(localized);
  out.max_abs_diff = (out.beta_weighted - out.beta_localized).lpNorm<Eigen::Infinity>();
  return out;
}

double sample_positive_normal(double mean, double var, Rng& rng) {
  if (!(var > 0.0)) throw DomainError("variance must be positive");
  const double sd = std::sqrt(var);
  const double lower = -mean / sd;  // standardized truncation point
  if (lower < 0.5) {
    for (;;) {
      double z = rng.normal();
      if (z > lower) return mean + sd * z;
    }
  }
  // exponential proposal for a far tail
  const double alpha = 0.5 * (lower + std::sqrt(lower * lower + 4.0));
  for (;;) {
    double z = lower - std::log(rng.uniform_open()) / alpha;
    if (rng.uniform() <= std::exp(-0.5 * (z - alpha) * (z - alpha))) return std::max(mean + sd * z, 1e-300);
  }
}

}  // namespace rpm

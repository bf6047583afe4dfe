#include "rpm/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rpm {

Dataset::Dataset(Vector responses, std::optional<Matrix> covariates)
    : responses_(std::move(responses)), covariates_(std::move(covariates)) {
  if (responses_.size() == 0) throw ShapeError("dataset needs at least one observation");
  if (covariates_ && covariates_->rows() != responses_.size())
    throw ShapeError("covariate rows (" + std::to_string(covariates_->rows()) +
                     ") differ from response count (" + std::to_string(responses_.size()) + ")");
}

const Matrix& Dataset::covariates() const {
  if (!covariates_) throw ShapeError("dataset has no covariates");
  return *covariates_;
}

void Dataset::require_counts() const {
  for (Index n = 0; n < responses_.size(); ++n) {
    double y = responses_[n];
    if (!(y >= 0.0) || std::floor(y) != y)
      throw DomainError("response " + std::to_string(n) + " is not a nonnegative integer");
  }
}

void Dataset::require_binary() const {
  for (Index n = 0; n < responses_.size(); ++n) {
    double y = responses_[n];
    if (y != 0.0 && y != 1.0) throw DomainError("response " + std::to_string(n) + " is not binary");
  }
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Vector y(static_cast<Index>(rows.size()));
  std::optional<Matrix> x;
  if (covariates_) x = Matrix(y.size(), covariates_->cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    Index r = rows[k];
    if (r < 0 || r >= n_obs()) throw ShapeError("row index out of range");
    y[static_cast<Index>(k)] = responses_[r];
    if (x) x->row(static_cast<Index>(k)) = covariates_->row(r);
  }
  return Dataset(std::move(y), std::move(x));
}

WeightVector::WeightVector(Vector weights) : weights_(std::move(weights)) {
  for (Index n = 0; n < weights_.size(); ++n)
    if (!(weights_[n] > 0.0) || !std::isfinite(weights_[n]))
      throw SupportError("weight " + std::to_string(n) + " is not a positive finite value");
}

std::string_view to_string(Constraint c) {
  switch (c) {
    case Constraint::kPositive: return "positive";
    case Constraint::kUnitInterval: return "unit-interval";
    case Constraint::kSimplex: return "simplex";
    case Constraint::kUnconstrained: return "unconstrained";
  }
  return "unknown";
}

void validate_constraint(Constraint c, const Vector& values, std::string_view block_name) {
  auto fail = [&](const std::string& why) {
    throw SupportError("block '" + std::string(block_name) + "': " + why);
  };
  for (Index i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i])) fail("non-finite value");
  switch (c) {
    case Constraint::kPositive:
      if ((values.array() <= 0.0).any()) fail("value not positive");
      break;
    case Constraint::kUnitInterval:
      if ((values.array() <= 0.0).any() || (values.array() >= 1.0).any())
        fail("value outside (0, 1)");
      break;
    case Constraint::kSimplex:
      if ((values.array() < 0.0).any()) fail("negative simplex entry");
      if (std::abs(values.sum() - 1.0) > 1e-10) fail("simplex does not sum to 1");
      break;
    case Constraint::kUnconstrained:
      break;
  }
}

void ModelParameters::add(ParamBlock block) {
  if (contains(block.name)) throw ShapeError("duplicate block '" + block.name + "'");
  if (block.values.size() != block.size())
    throw ShapeError("block '" + block.name + "' has wrong value count");
  if (block.constraint == Constraint::kSimplex) {
    // each row of a simplex block is its own simplex
    for (Index r = 0; r < block.rows; ++r)
      validate_constraint(block.constraint, block.values.segment(r * block.cols, block.cols),
                          block.name);
  } else {
    validate_constraint(block.constraint, block.values, block.name);
  }
  blocks_.push_back(std::move(block));
}

void ModelParameters::set(std::string_view name, Vector values) {
  for (auto& b : blocks_) {
    if (b.name != name) continue;
    if (values.size() != b.size()) throw ShapeError("block '" + b.name + "' has wrong value count");
    if (b.constraint == Constraint::kSimplex) {
      for (Index r = 0; r < b.rows; ++r)
        validate_constraint(b.constraint, values.segment(r * b.cols, b.cols), b.name);
    } else {
      validate_constraint(b.constraint, values, b.name);
    }
    b.values = std::move(values);
    return;
  }
  throw ShapeError("no block named '" + std::string(name) + "'");
}

bool ModelParameters::contains(std::string_view name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

const ParamBlock& ModelParameters::block(std::string_view name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw ShapeError("no block named '" + std::string(name) + "'");
}

double ModelParameters::scalar(std::string_view name) const {
  const auto& b = block(name);
  if (b.size() != 1) throw ShapeError("block '" + b.name + "' is not scalar");
  return b.values[0];
}

Index ModelParameters::total_size() const {
  Index n = 0;
  for (const auto& b : blocks_) n += b.size();
  return n;
}

Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                            double h) {
  if (!(h > 0.0)) throw DomainError("finite difference step must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    double up = f(probe);
    probe[i] = x[i] - h;
    double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFiniteValue("non-finite probe at coordinate " + std::to_string(i));
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Philox4x32-10

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> ctr,
                                    std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(seed, stream); }

Rng Rng::substream(std::uint64_t id) const {
  return Rng(seed_, splitmix64(stream_ ^ splitmix64(id + 1)));
}

std::uint64_t Rng::next_u64() {
  if (block_pos_ >= 3) {
    std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    block_ = philox(ctr, {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    ++counter_;
    block_pos_ = 0;
  }
  std::uint64_t v = (static_cast<std::uint64_t>(block_[block_pos_]) << 32) | block_[block_pos_ + 1];
  block_pos_ += 2;
  return v;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() {
  for (;;) {
    double u = uniform();
    if (u > 0.0) return u;
  }
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw DomainError("uniform_int range is empty");
  // rejection to remove modulo bias
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        std::numeric_limits<std::uint64_t>::max() % n;
  for (;;) {
    std::uint64_t v = next_u64();
    if (v < limit) return v % n;
  }
}

double Rng::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * m;
  has_spare_normal_ = true;
  return u * m;
}

double Rng::log_gamma_variate(double shape) {
  if (!(shape > 0.0)) throw DomainError("gamma shape must be positive");
  if (shape < 1.0) {
    // G(a) = G(a+1) * U^(1/a), kept in log space
    double boosted = log_gamma_variate(shape + 1.0);
    return boosted + std::log(uniform_open()) / shape;
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    double u = uniform_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
  }
}

double Rng::gamma(double shape, double rate) {
  if (!(rate > 0.0)) throw DomainError("gamma rate must be positive");
  return std::exp(log_gamma_variate(shape)) / rate;
}

double Rng::beta(double a, double b) {
  double la = log_gamma_variate(a);
  double lb = log_gamma_variate(b);
  // a / (a + b) computed from logs so tiny shapes do not underflow to 0/0
  double m = std::max(la, lb);
  return std::exp(la - m) / (std::exp(la - m) + std::exp(lb - m));
}

std::int64_t Rng::poisson(double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw DomainError("poisson mean must be finite and >= 0");
  if (mean == 0.0) return 0;
  if (mean < 10.0) {
    double p = std::exp(-mean);
    double cdf = p;
    double u = uniform();
    std::int64_t k = 0;
    while (u > cdf) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
      if (p < 1e-300 && cdf >= 1.0 - 1e-15) break;
    }
    return k;
  }
  // Hormann's transformed rejection with squeeze
  double slam = std::sqrt(mean);
  double loglam = std::log(mean);
  double b = 0.931 + 2.53 * slam;
  double a = -0.059 + 0.02483 * b;
  double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    double u = uniform() - 0.5;
    double v = uniform();
    double us = 0.5 - std::abs(u);
    double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -mean + k * loglam - std::lgamma(k + 1.0))
      return static_cast<std::int64_t>(k);
  }
}

std::size_t Rng::categorical(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) total += p;
  double u = uniform() * total;
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return probs.size() - 1;
}

// ---------------------------------------------------------------------------

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  double m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

double log_sum_exp(const Vector& xs) {
  return log_sum_exp(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())));
}

double log_mean_exp(std::span<const double> xs) {
  if (xs.empty()) throw EmptyChain("log_mean_exp of an empty set");
  return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double log_normal_pdf(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

double log_gamma_pdf(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

double log_beta_fn(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

double log_normal_cdf(double x) {
  if (x > -30.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // asymptotic expansion of the lower tail
  double x2 = x * x;
  double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

double normal_mills_ratio(double x) {
  double log_phi = -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi);
  return std::exp(log_phi - log_normal_cdf(x));
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) throw EmptyChain("quantile of an empty set");
  std::sort(values.begin(), values.end());
  double h = (static_cast<double>(values.size()) - 1.0) * p;
  auto lo = static_cast<std::size_t>(std::floor(h));
  auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

long round_half_up(double x) { return static_cast<long>(std::floor(std::abs(x) + 0.5)) * (x < 0 ? -1 : 1); }

}  // namespace rpm

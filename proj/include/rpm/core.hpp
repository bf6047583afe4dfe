#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rpm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define RPM_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

RPM_DEFINE_ERROR(DomainError)
RPM_DEFINE_ERROR(SupportError)
RPM_DEFINE_ERROR(ShapeError)
RPM_DEFINE_ERROR(NonFiniteValue)
RPM_DEFINE_ERROR(UnsupportedPrior)
RPM_DEFINE_ERROR(UnsupportedFamily)
RPM_DEFINE_ERROR(DivergentChain)
RPM_DEFINE_ERROR(EmptyChain)
RPM_DEFINE_ERROR(InsufficientItems)
RPM_DEFINE_ERROR(SingularDesign)
RPM_DEFINE_ERROR(MissingRows)
RPM_DEFINE_ERROR(ConfigError)

#undef RPM_DEFINE_ERROR

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Data containers

/// Observations y_1..y_N with an optional N x D covariate matrix.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(Vector responses, std::optional<Matrix> covariates = std::nullopt);

  Index n_obs() const noexcept { return responses_.size(); }
  const Vector& responses() const noexcept { return responses_; }
  bool has_covariates() const noexcept { return covariates_.has_value(); }
  /// Throws ShapeError when the dataset has no covariates.
  const Matrix& covariates() const;
  Index n_covariates() const noexcept { return covariates_ ? covariates_->cols() : 0; }

  /// Throws DomainError unless every response is a nonnegative integer.
  void require_counts() const;
  /// Throws DomainError unless every response is 0 or 1.
  void require_binary() const;

  /// Rows selected by index, in the given order.
  Dataset subset(std::span<const Index> rows) const;

 private:
  Vector responses_;
  std::optional<Matrix> covariates_;
};

/// Per-observation positive weights.
class WeightVector {
 public:
  WeightVector() = default;
  explicit WeightVector(Vector weights);

  Index size() const noexcept { return weights_.size(); }
  const Vector& values() const noexcept { return weights_; }
  double operator[](Index i) const { return weights_[i]; }

 private:
  Vector weights_;
};

enum class Constraint { kPositive, kUnitInterval, kSimplex, kUnconstrained };

std::string_view to_string(Constraint c);

struct ParamBlock {
  std::string name;
  Constraint constraint = Constraint::kUnconstrained;
  Index rows = 1;
  Index cols = 1;
  Vector values;  // row-major flattening of rows x cols

  Index size() const noexcept { return rows * cols; }
  double at(Index r, Index c) const { return values[r * cols + c]; }
};

/// Ordered named blocks of constrained parameter values.
class ModelParameters {
 public:
  ModelParameters() = default;

  /// Appends a block after validating its constraint. Throws SupportError / ShapeError.
  void add(ParamBlock block);
  /// Replaces the values of an existing block (validated).
  void set(std::string_view name, Vector values);

  bool contains(std::string_view name) const;
  const ParamBlock& block(std::string_view name) const;
  const Vector& values(std::string_view name) const { return block(name).values; }
  double scalar(std::string_view name) const;

  const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
  Index total_size() const;

 private:
  std::vector<ParamBlock> blocks_;
};

/// Throws SupportError if the values violate the constraint.
void validate_constraint(Constraint c, const Vector& values, std::string_view block_name);

// ---------------------------------------------------------------------------
// Log-density contract

/// A differentiable log density on R^dimension. `eval` returns the value and,
/// when `grad` is non-null, writes the gradient (resized by the callee).
struct LogDensityFn {
  Index dimension = 0;
  std::function<double(const Vector& x, Vector* grad)> eval;

  double value(const Vector& x) const { return eval(x, nullptr); }
  double operator()(const Vector& x, Vector& grad) const { return eval(x, &grad); }
};

/// Central-difference gradient of a scalar function. Throws NonFiniteValue if
/// any probe is non-finite.
Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                            double h);

// ---------------------------------------------------------------------------
// Randomness

/// Philox4x32-10 counter-based generator. A (seed, stream) pair fixes the
/// whole draw sequence; distinct streams are independent.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  /// A new generator on a derived stream; does not advance this one.
  Rng substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits.
  double uniform();
  /// Uniform on (0, 1).
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  /// Gamma with shape and rate.
  double gamma(double shape, double rate);
  /// log of a Gamma(shape, 1) draw; stable for tiny shapes.
  double log_gamma_variate(double shape);
  double beta(double a, double b);
  std::int64_t poisson(double mean);
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t categorical(std::span<const double> probs);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

Rng make_rng(std::uint64_t seed, std::uint64_t stream);

// ---------------------------------------------------------------------------
// Numerics shared by every module

double log_sum_exp(std::span<const double> xs);
double log_sum_exp(const Vector& xs);
double log_mean_exp(std::span<const double> xs);
double log_sigmoid(double x);
double sigmoid(double x);
double softplus(double x);
double log_normal_pdf(double x, double mean, double sd);
double log_gamma_pdf(double x, double shape, double rate);
double log_beta_fn(double a, double b);
/// log Phi(x), the standard normal log-CDF.
double log_normal_cdf(double x);
/// phi(x) / Phi(x), the inverse Mills ratio.
double normal_mills_ratio(double x);
/// Type-7 (linear interpolation) sample quantile.
double quantile(std::vector<double> values, double p);
/// Round half away from zero, for counts derived from fractions.
long round_half_up(double x);

}  // namespace rpm

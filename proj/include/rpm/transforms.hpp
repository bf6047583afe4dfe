#pragma once

#include "rpm/core.hpp"

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rpm {

enum class TransformKind { kLogPositive, kLogit, kSimplex, kIdentity };

struct Transform {
  TransformKind kind = TransformKind::kIdentity;
  Index dim_constrained = 0;

  Index dim_unconstrained() const {
    return kind == TransformKind::kSimplex ? dim_constrained - 1 : dim_constrained;
  }
};

Transform transform_for(Constraint c, Index dim);

/// Throws DomainError when x is on or outside the boundary of the domain.
Vector to_unconstrained(const Transform& t, const Vector& x);

/// Constrained value and log|det J| of the inverse map at z.
std::pair<Vector, double> from_unconstrained_with_logjac(const Transform& t, const Vector& z);

/// Chain rule: turns d f / d x (constrained) into d f / d z. When
/// `with_jacobian` is set the gradient of the log-Jacobian is added.
Vector pullback_gradient(const Transform& t, const Vector& x, const Vector& grad_x,
                         bool with_jacobian);

/// Maps a ModelParameters layout to one flat unconstrained vector. Simplex
/// blocks with several rows are treated as one simplex per row.
class ParameterLayout {
 public:
  ParameterLayout() = default;
  explicit ParameterLayout(const ModelParameters& schema);

  Index constrained_size() const noexcept { return constrained_size_; }
  Index unconstrained_size() const noexcept { return unconstrained_size_; }

  Vector to_unconstrained(const ModelParameters& params) const;
  /// Builds the parameters for z and accumulates the total log-Jacobian.
  ModelParameters from_unconstrained(const Vector& z, double* logjac = nullptr) const;
  /// Flat constrained values in block order, without validation.
  Vector constrained_values(const Vector& z, double* logjac = nullptr) const;
  /// `grad_x` is the flat constrained-space gradient in block order.
  Vector pullback(const Vector& z, const Vector& grad_x, bool with_jacobian) const;

  const ModelParameters& schema() const noexcept { return schema_; }

  struct Piece {
    std::string block;
    Transform transform;
    Index x_offset;
    Index z_offset;
  };
  /// Transform slices backing a block (one per row for simplex blocks).
  std::vector<Piece> pieces_for(std::string_view block) const;
  /// Offset of a block inside the flat constrained vector.
  Index constrained_offset(std::string_view block) const;

 private:
  ModelParameters schema_;
  std::vector<Piece> pieces_;
  Index constrained_size_ = 0;
  Index unconstrained_size_ = 0;
};

}  // namespace rpm

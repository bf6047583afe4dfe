#include "rpm/transforms.hpp"

#include <cmath>
#include <limits>

namespace rpm {

Transform transform_for(Constraint c, Index dim) {
  switch (c) {
    case Constraint::kPositive: return {TransformKind::kLogPositive, dim};
    case Constraint::kUnitInterval: return {TransformKind::kLogit, dim};
    case Constraint::kSimplex: return {TransformKind::kSimplex, dim};
    case Constraint::kUnconstrained: return {TransformKind::kIdentity, dim};
  }
  return {TransformKind::kIdentity, dim};
}

Vector to_unconstrained(const Transform& t, const Vector& x) {
  if (x.size() != t.dim_constrained) throw ShapeError("transform input has wrong length");
  switch (t.kind) {
    case TransformKind::kIdentity:
      return x;
    case TransformKind::kLogPositive:
      if ((x.array() <= 0.0).any()) throw DomainError("log transform needs x > 0");
      return x.array().log().matrix();
    case TransformKind::kLogit:
      if ((x.array() <= 0.0).any() || (x.array() >= 1.0).any())
        throw DomainError("logit transform needs 0 < x < 1");
      return (x.array().log() - (-x.array()).log1p()).matrix();
    case TransformKind::kSimplex: {
      if (t.dim_constrained < 2) throw ShapeError("simplex needs at least two coordinates");
      if ((x.array() <= 0.0).any()) throw DomainError("simplex coordinates must be positive");
      if (std::abs(x.sum() - 1.0) > 1e-8) throw DomainError("simplex must sum to 1");
      Index k = t.dim_constrained;
      double anchor = std::log(x[k - 1]);
      return (x.head(k - 1).array().log() - anchor).matrix();
    }
  }
  return x;
}

std::pair<Vector, double> from_unconstrained_with_logjac(const Transform& t, const Vector& z) {
  if (z.size() != t.dim_unconstrained()) throw ShapeError("transform input has wrong length");
  switch (t.kind) {
    case TransformKind::kIdentity:
      return {z, 0.0};
    case TransformKind::kLogPositive:
      return {z.array().exp().matrix(), z.sum()};
    case TransformKind::kLogit: {
      Vector x(z.size());
      double lj = 0.0;
      for (Index i = 0; i < z.size(); ++i) {
        x[i] = sigmoid(z[i]);
        lj += log_sigmoid(z[i]) + log_sigmoid(-z[i]);
      }
      return {x, lj};
    }
    case TransformKind::kSimplex: {
      Index k = t.dim_constrained;
      Vector logits(k);
      logits.head(k - 1) = z;
      logits[k - 1] = 0.0;
      double norm = log_sum_exp(logits);
      Vector logx = logits.array() - norm;
      return {logx.array().exp().matrix(), logx.sum()};
    }
  }
  return {z, 0.0};
}

Vector pullback_gradient(const Transform& t, const Vector& x, const Vector& grad_x,
                         bool with_jacobian) {
  switch (t.kind) {
    case TransformKind::kIdentity:
      return grad_x;
    case TransformKind::kLogPositive: {
      Vector g = grad_x.cwiseProduct(x);
      if (with_jacobian) g.array() += 1.0;
      return g;
    }
    case TransformKind::kLogit: {
      Vector g = (grad_x.array() * x.array() * (1.0 - x.array())).matrix();
      if (with_jacobian) g.array() += 1.0 - 2.0 * x.array();
      return g;
    }
    case TransformKind::kSimplex: {
      Index k = t.dim_constrained;
      double mean_grad = grad_x.dot(x);
      Vector g = (x.head(k - 1).array() * (grad_x.head(k - 1).array() - mean_grad)).matrix();
      if (with_jacobian) g.array() += 1.0 - static_cast<double>(k) * x.head(k - 1).array();
      return g;
    }
  }
  return grad_x;
}

ParameterLayout::ParameterLayout(const ModelParameters& schema) : schema_(schema) {
  for (const auto& b : schema.blocks()) {
    if (b.constraint == Constraint::kSimplex) {
      for (Index r = 0; r < b.rows; ++r) {
        Transform t = transform_for(b.constraint, b.cols);
        pieces_.push_back({b.name, t, constrained_size_, unconstrained_size_});
        constrained_size_ += t.dim_constrained;
        unconstrained_size_ += t.dim_unconstrained();
      }
    } else {
      Transform t = transform_for(b.constraint, b.size());
      pieces_.push_back({b.name, t, constrained_size_, unconstrained_size_});
      constrained_size_ += t.dim_constrained;
      unconstrained_size_ += t.dim_unconstrained();
    }
  }
}

Vector ParameterLayout::to_unconstrained(const ModelParameters& params) const {
  Vector x(constrained_size_);
  Index off = 0;
  for (const auto& b : schema_.blocks()) {
    const Vector& v = params.values(b.name);
    if (v.size() != b.size()) throw ShapeError("block '" + b.name + "' has wrong size");
    x.segment(off, v.size()) = v;
    off += v.size();
  }
  Vector z(unconstrained_size_);
  for (const auto& p : pieces_)
    z.segment(p.z_offset, p.transform.dim_unconstrained()) =
        rpm::to_unconstrained(p.transform, x.segment(p.x_offset, p.transform.dim_constrained));
  return z;
}

Vector ParameterLayout::constrained_values(const Vector& z, double* logjac) const {
  if (z.size() != unconstrained_size_) throw ShapeError("unconstrained vector has wrong length");
  Vector x(constrained_size_);
  double lj = 0.0;
  for (const auto& p : pieces_) {
    auto [xs, l] = from_unconstrained_with_logjac(
        p.transform, z.segment(p.z_offset, p.transform.dim_unconstrained()));
    x.segment(p.x_offset, xs.size()) = xs;
    lj += l;
  }
  if (logjac) *logjac = lj;
  return x;
}

ModelParameters ParameterLayout::from_unconstrained(const Vector& z, double* logjac) const {
  Vector x = constrained_values(z, logjac);
  ModelParameters out;
  Index off = 0;
  for (const auto& b : schema_.blocks()) {
    ParamBlock nb = b;
    nb.values = x.segment(off, b.size());
    // exp/sigmoid can round to the boundary at extreme z; nudge inward
    if (b.constraint == Constraint::kPositive)
      nb.values = nb.values.cwiseMax(std::numeric_limits<double>::min());
    else if (b.constraint == Constraint::kUnitInterval)
      nb.values = nb.values.cwiseMax(1e-300).cwiseMin(std::nextafter(1.0, 0.0));
    off += b.size();
    out.add(std::move(nb));
  }
  return out;
}

std::vector<ParameterLayout::Piece> ParameterLayout::pieces_for(std::string_view block) const {
  std::vector<Piece> out;
  for (const auto& p : pieces_)
    if (p.block == block) out.push_back(p);
  if (out.empty()) throw ShapeError("no block named '" + std::string(block) + "'");
  return out;
}

Index ParameterLayout::constrained_offset(std::string_view block) const {
  return pieces_for(block).front().x_offset;
}

Vector ParameterLayout::pullback(const Vector& z, const Vector& grad_x, bool with_jacobian) const {
  if (grad_x.size() != constrained_size_) throw ShapeError("constrained gradient has wrong length");
  Vector x = constrained_values(z);
  Vector g(unconstrained_size_);
  for (const auto& p : pieces_) {
    Index nx = p.transform.dim_constrained;
    g.segment(p.z_offset, p.transform.dim_unconstrained()) = pullback_gradient(
        p.transform, x.segment(p.x_offset, nx), grad_x.segment(p.x_offset, nx), with_jacobian);
  }
  return g;
}

}  // namespace rpm

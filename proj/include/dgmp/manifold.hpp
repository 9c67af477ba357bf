#pragma once

/** Manifold descriptors and point/tangent/cotangent values.
 *
 * Supported manifolds: Euclidean spaces, the rotation group SO(3), and
 * finite products of these. Points carry their manifold handle and a flat
 * coordinate vector (Euclidean: the point itself; SO(3): the 3x3 rotation
 * matrix in row-major order; products: concatenation of factor coordinates).
 * Tangent and cotangent vectors use intrinsic coordinates of length dim();
 * on SO(3) these are body-frame (left-trivialized) coordinates under the
 * hat map, and cotangent coordinates are dual under the standard dot
 * product.
 */

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dgmp {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

// --------------------------------------------------------------------------
// so(3) coordinates

/// Skew-symmetric matrix of a, so that hat(a) * b = a x b.
inline Matrix3d hat(const Vector3d& a) {
  Matrix3d m;
  m << 0.0, -a.z(), a.y(), a.z(), 0.0, -a.x(), -a.y(), a.x(), 0.0;
  return m;
}

/// Inverse of hat. Rejects inputs that are not skew-symmetric to 1e-10.
inline Vector3d vee(const Matrix3d& m) {
  if ((m + m.transpose()).norm() > 1e-10 * (1.0 + m.norm())) {
    throw std::invalid_argument("vee: matrix is not skew-symmetric");
  }
  return Vector3d(m(2, 1), m(0, 2), m(1, 0));
}

namespace so3 {

/// Rodrigues formula for exp(hat(a)).
inline Matrix3d exp(const Vector3d& a) {
  const double theta = a.norm();
  const Matrix3d A = hat(a);
  if (theta < 1e-9) {
    // 4th-order Taylor keeps orthogonality error at machine precision
    return Matrix3d::Identity() + A + 0.5 * A * A;
  }
  const double s = std::sin(theta) / theta;
  const double c = (1.0 - std::cos(theta)) / (theta * theta);
  return Matrix3d::Identity() + s * A + c * A * A;
}

/// Principal logarithm, returned in vector coordinates.
inline Vector3d log(const Matrix3d& R) {
  const double tr = R.trace();
  const double cos_theta = std::min(1.0, std::max(-1.0, 0.5 * (tr - 1.0)));
  const double theta = std::acos(cos_theta);
  const Vector3d w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < 1e-7) {
    return 0.5 * w;
  }
  if (theta > M_PI - 1e-6) {
    // Near the cut locus: recover the axis from the symmetric part.
    const Matrix3d S = 0.5 * (R + Matrix3d::Identity());
    int k;
    S.diagonal().maxCoeff(&k);
    Vector3d axis = S.col(k) / std::sqrt(std::max(S(k, k), 1e-300));
    axis.normalize();
    // Fix the sign using the skew part when it is nonzero.
    if (axis.dot(w) < 0.0) axis = -axis;
    return theta * axis;
  }
  return 0.5 * theta / std::sin(theta) * w;
}

/// Closest rotation in Frobenius norm (polar factor with det +1).
inline Matrix3d project(const Matrix3d& M) {
  Eigen::JacobiSVD<Matrix3d> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3d R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0.0) {
    Matrix3d flip = Matrix3d::Identity();
    flip(2, 2) = -1.0;
    R = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return R;
}

/// Right Jacobian of exp: exp(hat(a + da)) = exp(hat(a)) exp(hat(Jr(a) da)) + O(da^2).
inline Matrix3d right_jacobian(const Vector3d& a) {
  const double theta = a.norm();
  const Matrix3d A = hat(a);
  if (theta < 1e-6) {
    return Matrix3d::Identity() - 0.5 * A + (1.0 / 6.0) * A * A;
  }
  const double t2 = theta * theta;
  return Matrix3d::Identity() - (1.0 - std::cos(theta)) / t2 * A +
         (theta - std::sin(theta)) / (t2 * theta) * A * A;
}

}  // namespace so3

// --------------------------------------------------------------------------
// Manifold handles

/// Immutable descriptor of a supported manifold. Copies are cheap and share
/// structure; equality is structural.
class Manifold {
 public:
  enum class Kind { Euclidean, SO3, Product };

  static Manifold euclidean(int dim) {
    if (dim < 0) throw std::invalid_argument("Manifold: negative dimension");
    return Manifold(std::make_shared<Node>(Node{Kind::Euclidean, dim, dim, {}}));
  }

  static Manifold so3() {
    return Manifold(std::make_shared<Node>(Node{Kind::SO3, 3, 9, {}}));
  }

  static Manifold product(std::vector<Manifold> factors) {
    if (factors.empty()) throw std::invalid_argument("Manifold: empty product");
    int dim = 0, rep = 0;
    for (const auto& f : factors) {
      dim += f.dim();
      rep += f.rep_dim();
    }
    return Manifold(std::make_shared<Node>(Node{Kind::Product, dim, rep, std::move(factors)}));
  }

  Kind kind() const { return node_->kind; }

  /// Intrinsic (tangent space) dimension.
  int dim() const { return node_->dim; }

  /// Length of the flat coordinate representation.
  int rep_dim() const { return node_->rep; }

  const std::vector<Manifold>& factors() const { return node_->factors; }

  /// Euclidean spaces act as additive groups; SO(3) and products of groups
  /// are multiplicative.
  bool is_group() const {
    if (node_->kind == Kind::Product) {
      for (const auto& f : node_->factors) {
        if (!f.is_group()) return false;
      }
      return true;
    }
    return true;
  }

  bool same_as(const Manifold& other) const {
    if (node_ == other.node_) return true;
    if (node_->kind != other.node_->kind || node_->dim != other.node_->dim) return false;
    if (node_->kind == Kind::Product) {
      if (node_->factors.size() != other.node_->factors.size()) return false;
      for (std::size_t i = 0; i < node_->factors.size(); ++i) {
        if (!node_->factors[i].same_as(other.node_->factors[i])) return false;
      }
    }
    return true;
  }

  std::string describe() const {
    switch (node_->kind) {
      case Kind::Euclidean:
        return "R^" + std::to_string(node_->dim);
      case Kind::SO3:
        return "SO(3)";
      case Kind::Product: {
        std::string s = "(";
        for (std::size_t i = 0; i < node_->factors.size(); ++i) {
          if (i) s += " x ";
          s += node_->factors[i].describe();
        }
        return s + ")";
      }
    }
    return "?";
  }

 private:
  struct Node {
    Kind kind;
    int dim;
    int rep;
    std::vector<Manifold> factors;
  };

  explicit Manifold(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  std::shared_ptr<const Node> node_;
};

inline void require_same_manifold(const Manifold& a, const Manifold& b, const char* where) {
  if (!a.same_as(b)) {
    std::ostringstream os;
    os << where << ": manifold mismatch (" << a.describe() << " vs " << b.describe() << ")";
    throw std::invalid_argument(os.str());
  }
}

// --------------------------------------------------------------------------
// Points

/// A point on a manifold. Validates coordinates on construction; SO(3)
/// blocks within 1e-6 of orthonormality are re-projected, farther ones are
/// rejected.
class Point {
 public:
  Point(Manifold m, VectorXd coords) : m_(std::move(m)), x_(x_init(m_, std::move(coords))) {}

  const Manifold& manifold() const { return m_; }
  const VectorXd& coords() const { return x_; }

  /// SO(3)-valued point as a matrix (whole manifold must be SO3).
  Matrix3d rotation() const {
    if (m_.kind() != Manifold::Kind::SO3) {
      throw std::invalid_argument("Point::rotation: not an SO(3) point");
    }
    return Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(x_.data());
  }

  /// Factor of a product point.
  Point factor(int i) const {
    if (m_.kind() != Manifold::Kind::Product) {
      throw std::invalid_argument("Point::factor: not a product point");
    }
    int off = 0;
    for (int k = 0; k < i; ++k) off += m_.factors()[k].rep_dim();
    return Point(m_.factors()[i], x_.segment(off, m_.factors()[i].rep_dim()));
  }

 private:
  static VectorXd x_init(const Manifold& m, VectorXd x) {
    if (x.size() != m.rep_dim()) {
      throw std::invalid_argument("Point: coordinate length " + std::to_string(x.size()) +
                                  " does not match " + m.describe());
    }
    validate_block(m, x, 0);
    return x;
  }

  static void validate_block(const Manifold& m, VectorXd& x, int off) {
    switch (m.kind()) {
      case Manifold::Kind::Euclidean:
        if (!x.segment(off, m.rep_dim()).allFinite()) {
          throw std::invalid_argument("Point: non-finite coordinates");
        }
        break;
      case Manifold::Kind::SO3: {
        Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> R(x.data() + off);
        if (!R.allFinite()) throw std::invalid_argument("Point: non-finite coordinates");
        const double err = (R.transpose() * R - Matrix3d::Identity()).norm();
        if (err > 1e-6 || R.determinant() < 0.0) {
          throw std::invalid_argument("Point: matrix is not a rotation (orthogonality error " +
                                      std::to_string(err) + ")");
        }
        if (err > 1e-10) {
          const Matrix3d fixed = so3::project(R);
          R = fixed;
        }
        break;
      }
      case Manifold::Kind::Product: {
        int o = off;
        for (const auto& f : m.factors()) {
          validate_block(f, x, o);
          o += f.rep_dim();
        }
        break;
      }
    }
  }

  Manifold m_;
  VectorXd x_;
};

inline Point make_point(const Manifold& m, const VectorXd& coords) { return Point(m, coords); }

inline Point so3_point(const Matrix3d& R) {
  VectorXd x(9);
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(x.data()) = R;
  return Point(Manifold::so3(), x);
}

/// Group identity (Euclidean zero, SO(3) identity, componentwise on products).
inline Point identity_point(const Manifold& m) {
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      return Point(m, VectorXd::Zero(m.rep_dim()));
    case Manifold::Kind::SO3:
      return so3_point(Matrix3d::Identity());
    case Manifold::Kind::Product: {
      VectorXd x(m.rep_dim());
      int off = 0;
      for (const auto& f : m.factors()) {
        x.segment(off, f.rep_dim()) = identity_point(f).coords();
        off += f.rep_dim();
      }
      return Point(m, x);
    }
  }
  throw std::logic_error("identity_point: unreachable");
}

// --------------------------------------------------------------------------
// Tangent and cotangent values

struct Tangent {
  Tangent(Point base_, VectorXd vec_) : base(std::move(base_)), vec(std::move(vec_)) {
    if (vec.size() != base.manifold().dim()) {
      throw std::invalid_argument("Tangent: coordinate length does not match manifold dimension");
    }
  }
  Point base;
  VectorXd vec;
};

struct Cotangent {
  Cotangent(Point base_, VectorXd covec_) : base(std::move(base_)), covec(std::move(covec_)) {
    if (covec.size() != base.manifold().dim()) {
      throw std::invalid_argument("Cotangent: coordinate length does not match manifold dimension");
    }
  }
  Point base;
  VectorXd covec;
};

/// Dual pairing <p, v> of a cotangent with a tangent at the same base point.
inline double pairing(const Cotangent& p, const Tangent& v) {
  require_same_manifold(p.base.manifold(), v.base.manifold(), "pairing");
  return p.covec.dot(v.vec);
}

// --------------------------------------------------------------------------
// Retraction and its inverse

namespace detail {

inline void retract_block(const Manifold& m, const VectorXd& x, int xoff, const VectorXd& v,
                          int voff, VectorXd& out) {
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      out.segment(xoff, m.rep_dim()) = x.segment(xoff, m.rep_dim()) + v.segment(voff, m.dim());
      break;
    case Manifold::Kind::SO3: {
      const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> R(x.data() + xoff);
      const Matrix3d Rn = R * so3::exp(v.segment<3>(voff));
      Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.data() + xoff) = Rn;
      break;
    }
    case Manifold::Kind::Product: {
      int xo = xoff, vo = voff;
      for (const auto& f : m.factors()) {
        retract_block(f, x, xo, v, vo, out);
        xo += f.rep_dim();
        vo += f.dim();
      }
      break;
    }
  }
}

inline void local_coords_block(const Manifold& m, const VectorXd& base, int xoff, const VectorXd& y,
                               VectorXd& out, int voff) {
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      out.segment(voff, m.dim()) = y.segment(xoff, m.rep_dim()) - base.segment(xoff, m.rep_dim());
      break;
    case Manifold::Kind::SO3: {
      const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> R0(base.data() + xoff);
      const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> R1(y.data() + xoff);
      out.segment<3>(voff) = so3::log(R0.transpose() * R1);
      break;
    }
    case Manifold::Kind::Product: {
      int xo = xoff, vo = voff;
      for (const auto& f : m.factors()) {
        local_coords_block(f, base, xo, y, out, vo);
        xo += f.rep_dim();
        vo += f.dim();
      }
      break;
    }
  }
}

}  // namespace detail

/// Exponential-type retraction: x + v on Euclidean factors, R exp(hat(v)) on
/// SO(3) factors.
inline Point retract(const Point& base, const Tangent& v) {
  require_same_manifold(base.manifold(), v.base.manifold(), "retract");
  if ((base.coords() - v.base.coords()).lpNorm<Eigen::Infinity>() > 1e-9) {
    throw std::invalid_argument("retract: tangent is based at a different point");
  }
  VectorXd out(base.manifold().rep_dim());
  detail::retract_block(base.manifold(), base.coords(), 0, v.vec, 0, out);
  return Point(base.manifold(), out);
}

/// Retract raw tangent coordinates at base (no base-point bookkeeping).
inline Point retract(const Point& base, const VectorXd& v) {
  return retract(base, Tangent(base, v));
}

/// Inverse retraction: tangent coordinates of p in the chart centered at
/// base (subtraction on Euclidean factors, vee(log(R0^T R1)) on SO(3)).
inline VectorXd local_coords(const Point& base, const Point& p) {
  require_same_manifold(base.manifold(), p.manifold(), "local_coords");
  VectorXd out(base.manifold().dim());
  detail::local_coords_block(base.manifold(), base.coords(), 0, p.coords(), out, 0);
  return out;
}

// --------------------------------------------------------------------------
// Group operations

namespace detail {

inline void require_group(const Manifold& m, const char* where) {
  if (!m.is_group()) throw std::invalid_argument(std::string(where) + ": not a group manifold");
}

}  // namespace detail

inline Point group_mul(const Point& g, const Point& h) {
  require_same_manifold(g.manifold(), h.manifold(), "group_mul");
  detail::require_group(g.manifold(), "group_mul");
  const Manifold& m = g.manifold();
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      return Point(m, g.coords() + h.coords());
    case Manifold::Kind::SO3:
      return so3_point(g.rotation() * h.rotation());
    case Manifold::Kind::Product: {
      VectorXd x(m.rep_dim());
      int off = 0;
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        x.segment(off, m.factors()[i].rep_dim()) =
            group_mul(g.factor((int)i), h.factor((int)i)).coords();
        off += m.factors()[i].rep_dim();
      }
      return Point(m, x);
    }
  }
  throw std::logic_error("group_mul: unreachable");
}

inline Point group_inv(const Point& g) {
  detail::require_group(g.manifold(), "group_inv");
  const Manifold& m = g.manifold();
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      return Point(m, -g.coords());
    case Manifold::Kind::SO3:
      return so3_point(g.rotation().transpose());
    case Manifold::Kind::Product: {
      VectorXd x(m.rep_dim());
      int off = 0;
      for (std::size_t i = 0; i < m.factors().size(); ++i) {
        x.segment(off, m.factors()[i].rep_dim()) = group_inv(g.factor((int)i)).coords();
        off += m.factors()[i].rep_dim();
      }
      return Point(m, x);
    }
  }
  throw std::logic_error("group_inv: unreachable");
}

namespace detail {

inline void ad_block(const Manifold& m, const VectorXd& g, int goff, const VectorXd& a, int aoff,
                     VectorXd& out) {
  switch (m.kind()) {
    case Manifold::Kind::Euclidean:
      out.segment(aoff, m.dim()) = a.segment(aoff, m.dim());  // abelian
      break;
    case Manifold::Kind::SO3: {
      const Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> R(g.data() + goff);
      out.segment<3>(aoff) = R * a.segment<3>(aoff);
      break;
    }
    case Manifold::Kind::Product: {
      int go = goff, ao = aoff;
      for (const auto& f : m.factors()) {
        ad_block(f, g, go, a, ao, out);
        go += f.rep_dim();
        ao += f.dim();
      }
      break;
    }
  }
}

}  // namespace detail

/// Adjoint representation acting on Lie algebra coordinates:
/// Ad(g) a = vee(g hat(a) g^-1); R a on SO(3), identity on Euclidean factors.
inline VectorXd Ad(const Point& g, const VectorXd& a) {
  detail::require_group(g.manifold(), "Ad");
  if (a.size() != g.manifold().dim()) throw std::invalid_argument("Ad: algebra dimension mismatch");
  VectorXd out(a.size());
  detail::ad_block(g.manifold(), g.coords(), 0, a, 0, out);
  return out;
}

/// Coadjoint representation Ad*(g) := Ad(g^-1)^*, so that
/// <Ad_star(g, p), a> = <p, Ad(g^-1, a)>. On SO(3) this is p -> R p.
inline VectorXd Ad_star(const Point& g, const VectorXd& p) {
  // Ad(g^-1)^* has the same matrix as Ad(g) for our groups: on SO(3) the
  // dual of a -> R^T a is p -> R p, and Euclidean factors are trivial.
  detail::require_group(g.manifold(), "Ad_star");
  if (p.size() != g.manifold().dim()) {
    throw std::invalid_argument("Ad_star: algebra dimension mismatch");
  }
  VectorXd out(p.size());
  detail::ad_block(g.manifold(), g.coords(), 0, p, 0, out);
  return out;
}

/// Typed wrappers working at the identity.
inline Tangent Ad(const Point& g, const Tangent& a) {
  return Tangent(identity_point(g.manifold()), Ad(g, a.vec));
}

inline Cotangent Ad_star(const Point& g, const Cotangent& p) {
  return Cotangent(identity_point(g.manifold()), Ad_star(g, p.covec));
}

// --------------------------------------------------------------------------
// Metrics

/// Positive-definite bilinear form on tangent coordinates; identity by
/// default. Product metrics are block-diagonal sums of factor forms.
class Metric {
 public:
  explicit Metric(Manifold m) : m_(std::move(m)), form_() {}

  Metric(Manifold m, MatrixXd form) : m_(std::move(m)), form_(std::move(form)) {
    if (form_->rows() != m_.dim() || form_->cols() != m_.dim()) {
      throw std::invalid_argument("Metric: form size does not match manifold dimension");
    }
    Eigen::LLT<MatrixXd> llt(*form_);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("Metric: form is not positive definite");
    }
  }

  const Manifold& manifold() const { return m_; }
  bool is_identity() const { return !form_.has_value(); }

  MatrixXd form() const {
    return form_ ? *form_ : MatrixXd(MatrixXd::Identity(m_.dim(), m_.dim()));
  }

  double inner(const VectorXd& v, const VectorXd& w) const {
    check(v);
    check(w);
    return form_ ? double(v.dot(*form_ * w)) : v.dot(w);
  }

  double norm(const VectorXd& v) const { return std::sqrt(std::max(0.0, inner(v, v))); }

  /// Raise an index: tangent coordinates of the metric dual of a covector.
  VectorXd sharp(const VectorXd& covec) const {
    check(covec);
    return form_ ? VectorXd(form_->ldlt().solve(covec)) : covec;
  }

  /// Lower an index.
  VectorXd flat(const VectorXd& vec) const {
    check(vec);
    return form_ ? VectorXd(*form_ * vec) : vec;
  }

 private:
  void check(const VectorXd& v) const {
    if (v.size() != m_.dim()) throw std::invalid_argument("Metric: coordinate length mismatch");
  }

  Manifold m_;
  std::optional<MatrixXd> form_;
};

/// Block-diagonal product metric: the sum of the factor forms.
inline Metric product_metric(const std::vector<Metric>& factors) {
  std::vector<Manifold> ms;
  bool all_identity = true;
  int dim = 0;
  for (const auto& g : factors) {
    ms.push_back(g.manifold());
    all_identity = all_identity && g.is_identity();
    dim += g.manifold().dim();
  }
  const Manifold m = Manifold::product(ms);
  if (all_identity) return Metric(m);
  MatrixXd form = MatrixXd::Zero(dim, dim);
  int off = 0;
  for (const auto& g : factors) {
    const int d = g.manifold().dim();
    form.block(off, off, d, d) = g.form();
    off += d;
  }
  return Metric(m, form);
}

}  // namespace dgmp

#pragma once

/** Discrete-time geometric control systems: stage maps with pushforwards,
 * the factored form E o f with fibre derivatives, control-set descriptions
 * with tangent cones, rollout, transition Jacobians, and the forward
 * variational equation.
 */

#include <dgmp/manifold.hpp>

#include <cstdint>
#include <functional>
#include <optional>

namespace dgmp {

// --------------------------------------------------------------------------
// Finite differences through retractions (default pushforward source)

namespace detail {

constexpr double kFdStep = 1e-6;

/// Columns are d/dt local_coords(F(x0), F(retract(x0, t e_k)))|_0 by central
/// differences; works for maps between any supported manifolds.
template <typename MapFn>
MatrixXd fd_differential(const MapFn& map, const Point& at, double step = kFdStep) {
  const Point y0 = map(at);
  const int din = at.manifold().dim();
  const int dout = y0.manifold().dim();
  MatrixXd jac(dout, din);
  for (int k = 0; k < din; ++k) {
    VectorXd e = VectorXd::Zero(din);
    e[k] = step;
    const Point yp = map(retract(at, e));
    const Point ym = map(retract(at, VectorXd(-e)));
    jac.col(k) = (local_coords(y0, yp) - local_coords(y0, ym)) / (2.0 * step);
  }
  return jac;
}

/// FD differential of a vector-valued map on a manifold (central).
template <typename Fn>
MatrixXd fd_differential_vec(const Fn& fn, const Point& at, double step = 1e-7) {
  const VectorXd y0 = fn(at);
  MatrixXd jac(y0.size(), at.manifold().dim());
  for (int k = 0; k < at.manifold().dim(); ++k) {
    VectorXd e = VectorXd::Zero(at.manifold().dim());
    e[k] = step;
    jac.col(k) = (fn(retract(at, e)) - fn(retract(at, VectorXd(-e)))) / (2.0 * step);
  }
  return jac;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Stage maps

/// Factorization F(q, u) = E(q, f(q, u)) through a vector-bundle fibre.
struct Factorization {
  int fibre_dim = 0;
  std::function<VectorXd(const Point&, const Point&)> fibre_map;   // f(q, u)
  std::function<Point(const Point&, const VectorXd&)> bundle_map;  // E(q, x)
  // Optional analytic fibre derivative FE_v as a dim(Q) x fibre_dim matrix.
  std::function<MatrixXd(const Point&, const VectorXd&)> fibre_jacobian;
  bool affine_in_control = false;
};

struct Stage {
  Manifold state = Manifold::euclidean(0);
  Manifold control = Manifold::euclidean(0);
  std::function<Point(const Point&, const Point&)> map;
  // Optional analytic pushforwards in trivialized coordinates.
  std::function<MatrixXd(const Point&, const Point&)> jac_state;
  std::function<MatrixXd(const Point&, const Point&)> jac_control;
  std::optional<Factorization> factored;

  bool analytic_jacobians() const { return bool(jac_state) && bool(jac_control); }
};

inline Stage make_stage(Manifold state, Manifold control,
                        std::function<Point(const Point&, const Point&)> map) {
  Stage s;
  s.state = std::move(state);
  s.control = std::move(control);
  s.map = std::move(map);
  return s;
}

inline Stage make_factored_stage(Manifold state, Manifold control, Factorization fac) {
  Stage s;
  s.state = std::move(state);
  s.control = std::move(control);
  s.factored = std::move(fac);
  s.map = [f = s.factored->fibre_map, E = s.factored->bundle_map](const Point& q, const Point& u) {
    return E(q, f(q, u));
  };
  return s;
}

/// D_q F in trivialized coordinates (analytic when supplied, else central
/// finite differences through retractions with step 1e-6).
inline MatrixXd stage_jac_state(const Stage& s, const Point& q, const Point& u) {
  if (s.jac_state) return s.jac_state(q, u);
  return detail::fd_differential([&](const Point& x) { return s.map(x, u); }, q);
}

inline MatrixXd stage_jac_control(const Stage& s, const Point& q, const Point& u) {
  if (s.jac_control) return s.jac_control(q, u);
  return detail::fd_differential([&](const Point& x) { return s.map(q, x); }, u);
}

/// Fibre derivative FE_v at v = f(q, u) as a matrix.
inline MatrixXd fibre_derivative(const Stage& s, const Point& q, const Point& u) {
  if (!s.factored) throw std::invalid_argument("fibre_derivative: stage is not factored");
  const Factorization& f = *s.factored;
  const VectorXd v = f.fibre_map(q, u);
  if (f.fibre_jacobian) return f.fibre_jacobian(q, v);
  const Point y0 = f.bundle_map(q, v);
  MatrixXd jac(y0.manifold().dim(), f.fibre_dim);
  for (int k = 0; k < f.fibre_dim; ++k) {
    VectorXd e = VectorXd::Zero(f.fibre_dim);
    e[k] = detail::kFdStep;
    const Point yp = f.bundle_map(q, VectorXd(v + e));
    const Point ym = f.bundle_map(q, VectorXd(v - e));
    jac.col(k) = (local_coords(y0, yp) - local_coords(y0, ym)) / (2.0 * detail::kFdStep);
  }
  return jac;
}

/// Pullback FE* p of a costate through the fibre derivative; p must be based
/// at F(q, u).
inline VectorXd fibre_derivative_pullback(const Stage& s, const Point& q, const Point& u,
                                          const Cotangent& p) {
  if (!s.factored) throw std::invalid_argument("fibre_derivative_pullback: stage is not factored");
  const Point y = s.map(q, u);
  require_same_manifold(y.manifold(), p.base.manifold(), "fibre_derivative_pullback");
  if ((y.coords() - p.base.coords()).lpNorm<Eigen::Infinity>() > 1e-9) {
    throw std::invalid_argument("fibre_derivative_pullback: costate based at a different point");
  }
  return fibre_derivative(s, q, u).transpose() * p.covec;
}

// --------------------------------------------------------------------------
// Control sets

/// Tangent cone at a point described by halfspace normals:
/// cone = { v : n . v <= 0 for every listed normal }, the whole space when
/// the list is empty.
struct TangentCone {
  int dim = 0;
  std::vector<VectorXd> normals;
  bool whole() const { return normals.empty(); }
};

namespace detail {

/// Euclidean projection onto an intersection of halfspaces {n.v <= c} by
/// Dykstra's alternating projections.
inline VectorXd dykstra_project(const std::vector<VectorXd>& normals, const std::vector<double>& offsets,
                                const VectorXd& x, int max_cycles = 20000, double tol = 1e-14) {
  VectorXd y = x;
  std::vector<VectorXd> corr(normals.size(), VectorXd::Zero(x.size()));
  const double scale = 1.0 + x.norm();
  for (int cycle = 0; cycle < max_cycles; ++cycle) {
    const VectorXd y_before = y;
    for (std::size_t i = 0; i < normals.size(); ++i) {
      const VectorXd z = y + corr[i];
      const double viol = normals[i].dot(z) - offsets[i];
      if (viol > 0.0) {
        y = z - viol / normals[i].squaredNorm() * normals[i];
      } else {
        y = z;
      }
      corr[i] = z - y;
    }
    if ((y - y_before).norm() <= tol * scale) break;
  }
  return y;
}

}  // namespace detail

/// Admissible control sets: the whole manifold, or convex subsets of a
/// Euclidean control space (box, polytope, ball). Nonemptiness of polytopes
/// is certified by a stored witness.
class ControlSet {
 public:
  enum class Kind { Whole, Box, Polytope, Ball };

  static ControlSet whole(Manifold m) { return ControlSet(std::move(m), Kind::Whole); }

  static ControlSet box(Manifold m, VectorXd lo, VectorXd hi) {
    require_euclidean(m, "ControlSet::box");
    if (lo.size() != m.dim() || hi.size() != m.dim() || (lo.array() > hi.array()).any()) {
      throw std::invalid_argument("ControlSet::box: invalid bounds");
    }
    ControlSet s(std::move(m), Kind::Box);
    s.lo_ = std::move(lo);
    s.hi_ = std::move(hi);
    return s;
  }

  static ControlSet polytope(Manifold m, MatrixXd A, VectorXd b, VectorXd witness) {
    require_euclidean(m, "ControlSet::polytope");
    if (A.cols() != m.dim() || A.rows() != b.size() || witness.size() != m.dim()) {
      throw std::invalid_argument("ControlSet::polytope: dimension mismatch");
    }
    if (((A * witness - b).array() > 1e-12).any()) {
      throw std::invalid_argument("ControlSet::polytope: witness point is infeasible");
    }
    ControlSet s(std::move(m), Kind::Polytope);
    s.A_ = std::move(A);
    s.b_ = std::move(b);
    s.witness_ = std::move(witness);
    return s;
  }

  static ControlSet ball(Manifold m, VectorXd center, double radius) {
    require_euclidean(m, "ControlSet::ball");
    if (center.size() != m.dim() || radius <= 0.0) {
      throw std::invalid_argument("ControlSet::ball: invalid parameters");
    }
    ControlSet s(std::move(m), Kind::Ball);
    s.center_ = std::move(center);
    s.radius_ = radius;
    return s;
  }

  const Manifold& manifold() const { return m_; }
  Kind kind() const { return kind_; }
  bool whole_manifold() const { return kind_ == Kind::Whole; }

  bool contains(const Point& u, double tol = 1e-9) const {
    require_same_manifold(m_, u.manifold(), "ControlSet::contains");
    switch (kind_) {
      case Kind::Whole:
        return true;
      case Kind::Box:
        return ((u.coords().array() >= lo_.array() - tol) &&
                (u.coords().array() <= hi_.array() + tol))
            .all();
      case Kind::Polytope:
        return ((A_ * u.coords() - b_).array() <= tol).all();
      case Kind::Ball:
        return (u.coords() - center_).norm() <= radius_ + tol;
    }
    return false;
  }

  /// Euclidean projection onto the set (identity on whole manifolds).
  Point project(const Point& u) const {
    require_same_manifold(m_, u.manifold(), "ControlSet::project");
    switch (kind_) {
      case Kind::Whole:
        return u;
      case Kind::Box:
        return Point(m_, u.coords().cwiseMax(lo_).cwiseMin(hi_));
      case Kind::Ball: {
        const VectorXd r = u.coords() - center_;
        const double n = r.norm();
        if (n <= radius_) return u;
        return Point(m_, center_ + (radius_ / n) * r);
      }
      case Kind::Polytope: {
        std::vector<VectorXd> normals;
        std::vector<double> offsets;
        for (int i = 0; i < A_.rows(); ++i) {
          normals.push_back(A_.row(i).transpose());
          offsets.push_back(b_[i]);
        }
        return Point(m_, detail::dykstra_project(normals, offsets, u.coords()));
      }
    }
    return u;
  }

  /// Clarke tangent cone at a feasible point (for these convex sets, the
  /// closed cone of feasible directions), described by halfspace normals.
  TangentCone tangent_cone(const Point& u, double active_tol = 1e-9) const {
    if (!contains(u, active_tol)) {
      throw std::invalid_argument("ControlSet::tangent_cone: point is infeasible");
    }
    TangentCone cone;
    cone.dim = m_.dim();
    switch (kind_) {
      case Kind::Whole:
        break;
      case Kind::Box:
        for (int k = 0; k < m_.dim(); ++k) {
          if (u.coords()[k] <= lo_[k] + active_tol) {
            VectorXd n = VectorXd::Zero(m_.dim());
            n[k] = -1.0;
            cone.normals.push_back(n);
          }
          if (u.coords()[k] >= hi_[k] - active_tol) {
            VectorXd n = VectorXd::Zero(m_.dim());
            n[k] = 1.0;
            cone.normals.push_back(n);
          }
        }
        break;
      case Kind::Polytope:
        for (int i = 0; i < A_.rows(); ++i) {
          if (A_.row(i) * u.coords() - b_[i] >= -active_tol) {
            cone.normals.push_back(A_.row(i).transpose());
          }
        }
        break;
      case Kind::Ball:
        if ((u.coords() - center_).norm() >= radius_ - active_tol) {
          cone.normals.push_back(u.coords() - center_);
        }
        break;
    }
    return cone;
  }

  /// Polytope/box vertices (for maximization checks). Throws on unbounded
  /// kinds.
  std::vector<VectorXd> vertices() const {
    switch (kind_) {
      case Kind::Box: {
        const int d = m_.dim();
        if (d > 16) throw std::invalid_argument("ControlSet::vertices: box dimension too large");
        std::vector<VectorXd> out;
        for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
          VectorXd v(d);
          for (int k = 0; k < d; ++k) v[k] = (mask & (1u << k)) ? hi_[k] : lo_[k];
          out.push_back(v);
        }
        return out;
      }
      case Kind::Polytope: {
        const int d = m_.dim();
        const int m = static_cast<int>(A_.rows());
        if (m > 16) throw std::invalid_argument("ControlSet::vertices: too many rows");
        std::vector<VectorXd> out;
        std::vector<int> rows(d);
        std::function<void(int, int)> rec = [&](int start, int depth) {
          if (depth == d) {
            MatrixXd As(d, d);
            VectorXd bs(d);
            for (int r = 0; r < d; ++r) {
              As.row(r) = A_.row(rows[r]);
              bs[r] = b_[rows[r]];
            }
            Eigen::FullPivLU<MatrixXd> lu(As);
            if (!lu.isInvertible()) return;
            const VectorXd v = lu.solve(bs);
            if (((A_ * v - b_).array() <= 1e-9).all()) {
              for (const auto& w : out) {
                if ((w - v).norm() < 1e-9) return;
              }
              out.push_back(v);
            }
            return;
          }
          for (int r = start; r < m; ++r) {
            rows[depth] = r;
            rec(r + 1, depth + 1);
          }
        };
        rec(0, 0);
        return out;
      }
      default:
        throw std::invalid_argument("ControlSet::vertices: set has no vertex description");
    }
  }

  const VectorXd& box_lo() const { return lo_; }
  const VectorXd& box_hi() const { return hi_; }
  const MatrixXd& polytope_A() const { return A_; }
  const VectorXd& polytope_b() const { return b_; }
  const VectorXd& ball_center() const { return center_; }
  double ball_radius() const { return radius_; }

 private:
  ControlSet(Manifold m, Kind kind) : m_(std::move(m)), kind_(kind) {}

  static void require_euclidean(const Manifold& m, const char* where) {
    if (m.kind() != Manifold::Kind::Euclidean) {
      throw std::invalid_argument(std::string(where) +
                                  ": only Euclidean control manifolds carry this set");
    }
  }

  Manifold m_;
  Kind kind_;
  VectorXd lo_, hi_;
  MatrixXd A_;
  VectorXd b_;
  VectorXd witness_;
  VectorXd center_;
  double radius_ = 0.0;
};

/// Euclidean projection of w onto the Clarke tangent cone of the set at u.
/// Idempotent; returns w unchanged at interior points.
inline VectorXd tangent_cone_project(const ControlSet& set, const Point& u, const VectorXd& w) {
  const TangentCone cone = set.tangent_cone(u);
  if (cone.whole()) return w;
  std::vector<double> offsets(cone.normals.size(), 0.0);
  return detail::dykstra_project(cone.normals, offsets, w);
}

/// Metric projection of w onto the cone, i.e. the minimizer of ||w - v||_g
/// over the cone. Used by the criticality certificate; reduces to the
/// Euclidean projection for identity metrics.
inline VectorXd tangent_cone_project(const ControlSet& set, const Point& u, const VectorXd& w,
                                     const Metric& metric) {
  if (metric.is_identity()) return tangent_cone_project(set, u, w);
  const TangentCone cone = set.tangent_cone(u);
  if (cone.whole()) return w;
  const MatrixXd G = metric.form();
  const Eigen::LLT<MatrixXd> llt(G);
  const MatrixXd L = llt.matrixL();
  // Whitened coordinates: v~ = L^T v, halfspace normal a becomes L^{-1} a.
  std::vector<VectorXd> normals;
  std::vector<double> offsets;
  for (const auto& a : cone.normals) {
    normals.push_back(L.triangularView<Eigen::Lower>().solve(a));
    offsets.push_back(0.0);
  }
  const VectorXd w_white = L.transpose() * w;
  const VectorXd v_white = detail::dykstra_project(normals, offsets, w_white);
  return L.transpose().triangularView<Eigen::Upper>().solve(v_white);
}

// --------------------------------------------------------------------------
// Control systems and trajectories

struct ControlSystem {
  Manifold state = Manifold::euclidean(0);
  std::vector<Stage> stages;
  std::vector<ControlSet> control_sets;

  int horizon() const { return static_cast<int>(stages.size()); }
};

inline ControlSystem make_control_system(Manifold state, std::vector<Stage> stages,
                                         std::vector<ControlSet> control_sets) {
  if (stages.empty()) throw std::invalid_argument("make_control_system: no stages");
  if (control_sets.size() != stages.size()) {
    throw std::invalid_argument("make_control_system: one control set per stage required");
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    require_same_manifold(state, stages[i].state, "make_control_system (stage state)");
    require_same_manifold(stages[i].control, control_sets[i].manifold(),
                          "make_control_system (control set)");
  }
  return ControlSystem{std::move(state), std::move(stages), std::move(control_sets)};
}

struct Trajectory {
  std::vector<Point> states;    // q_0 .. q_n
  std::vector<Point> controls;  // u_0 .. u_{n-1}

  int horizon() const { return static_cast<int>(controls.size()); }
};

inline Trajectory rollout(const ControlSystem& sys, const Point& q0,
                          const std::vector<Point>& controls) {
  require_same_manifold(sys.state, q0.manifold(), "rollout");
  if (static_cast<int>(controls.size()) != sys.horizon()) {
    throw std::invalid_argument("rollout: expected " + std::to_string(sys.horizon()) +
                                " controls, got " + std::to_string(controls.size()));
  }
  Trajectory traj;
  traj.states.reserve(sys.horizon() + 1);
  traj.controls = controls;
  traj.states.push_back(q0);
  for (int i = 0; i < sys.horizon(); ++i) {
    require_same_manifold(sys.stages[i].control, controls[i].manifold(), "rollout (control)");
    traj.states.push_back(sys.stages[i].map(traj.states.back(), controls[i]));
  }
  return traj;
}

/// Checks the dynamics residual at every stage; throws naming the first
/// violated stage.
inline void validate_trajectory(const ControlSystem& sys, const Trajectory& traj,
                                double tol = 1e-10) {
  if (static_cast<int>(traj.states.size()) != sys.horizon() + 1 ||
      traj.horizon() != sys.horizon()) {
    throw std::invalid_argument("validate_trajectory: length mismatch with system horizon");
  }
  for (int i = 1; i <= sys.horizon(); ++i) {
    const Point expect = sys.stages[i - 1].map(traj.states[i - 1], traj.controls[i - 1]);
    const double res = (traj.states[i].coords() - expect.coords()).norm();
    if (res > tol) {
      throw std::invalid_argument("validate_trajectory: dynamics residual " + std::to_string(res) +
                                  " at state " + std::to_string(i));
    }
  }
}

inline bool is_valid_trajectory(const ControlSystem& sys, const Trajectory& traj,
                                double tol = 1e-10) {
  try {
    validate_trajectory(sys, traj, tol);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

/// Transition Jacobian F_{i,j} : T_{q_i} -> T_{q_j} (identity when i == j).
inline MatrixXd transition_jacobian(const ControlSystem& sys, const Trajectory& traj, int i,
                                    int j) {
  if (i < 0 || j > sys.horizon() || i > j) {
    throw std::invalid_argument("transition_jacobian: need 0 <= i <= j <= n");
  }
  MatrixXd acc = MatrixXd::Identity(sys.state.dim(), sys.state.dim());
  for (int k = i; k < j; ++k) {
    acc = stage_jac_state(sys.stages[k], traj.states[k], traj.controls[k]) * acc;
  }
  return acc;
}

/// Forward variational equation: tangent coordinates of q_j'(0) for a
/// control direction sequence v. Slot 0 of the result is zero (the initial
/// state does not vary).
inline std::vector<VectorXd> forward_variation(const ControlSystem& sys, const Trajectory& traj,
                                               const std::vector<VectorXd>& v) {
  if (static_cast<int>(v.size()) != sys.horizon()) {
    throw std::invalid_argument("forward_variation: one direction per stage required");
  }
  std::vector<VectorXd> w(sys.horizon() + 1);
  w[0] = VectorXd::Zero(sys.state.dim());
  for (int i = 0; i < sys.horizon(); ++i) {
    if (v[i].size() != sys.stages[i].control.dim()) {
      throw std::invalid_argument("forward_variation: direction dimension mismatch at stage " +
                                  std::to_string(i));
    }
    const MatrixXd jq = stage_jac_state(sys.stages[i], traj.states[i], traj.controls[i]);
    const MatrixXd ju = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
    w[i + 1] = jq * w[i] + ju * v[i];
  }
  return w;
}

}  // namespace dgmp

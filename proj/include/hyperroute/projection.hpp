#pragma once

#include "hyperroute/common.hpp"
#include "hyperroute/qp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>
#include <vector>

namespace hyperroute {

// ---------------------------------------------------------------------------
// Polyhedron  { y : A_eq y = b_eq,  A_in y <= b_in,  lb <= y <= ub }
// ---------------------------------------------------------------------------
struct Polyhedron {
  Mat A_eq;  // may have 0 rows
  Vec b_eq;
  Mat A_in;  // may have 0 rows
  Vec b_in;
  Vec lb;
  Vec ub;
  Vec feasible_point;  // certified at construction

  int dim() const { return static_cast<int>(lb.size()); }
  int num_eq() const { return static_cast<int>(b_eq.size()); }
  int num_in() const { return static_cast<int>(b_in.size()); }

  double rhs_scale() const {
    double s = 0;
    if (num_eq() > 0) s = std::max(s, b_eq.cwiseAbs().maxCoeff());
    if (num_in() > 0) s = std::max(s, b_in.cwiseAbs().maxCoeff());
    if (dim() > 0) {
      s = std::max(s, lb.cwiseAbs().maxCoeff());
      s = std::max(s, ub.cwiseAbs().maxCoeff());
    }
    return s;
  }

  double feasibility_violation(const Vec& y) const {
    double v = 0;
    if (num_eq() > 0) v = std::max(v, (A_eq * y - b_eq).cwiseAbs().maxCoeff());
    if (num_in() > 0) v = std::max(v, (A_in * y - b_in).maxCoeff());
    v = std::max(v, (lb - y).maxCoeff());
    v = std::max(v, (y - ub).maxCoeff());
    return std::max(v, 0.0);
  }
};

struct ProjectionResult {
  Vec point;
  Vec eq_duals;      // free sign
  Vec in_duals;      // >= 0
  Vec box_lo_duals;  // >= 0, active lower faces
  Vec box_up_duals;  // >= 0, active upper faces
  double kkt_residual = kInf;
  int iterations = 0;
  bool polished = false;
};

// Inequality/box rows classified as active at a projection result. Both box
// faces of a pinned coordinate (lb == ub) collapse onto one entry.
struct ActiveSet {
  std::vector<int> in_rows;
  std::vector<int> box_coords;
  std::vector<double> in_margins;   // slack of the active inequality rows
  std::vector<double> box_margins;  // distance to the nearest active face
  double tol_slack = 0;
};

// ---------------------------------------------------------------------------
// Projection onto a polyhedron: argmin 1/2 || y - z ||^2 s.t. y in poly.
// One projector instance per polyhedron; the ADMM KKT factorization and warm
// state are cached across calls, which is what makes the equilibrium inner
// loop cheap.
// ---------------------------------------------------------------------------
class PolyhedronProjector {
 public:
  explicit PolyhedronProjector(Polyhedron poly, double tol = 1e-10,
                               int max_iter = 200000)
      : poly_(std::move(poly)), tol_(tol) {
    const int n = poly_.dim();
    const int ke = poly_.num_eq(), ki = poly_.num_in();
    QpProblem qp;
    qp.P = Mat::Identity(n, n);
    qp.q = Vec::Zero(n);
    qp.A = Mat::Zero(ke + ki + n, n);
    qp.l = Vec::Zero(ke + ki + n);
    qp.u = Vec::Zero(ke + ki + n);
    if (ke > 0) {
      qp.A.topRows(ke) = poly_.A_eq;
      qp.l.head(ke) = poly_.b_eq;
      qp.u.head(ke) = poly_.b_eq;
    }
    if (ki > 0) {
      qp.A.middleRows(ke, ki) = poly_.A_in;
      qp.l.segment(ke, ki).setConstant(-kInf);
      qp.u.segment(ke, ki) = poly_.b_in;
    }
    qp.A.bottomRows(n) = Mat::Identity(n, n);
    qp.l.tail(n) = poly_.lb;
    qp.u.tail(n) = poly_.ub;
    QpSettings st;
    st.eps_abs = std::min(tol_, 1e-9);
    st.eps_rel = st.eps_abs;
    st.max_iter = max_iter;
    solver_ = std::make_unique<AdmmQpSolver>(std::move(qp), st);
  }

  const Polyhedron& poly() const { return poly_; }
  double tol() const { return tol_; }

  ProjectionResult project(const Vec& z) {
    require_dims(z.size() == poly_.dim(), "project: point dimension mismatch");
    solver_->set_linear_cost(-z);
    QpSolution sol = solver_->solve();
    ProjectionResult res = unpack(z, sol);
    if (res.kkt_residual > tol_) {
      // one cold retry before giving up
      solver_->reset_warm_start();
      sol = solver_->solve();
      ProjectionResult retry = unpack(z, sol);
      if (retry.kkt_residual < res.kkt_residual) res = retry;
      if (res.kkt_residual > tol_)
        throw ConvergenceError("project: QP did not reach tolerance " +
                                   std::to_string(tol_),
                               res.kkt_residual);
    }
    return res;
  }

  ProjectionResult project_cold(const Vec& z) {
    solver_->reset_warm_start();
    return project(z);
  }

 private:
  ProjectionResult unpack(const Vec& z, const QpSolution& sol) const {
    const int n = poly_.dim();
    const int ke = poly_.num_eq(), ki = poly_.num_in();
    ProjectionResult r;
    r.point = sol.x;
    r.iterations = sol.iterations;
    r.polished = sol.polished;
    r.eq_duals = ke > 0 ? Vec(sol.y.head(ke)) : Vec();
    r.in_duals = ki > 0 ? Vec(sol.y.segment(ke, ki).cwiseMax(0.0)) : Vec();
    Vec ybox = sol.y.tail(n);
    r.box_up_duals = ybox.cwiseMax(0.0);
    r.box_lo_duals = (-ybox).cwiseMax(0.0);

    double prim = poly_.feasibility_violation(r.point);
    Vec stat = r.point - z;
    if (ke > 0) stat.noalias() += poly_.A_eq.transpose() * r.eq_duals;
    if (ki > 0) stat.noalias() += poly_.A_in.transpose() * r.in_duals;
    stat += r.box_up_duals - r.box_lo_duals;
    double comp = 0;
    if (ki > 0) {
      Vec slack = poly_.b_in - poly_.A_in * r.point;
      comp = r.in_duals.cwiseProduct(slack).cwiseAbs().maxCoeff();
    }
    comp = std::max(comp, r.box_lo_duals.cwiseProduct(r.point - poly_.lb)
                              .cwiseAbs()
                              .maxCoeff());
    comp = std::max(comp, r.box_up_duals.cwiseProduct(poly_.ub - r.point)
                              .cwiseAbs()
                              .maxCoeff());
    r.kkt_residual = std::max({prim, stat.cwiseAbs().maxCoeff(), comp});
    return r;
  }

  Polyhedron poly_;
  double tol_;
  std::unique_ptr<AdmmQpSolver> solver_;
};

// Certifies nonemptiness by producing a feasible point (projection of the box
// midpoint when no candidate is supplied).
inline void certify_nonempty(Polyhedron& poly, double tol = 1e-7) {
  if (poly.feasible_point.size() == poly.dim() &&
      poly.feasibility_violation(poly.feasible_point) <= tol)
    return;
  Vec mid = 0.5 * (poly.lb + poly.ub);
  PolyhedronProjector proj(poly, 1e-9);
  try {
    auto res = proj.project(mid);
    if (poly.feasibility_violation(res.point) <= tol) {
      poly.feasible_point = res.point;
      return;
    }
  } catch (const ConvergenceError&) {
    // fall through to the error below
  }
  throw InfeasibleError("polyhedron certification failed: no feasible point found");
}

// Classification rule: a row is active iff its slack is at most
// 1e-6 * (1 + ||rhs||_inf). Weakly active rows (tiny dual) are deliberately
// kept, which pins down one deterministic element of the conservative
// Jacobian of the projection.
inline ActiveSet classify_active(const Polyhedron& poly,
                                 const ProjectionResult& res) {
  ActiveSet as;
  as.tol_slack = 1e-6 * (1.0 + poly.rhs_scale());
  if (poly.num_in() > 0) {
    Vec slack = poly.b_in - poly.A_in * res.point;
    for (int i = 0; i < poly.num_in(); ++i) {
      if (slack[i] <= as.tol_slack) {
        as.in_rows.push_back(i);
        as.in_margins.push_back(slack[i]);
      }
    }
  }
  for (int j = 0; j < poly.dim(); ++j) {
    double lo = res.point[j] - poly.lb[j];
    double hi = poly.ub[j] - res.point[j];
    double m = std::min(lo, hi);
    if (m <= as.tol_slack) {
      as.box_coords.push_back(j);
      as.box_margins.push_back(m);
    }
  }
  return as;
}

// ---------------------------------------------------------------------------
// Derivative of the projection w.r.t. its input: the orthogonal projector
// onto the null space of the active rows,
//   D = I - E' (E E')^+ E,   E = [A_eq; active A_in rows; active box rows],
// computed through a rank-revealing QR of E'. Redundant rows (e.g. flow
// conservation combined with pinned box faces) are expected and harmless.
// ---------------------------------------------------------------------------
inline Mat projection_jacobian(const Polyhedron& poly, const ProjectionResult& res,
                               const ActiveSet& active) {
  (void)res;
  const int n = poly.dim();
  const int rows = poly.num_eq() + static_cast<int>(active.in_rows.size()) +
                   static_cast<int>(active.box_coords.size());
  if (rows == 0) return Mat::Identity(n, n);
  Mat Et(n, rows);  // transposed active-row matrix
  int c = 0;
  for (int i = 0; i < poly.num_eq(); ++i) Et.col(c++) = poly.A_eq.row(i).transpose();
  for (int i : active.in_rows) Et.col(c++) = poly.A_in.row(i).transpose();
  for (int j : active.box_coords) {
    Et.col(c).setZero();
    Et(j, c) = 1.0;
    ++c;
  }
  if (!Et.allFinite())
    throw NumericalRankError("projection_jacobian: active rows contain non-finite entries",
                             kInf);
  Eigen::ColPivHouseholderQR<Mat> qr(Et);
  Vec rdiag = qr.matrixR().diagonal().head(std::min(n, rows)).cwiseAbs();
  double dmax = rdiag.size() > 0 ? rdiag.maxCoeff() : 0.0;
  if (!std::isfinite(dmax))
    throw NumericalRankError("projection_jacobian: QR produced non-finite diagonal",
                             kInf);
  int rank = 0;
  const double thresh = 1e-9 * dmax;
  while (rank < rdiag.size() && rdiag[rank] > thresh) ++rank;
  if (rank == 0) return Mat::Identity(n, n);
  Mat Q = qr.householderQ() * Mat::Identity(n, rank);
  Mat D = Mat::Identity(n, n);
  D.noalias() -= Q * Q.transpose();
  return D;
}

// ---------------------------------------------------------------------------
// Partial Jacobians of one step of the fixed-point map
//   h(c, y, sigma) = Proj[ y - gamma * F(c, y, sigma) ]
// by the chain rule through the projection derivative D. The partials of F
// are constant matrices for this game (F is affine).
// ---------------------------------------------------------------------------
struct StepJacobians {
  Mat S1;  // d h / d c      (n_i x m)
  Mat S2;  // d h / d y_i    (n_i x n_i)
  Mat S3;  // d h / d sigma  (n_i x n_e)
};

inline StepJacobians step_jacobians(const Mat& D, double gamma, const Mat& dF_dc,
                                    const Mat& dF_dy, const Mat& dF_dsigma) {
  const auto n = D.rows();
  require_dims(D.cols() == n && dF_dc.rows() == n && dF_dy.rows() == n &&
                   dF_dy.cols() == n && dF_dsigma.rows() == n,
               "step_jacobians: dimension mismatch");
  StepJacobians s;
  s.S1.noalias() = D * (-gamma * dF_dc);
  s.S2.noalias() = D * (Mat::Identity(n, n) - gamma * dF_dy);
  s.S3.noalias() = D * (-gamma * dF_dsigma);
  return s;
}

}  // namespace hyperroute

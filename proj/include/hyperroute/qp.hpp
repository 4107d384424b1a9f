#pragma once

#include "hyperroute/common.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace hyperroute {

// ---------------------------------------------------------------------------
// Dense convex QP solver
//
//   minimize    1/2 x' P x + q' x
//   subject to  l <= A x <= u
//
// Operator-splitting (ADMM) iteration with Ruiz equilibration, adaptive rho,
// and an active-set KKT polish step that upgrades the first-order solution to
// near machine precision when the active set is identified correctly.
// Equality rows are encoded as l_i == u_i. P may be zero (LP).
//
// The KKT factorization depends only on (P, A, rho), so a solver instance is
// reusable across many right-hand sides: set_linear_cost() + solve() keep the
// cached factor and warm-start from the previous solution.
// ---------------------------------------------------------------------------

struct QpProblem {
  Mat P;  // n x n, symmetric PSD (may be 0)
  Vec q;  // n
  Mat A;  // k x n
  Vec l;  // k, may contain -inf
  Vec u;  // k, may contain +inf
};

struct QpSettings {
  double eps_abs = 1e-9;
  double eps_rel = 1e-9;
  int max_iter = 100000;
  double sigma = 1e-6;
  double alpha = 1.6;
  double rho0 = 0.1;
  double rho_eq_scale = 1e3;  // stiffer rho on equality rows
  bool adaptive_rho = true;
  bool polish = true;
  double polish_delta = 1e-10;
  int scaling_iters = 10;
  int check_interval = 25;
};

struct QpSolution {
  Vec x;  // primal
  Vec y;  // row multipliers: y_i < 0 <=> lower bound active, > 0 <=> upper
  Vec z;  // A x at the solution (clamped copy)
  double prim_res = kInf;
  double dual_res = kInf;
  int iterations = 0;
  bool converged = false;
  bool polished = false;
};

class AdmmQpSolver {
 public:
  explicit AdmmQpSolver(QpProblem prob, QpSettings settings = {})
      : prob_(std::move(prob)), st_(settings) {
    n_ = static_cast<int>(prob_.q.size());
    k_ = static_cast<int>(prob_.l.size());
    require_dims(prob_.P.rows() == n_ && prob_.P.cols() == n_,
                 "AdmmQpSolver: P dimension mismatch");
    require_dims(prob_.A.rows() == k_ && prob_.A.cols() == n_ &&
                     prob_.u.size() == k_,
                 "AdmmQpSolver: A/l/u dimension mismatch");
    equilibrate();
    rho_ = Vec::Constant(k_, st_.rho0);
    for (int i = 0; i < k_; ++i)
      if (ls_[i] == us_[i]) rho_[i] *= st_.rho_eq_scale;
    factorize();
    x_ = Vec::Zero(n_);
    y_ = Vec::Zero(k_);
    z_ = Vec::Zero(k_);
  }

  // Replaces q, keeping scaling, factorization and warm-start state.
  void set_linear_cost(const Vec& q) {
    require_dims(q.size() == n_, "set_linear_cost: size mismatch");
    prob_.q = q;
    qs_ = cost_scale_ * d_.cwiseProduct(q);
  }

  void reset_warm_start() {
    x_.setZero();
    y_.setZero();
    z_.setZero();
  }

  void warm_start(const Vec& x, const Vec& y) {
    x_ = x.cwiseQuotient(d_);
    y_ = y.cwiseQuotient(e_) * cost_scale_;
    z_ = As_ * x_;
    for (int i = 0; i < k_; ++i) z_[i] = std::clamp(z_[i], ls_[i], us_[i]);
  }

  const QpProblem& problem() const { return prob_; }
  int num_vars() const { return n_; }
  int num_rows() const { return k_; }

  QpSolution solve() {
    QpSolution best;
    double best_score = kInf;
    int iter = 0;
    while (iter < st_.max_iter) {
      for (int inner = 0; inner < st_.check_interval && iter < st_.max_iter;
           ++inner, ++iter) {
        step();
      }
      QpSolution cur = current_solution();
      cur.iterations = iter;
      double score = std::max(cur.prim_res, cur.dual_res);
      if (score < best_score) {
        best_score = score;
        best = cur;
      }
      if (terminated(cur)) {
        best = cur;
        break;
      }
      if (st_.adaptive_rho) maybe_update_rho();
    }
    best.iterations = iter;
    best.converged = terminated(best);
    if (st_.polish) try_polish(best);
    return best;
  }

 private:
  // --- scaling -------------------------------------------------------------
  void equilibrate() {
    d_ = Vec::Ones(n_);
    e_ = Vec::Ones(k_);
    cost_scale_ = 1.0;
    Ps_ = prob_.P;
    As_ = prob_.A;
    qs_ = prob_.q;
    ls_ = prob_.l;
    us_ = prob_.u;
    for (int it = 0; it < st_.scaling_iters; ++it) {
      Vec dc(n_), ec(k_);
      for (int j = 0; j < n_; ++j) {
        double m = Ps_.col(j).cwiseAbs().maxCoeff();
        if (k_ > 0) m = std::max(m, As_.col(j).cwiseAbs().maxCoeff());
        dc[j] = m > 0 ? 1.0 / std::sqrt(m) : 1.0;
      }
      for (int i = 0; i < k_; ++i) {
        double m = As_.row(i).cwiseAbs().maxCoeff();
        ec[i] = m > 0 ? 1.0 / std::sqrt(m) : 1.0;
      }
      Ps_ = dc.asDiagonal() * Ps_ * dc.asDiagonal();
      As_ = ec.asDiagonal() * As_ * dc.asDiagonal();
      d_ = d_.cwiseProduct(dc);
      e_ = e_.cwiseProduct(ec);
    }
    // cost normalization
    double pmax = Ps_.size() > 0 ? Ps_.cwiseAbs().colwise().maxCoeff().mean() : 0.0;
    qs_ = d_.cwiseProduct(prob_.q);
    double qnorm = qs_.size() > 0 ? qs_.cwiseAbs().maxCoeff() : 0.0;
    double denom = std::max(pmax, qnorm);
    cost_scale_ = denom > 0 ? 1.0 / denom : 1.0;
    Ps_ *= cost_scale_;
    qs_ *= cost_scale_;
    for (int i = 0; i < k_; ++i) {
      ls_[i] = std::isfinite(prob_.l[i]) ? e_[i] * prob_.l[i] : prob_.l[i];
      us_[i] = std::isfinite(prob_.u[i]) ? e_[i] * prob_.u[i] : prob_.u[i];
    }
  }

  void factorize() {
    Mat K = Ps_;
    K.diagonal().array() += st_.sigma;
    K.noalias() += As_.transpose() * rho_.asDiagonal() * As_;
    llt_.compute(K);
    if (llt_.info() != Eigen::Success)
      throw ConvergenceError("AdmmQpSolver: KKT factorization failed", kInf);
  }

  void step() {
    // x update
    Vec rhs = st_.sigma * x_ - qs_;
    rhs.noalias() += As_.transpose() * (rho_.cwiseProduct(z_) - y_);
    Vec xt = llt_.solve(rhs);
    Vec zt = As_ * xt;
    // relaxed updates
    Vec x_next = st_.alpha * xt + (1 - st_.alpha) * x_;
    Vec z_relax = st_.alpha * zt + (1 - st_.alpha) * z_;
    Vec z_cand = z_relax + y_.cwiseQuotient(rho_);
    Vec z_next(k_);
    for (int i = 0; i < k_; ++i) z_next[i] = std::clamp(z_cand[i], ls_[i], us_[i]);
    y_ += rho_.cwiseProduct(z_relax - z_next);
    x_ = x_next;
    z_ = z_next;
  }

  // Unscaled solution and residuals from the current scaled iterates.
  QpSolution current_solution() const {
    QpSolution s;
    s.x = d_.cwiseProduct(x_);
    s.y = e_.cwiseProduct(y_) / cost_scale_;
    s.z = e_.cwiseInverse().cwiseProduct(z_);
    Vec Ax = prob_.A * s.x;
    s.prim_res = k_ > 0 ? (Ax - s.z).cwiseAbs().maxCoeff() : 0.0;
    Vec dres = prob_.P * s.x + prob_.q;
    if (k_ > 0) dres.noalias() += prob_.A.transpose() * s.y;
    s.dual_res = dres.cwiseAbs().maxCoeff();
    return s;
  }

  bool terminated(const QpSolution& s) const {
    Vec Ax = prob_.A * s.x;
    double p_scale =
        k_ > 0 ? std::max(Ax.cwiseAbs().maxCoeff(), s.z.cwiseAbs().maxCoeff()) : 0.0;
    Vec Px = prob_.P * s.x;
    Vec Aty = k_ > 0 ? Vec(prob_.A.transpose() * s.y) : Vec::Zero(n_);
    double d_scale = std::max({Px.cwiseAbs().maxCoeff(),
                               prob_.q.cwiseAbs().maxCoeff(),
                               Aty.cwiseAbs().maxCoeff()});
    return s.prim_res <= st_.eps_abs + st_.eps_rel * p_scale &&
           s.dual_res <= st_.eps_abs + st_.eps_rel * d_scale;
  }

  void maybe_update_rho() {
    QpSolution s = current_solution();
    Vec Ax = prob_.A * s.x;
    double pn = std::max(
        {Ax.cwiseAbs().maxCoeff(), s.z.cwiseAbs().maxCoeff(), 1e-12});
    Vec Px = prob_.P * s.x;
    Vec Aty = prob_.A.transpose() * s.y;
    double dn = std::max({Px.cwiseAbs().maxCoeff(), prob_.q.cwiseAbs().maxCoeff(),
                          Aty.cwiseAbs().maxCoeff(), 1e-12});
    double ratio = std::sqrt((s.prim_res / pn) / std::max(s.dual_res / dn, 1e-16));
    ratio = std::clamp(ratio, 1e-3, 1e3);
    if (ratio > 5.0 || ratio < 0.2) {
      double base = std::clamp(st_.rho0 * ratio, 1e-6, 1e6);
      st_.rho0 = base;
      for (int i = 0; i < k_; ++i)
        rho_[i] = ls_[i] == us_[i] ? base * st_.rho_eq_scale : base;
      factorize();
    }
  }

  // --- polish ----------------------------------------------------------------
  // Solves the equality-constrained KKT system on the active rows guessed from
  // the multiplier signs, with regularization + iterative refinement. Accepted
  // only if it does not degrade either residual.
  void try_polish(QpSolution& s) const {
    std::vector<int> lo, up;
    for (int i = 0; i < k_; ++i) {
      if (prob_.l[i] == prob_.u[i]) {
        up.push_back(i);  // equality row
        continue;
      }
      double prox_l = std::isfinite(prob_.l[i])
                          ? std::abs(s.z[i] - prob_.l[i]) /
                                (1.0 + std::abs(prob_.l[i]))
                          : kInf;
      double prox_u = std::isfinite(prob_.u[i])
                          ? std::abs(s.z[i] - prob_.u[i]) /
                                (1.0 + std::abs(prob_.u[i]))
                          : kInf;
      if (s.y[i] < 0 || (prox_l <= 1e-7 && prox_l <= prox_u)) {
        lo.push_back(i);
      } else if (s.y[i] > 0 || prox_u <= 1e-7) {
        up.push_back(i);
      }
    }
    const int na = static_cast<int>(lo.size() + up.size());
    const int dim = n_ + na;
    Mat K = Mat::Zero(dim, dim);
    K.topLeftCorner(n_, n_) = prob_.P;
    K.topLeftCorner(n_, n_).diagonal().array() += st_.polish_delta;
    Vec rhs(dim);
    rhs.head(n_) = -prob_.q;
    int r = n_;
    for (int i : lo) {
      K.row(r).head(n_) = prob_.A.row(i);
      K.col(r).head(n_) = prob_.A.row(i).transpose();
      K(r, r) = -st_.polish_delta;
      rhs[r] = prob_.l[i];
      ++r;
    }
    for (int i : up) {
      K.row(r).head(n_) = prob_.A.row(i);
      K.col(r).head(n_) = prob_.A.row(i).transpose();
      K(r, r) = -st_.polish_delta;
      rhs[r] = prob_.u[i];
      ++r;
    }
    Eigen::PartialPivLU<Mat> lu(K);
    Vec sol = lu.solve(rhs);
    // refinement against the unregularized system
    for (int ref = 0; ref < 3; ++ref) {
      Vec resid(dim);
      resid.head(n_) = prob_.P * sol.head(n_) + prob_.q;
      int rr = n_;
      for (int i : lo) {
        resid.head(n_) += prob_.A.row(i).transpose() * sol[rr];
        resid[rr] = prob_.A.row(i).dot(sol.head(n_)) - prob_.l[i];
        ++rr;
      }
      for (int i : up) {
        resid.head(n_) += prob_.A.row(i).transpose() * sol[rr];
        resid[rr] = prob_.A.row(i).dot(sol.head(n_)) - prob_.u[i];
        ++rr;
      }
      sol -= lu.solve(resid);
    }
    QpSolution pol;
    pol.x = sol.head(n_);
    pol.y = Vec::Zero(k_);
    {
      int rr = n_;
      for (int i : lo) pol.y[i] = sol[rr++];
      for (int i : up) pol.y[i] = sol[rr++];
    }
    // multiplier sign sanity on genuine inequalities
    for (int i : lo)
      if (ls_[i] != us_[i] && pol.y[i] > 0) pol.y[i] = 0;
    for (int i : up)
      if (ls_[i] != us_[i] && pol.y[i] < 0) pol.y[i] = 0;
    Vec Ax = prob_.A * pol.x;
    pol.z = Ax;
    for (int i = 0; i < k_; ++i)
      if (std::isfinite(prob_.l[i]) || std::isfinite(prob_.u[i]))
        pol.z[i] = std::clamp(pol.z[i],
                              std::isfinite(prob_.l[i]) ? prob_.l[i] : -kInf,
                              std::isfinite(prob_.u[i]) ? prob_.u[i] : kInf);
    pol.prim_res = k_ > 0 ? (Ax - pol.z).cwiseAbs().maxCoeff() : 0.0;
    Vec dres = prob_.P * pol.x + prob_.q;
    if (k_ > 0) dres.noalias() += prob_.A.transpose() * pol.y;
    pol.dual_res = dres.cwiseAbs().maxCoeff();
    if (!pol.x.allFinite() || !pol.y.allFinite()) return;
    if (pol.prim_res <= std::max(s.prim_res, st_.eps_abs) &&
        pol.dual_res <= std::max(s.dual_res, st_.eps_abs)) {
      pol.iterations = s.iterations;
      pol.converged = terminated(pol) || s.converged;
      pol.polished = true;
      s = pol;
    }
  }

  QpProblem prob_;
  QpSettings st_;
  int n_ = 0, k_ = 0;
  // scaled data
  Mat Ps_, As_;
  Vec qs_, ls_, us_, d_, e_;
  double cost_scale_ = 1.0;
  Vec rho_;
  Eigen::LLT<Mat> llt_;
  // scaled iterates (warm state)
  Vec x_, y_, z_;
};

}  // namespace hyperroute

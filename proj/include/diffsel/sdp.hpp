#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "diffsel/constraints.hpp"
#include "diffsel/graph.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

struct SdpSettings {
  double tol_gap = 1e-7;
  int max_iters = 200;
  double barrier_decrease = 0.2;
};

struct SdpProblem {
  Eigen::MatrixXd C;  // lifted (N+1)x(N+1) objective; solver minimizes <C,X>
  ConstraintSet cs;
  SdpSettings settings;
  int dim = 0;
};

enum class SolveStatus { Optimal, Infeasible, MaxIters };

inline std::string status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    default: return "max_iters";
  }
}

struct SdpSolution {
  Eigen::MatrixXd Z;       // lifted primal iterate
  Eigen::VectorXd duals;   // one multiplier per constraint row
  double objective_value = 0.0;  // <W,Y>/2, i.e. the maximization reading
  SolveStatus status = SolveStatus::MaxIters;
  struct {
    double primal_eq = 0.0, primal_ineq = 0.0, min_eig = 0.0, gap = 0.0;
  } residuals;
  double final_barrier = 0.0;
  int iterations = 0;
};

struct Selection {
  int answer_index = 0;
  std::vector<std::string> explanation_ids;
  Eigen::VectorXd node_probs;
};

// W lives (negated) in the lower-right block: maximizing <W,Y> over the lift
// is minimizing <C,X> with C = [[0,0],[0,-W]].
inline SdpProblem make_problem(const Eigen::MatrixXd& W, const ConstraintSet& cs,
                               const SdpSettings& settings = SdpSettings{}) {
  const int N = cs.N();
  if (W.rows() != N || W.cols() != N) throw ValidationError("weight matrix size mismatch");
  if (!W.allFinite()) throw ValidationError("weight matrix has non-finite entries");
  if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw ValidationError("weight matrix must be symmetric");
  if (W.diagonal().cwiseAbs().maxCoeff() > 1e-12)
    throw ValidationError("weight matrix must have zero diagonal");
  SdpProblem p;
  p.dim = N + 1;
  p.C = Eigen::MatrixXd::Zero(p.dim, p.dim);
  p.C.block(1, 1, N, N) = -W;
  p.cs = cs;
  p.settings = settings;
  return p;
}

namespace detail {

struct ExpandedRow {
  std::vector<std::tuple<int, int, double>> entries;  // both triangles
  double rhs = 0.0;
  bool ineq = false;
};

inline std::vector<ExpandedRow> expand_rows(const ConstraintSet& cs) {
  std::vector<ExpandedRow> out;
  out.reserve(cs.rows.size());
  for (const auto& c : cs.rows) {
    ExpandedRow r;
    r.rhs = c.rhs;
    r.ineq = c.sense == LinearConstraint::Sense::Le;
    for (const auto& e : c.entries) {
      r.entries.emplace_back(e.i, e.j, e.a);
      if (e.i != e.j) r.entries.emplace_back(e.j, e.i, e.a);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void add_adjoint(Eigen::MatrixXd& S, const std::vector<ExpandedRow>& rows,
                        const Eigen::VectorXd& y) {
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (y[static_cast<int>(r)] == 0.0) continue;
    for (const auto& [u, v, a] : rows[r].entries) S(u, v) += y[static_cast<int>(r)] * a;
  }
}

inline double row_dot(const ExpandedRow& r, const Eigen::MatrixXd& M) {
  double v = 0.0;
  for (const auto& [u, vv, a] : r.entries) v += a * M(u, vv);
  return v;
}

inline bool is_pd(const Eigen::MatrixXd& M) {
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  return llt.info() == Eigen::Success;
}

}  // namespace detail

// Primal-dual path following over the single PSD cone. Dual feasibility is
// maintained exactly (S is recomputed as C + A*(y) after every step), primal
// equality residuals contract by 1-alpha per iteration through the Newton
// right-hand side, and inequality rows carry explicit nonnegative slacks tied
// to their multipliers by the barrier condition t_r y_r = mu.
inline SdpSolution solve(const SdpProblem& p) {
  const int d = p.dim;
  const auto rows = detail::expand_rows(p.cs);
  const int R = static_cast<int>(rows.size());
  const int n = p.cs.n_hyp, k = p.cs.n_fact, m = p.cs.hp.m;

  int nI = 0;
  for (const auto& r : rows)
    if (r.ineq) ++nI;

  // Strictly feasible-in-cone start: diagonal X meeting both cardinality
  // equalities (hypotheses share mass 1, facts share mass m). Pins hold
  // trivially at any diagonal point.
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(d, d);
  X(0, 0) = 1.0;
  for (int i = 0; i < n; ++i) X(1 + i, 1 + i) = 1.0 / n;
  for (int j = 0; j < k; ++j) X(1 + n + j, 1 + n + j) = static_cast<double>(m) / k;

  Eigen::VectorXd y = Eigen::VectorXd::Zero(R);
  Eigen::VectorXd t = Eigen::VectorXd::Zero(R);
  for (int r = 0; r < R; ++r)
    if (rows[r].ineq) {
      y[r] = 0.1;
      t[r] = std::max(rows[r].rhs - detail::row_dot(rows[r], X) + 0.1, 0.1);
    }

  Eigen::MatrixXd S = p.C;
  detail::add_adjoint(S, rows, y);
  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    double bump = 0.5 - es.eigenvalues().minCoeff();
    if (bump > 0.0) {
      // Raising the box-row and Z00 multipliers adds bump * I to S while
      // keeping every inequality multiplier positive.
      for (int r = 0; r < R; ++r) {
        const auto& lc = p.cs.rows[static_cast<std::size_t>(r)];
        if (lc.label == "lift/z00" || lc.label.rfind("box/", 0) == 0) y[r] += bump;
      }
      S = p.C;
      detail::add_adjoint(S, rows, y);
    }
  }

  SdpSolution sol;
  sol.iterations = 0;
  double sigma_scale = 1.0;
  double comp = 0.0, eq_res = 0.0, ineq_viol = 0.0, pobj = 0.0;

  auto measure = [&] {
    comp = X.cwiseProduct(S).sum();
    for (int r = 0; r < R; ++r)
      if (rows[r].ineq) comp += t[r] * y[r];
    pobj = p.C.cwiseProduct(X).sum();
    eq_res = 0.0;
    ineq_viol = 0.0;
    for (int r = 0; r < R; ++r) {
      double v = detail::row_dot(rows[r], X);
      if (rows[r].ineq)
        ineq_viol = std::max(ineq_viol, v - rows[r].rhs);
      else
        eq_res = std::max(eq_res, std::abs(v - rows[r].rhs));
    }
  };

  bool stuck = false;

  // The barrier value the solve aims to finish at. Keeping a deterministic
  // floor (rather than letting the last step overshoot toward zero) matters
  // twice over: the adjoint system downstream is solvable in doubles only
  // when mu is not too small, and finite differencing across re-solves only
  // makes sense when every nearby problem lands on the same barrier value.
  // The floor is an absolute constant on purpose. Tying it to the objective
  // magnitude would make the final barrier a function of the problem data,
  // and the sensitivities would pick up a spurious d(mu)/d(W) term that the
  // fixed-mu adjoint cannot see.
  const double mu_floor = 0.5 * p.settings.tol_gap;

  // One Newton iteration of the barrier KKT system targeting the given mu.
  // Returns ap + ad, or a negative value when neither side can move. The
  // scalar type is a template parameter: the main loop runs in double, but
  // the final centering sweeps call the long double instantiation because
  // near mu ~ 1e-10 the Schur system's conditioning (which grows like 1/mu)
  // exhausts double precision and the equality residuals would drift.
  auto step_impl = [&]<typename Scal>(Scal, double mu, double cap) -> double {
    using MatS = Eigen::Matrix<Scal, Eigen::Dynamic, Eigen::Dynamic>;
    using VecS = Eigen::Matrix<Scal, Eigen::Dynamic, 1>;
    const Scal muS = static_cast<Scal>(mu);

    MatS Xs = X.cast<Scal>();
    Eigen::LLT<MatS> sllt(S.cast<Scal>());
    if (sllt.info() != Eigen::Success) throw InternalError("dual slack lost positive definiteness");
    MatS Zi = sllt.solve(MatS::Identity(d, d));

    VecS aZi(R);
    for (int r = 0; r < R; ++r) {
      Scal acc = 0;
      for (const auto& [u, v, a] : rows[r].entries) acc += static_cast<Scal>(a) * Zi(u, v);
      aZi[r] = acc;
    }

    // Schur matrix M_rs = <A_r, X A_s S^-1>, built from the sparse entry
    // lists; generally nonsymmetric, hence the LU solve below.
    MatS M = MatS::Zero(R, R);
    for (int r = 0; r < R; ++r)
      for (int s = 0; s < R; ++s) {
        Scal acc = 0;
        for (const auto& [u, v, a1] : rows[r].entries)
          for (const auto& [pp, q, a2] : rows[s].entries)
            acc += static_cast<Scal>(a1 * a2) * Xs(v, pp) * Zi(q, u);
        M(r, s) = acc;
      }
    VecS rhs(R);
    for (int r = 0; r < R; ++r) {
      rhs[r] = muS * aZi[r] - static_cast<Scal>(rows[r].rhs);
      if (rows[r].ineq) {
        M(r, r) += static_cast<Scal>(t[r]) / static_cast<Scal>(y[r]);
        rhs[r] += muS / static_cast<Scal>(y[r]);
      }
    }

    // Jacobi equilibration before the LU: the t/y diagonal terms put the row
    // scales many orders of magnitude apart near convergence, and the raw
    // system's rounding noise would otherwise dominate the late steps.
    VecS D(R);
    using std::abs;
    using std::sqrt;
    for (int r = 0; r < R; ++r)
      D[r] = Scal(1) / sqrt(std::max<Scal>(abs(M(r, r)), Scal(1e-12)));
    MatS Ms = D.asDiagonal() * M * D.asDiagonal();
    VecS rhs_s = D.asDiagonal() * rhs;
    VecS dy = Ms.partialPivLu().solve(rhs_s);
    if (!dy.allFinite()) dy = Ms.fullPivLu().solve(rhs_s);
    if (!dy.allFinite()) throw InternalError("Newton system produced non-finite step");
    dy = (D.asDiagonal() * dy).eval();

    MatS dS = MatS::Zero(d, d);
    for (int r = 0; r < R; ++r) {
      if (dy[r] == Scal(0)) continue;
      for (const auto& [u, v, a] : rows[r].entries) dS(u, v) += dy[r] * static_cast<Scal>(a);
    }
    MatS dX = muS * Zi - Xs - Xs * dS * Zi;
    dX = Scal(0.5) * (dX + dX.transpose()).eval();
    VecS dt = VecS::Zero(R);
    for (int r = 0; r < R; ++r)
      if (rows[r].ineq)
        dt[r] = muS / static_cast<Scal>(y[r]) - static_cast<Scal>(t[r]) -
                (static_cast<Scal>(t[r]) / static_cast<Scal>(y[r])) * dy[r];

    auto is_pd_s = [](const MatS& A) { return Eigen::LLT<MatS>(A).info() == Eigen::Success; };

    double ap = 1e30;
    for (int r = 0; r < R; ++r)
      if (rows[r].ineq && dt[r] < Scal(0))
        ap = std::min(ap, static_cast<double>(-static_cast<Scal>(t[r]) / dt[r]));
    ap = std::min(cap, 0.95 * ap);
    while (ap > 1e-12 && !is_pd_s(Xs + static_cast<Scal>(ap) * dX)) ap *= 0.8;

    double ad = 1e30;
    for (int r = 0; r < R; ++r)
      if (rows[r].ineq && dy[r] < Scal(0))
        ad = std::min(ad, static_cast<double>(-static_cast<Scal>(y[r]) / dy[r]));
    ad = std::min(cap, 0.95 * ad);
    MatS Ss = S.cast<Scal>();
    while (ad > 1e-12 && !is_pd_s(Ss + static_cast<Scal>(ad) * dS)) ad *= 0.8;

    if (ap <= 1e-12 && ad <= 1e-12) return -1.0;

    X = (Xs + static_cast<Scal>(ap) * dX).template cast<double>();
    for (int r = 0; r < R; ++r)
      if (rows[r].ineq) t[r] += ap * static_cast<double>(dt[r]);
    for (int r = 0; r < R; ++r) y[r] += ad * static_cast<double>(dy[r]);
    S = p.C;
    detail::add_adjoint(S, rows, y);
    return ap + ad;
  };
  auto take_step = [&](double mu, double cap, bool precise) -> double {
    return precise ? step_impl(0.0L, mu, cap) : step_impl(0.0, mu, cap);
  };

  for (int iter = 0; iter < p.settings.max_iters; ++iter) {
    sol.iterations = iter;
    measure();
    if (comp / (d + nI) <= p.settings.tol_gap * std::max(1.0, std::abs(pobj)) &&
        eq_res <= 1e-8 && ineq_viol <= 1e-8) {
      sol.status = SolveStatus::Optimal;
      break;
    }
    if (y.lpNorm<Eigen::Infinity>() > 1e10) {
      sol.status = SolveStatus::Infeasible;
      break;
    }

    double target =
        std::max(p.settings.barrier_decrease * sigma_scale * comp / (d + nI), mu_floor);
    double step = take_step(target, 0.95, false);
    if (step < 0.0) {
      stuck = true;
      break;
    }
    sigma_scale = (step > 1.8) ? 0.5 : 1.0;
  }

  measure();
  if (sol.status != SolveStatus::Optimal && sol.status != SolveStatus::Infeasible) {
    if (comp / (d + nI) <= p.settings.tol_gap * std::max(1.0, std::abs(pobj)) &&
        eq_res <= 1e-8 && ineq_viol <= 1e-8)
      sol.status = SolveStatus::Optimal;
    // A converged-but-infeasible iterate (or a dead-stepped one) is the
    // practical infeasibility certificate at this scale.
    else if (eq_res > 1e-6 || ineq_viol > 1e-6 || (stuck && comp / (d + nI) > p.settings.tol_gap))
      sol.status = SolveStatus::Infeasible;
    else
      sol.status = SolveStatus::MaxIters;
  }

  // Centering polish: iterate the same Newton system at the floor barrier
  // value (no further reduction) until X S is a near-multiple of the identity
  // and every slack pairing t_r y_r agrees with it. The sensitivity analysis
  // downstream linearizes the central-path equations, so the returned iterate
  // has to actually sit on the path, not merely have a small average gap. The
  // iteration count is fixed rather than adaptive so that re-solves of nearby
  // problems receive identical polish and stay comparable under differencing,
  // and the steps run in extended precision because this is where the system
  // is at its most ill-conditioned.
  if (sol.status == SolveStatus::Optimal) {
    for (int c = 0; c < 24; ++c) {
      if (take_step(mu_floor, 1.0, true) < 0.0) break;
    }
    measure();
  }

  sol.Z = X;
  sol.duals = y;
  sol.objective_value = -0.5 * pobj;  // equals <W, Y-block>/2
  sol.residuals.primal_eq = eq_res;
  sol.residuals.primal_ineq = ineq_viol;
  sol.residuals.gap = comp / (d + nI);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X, Eigen::EigenvaluesOnly);
  sol.residuals.min_eig = es.eigenvalues().minCoeff();
  sol.final_barrier = comp / (d + nI);
  return sol;
}

inline Selection round_solution(const SdpSolution& sol, const FactGraph& g, int m) {
  if (sol.status == SolveStatus::Infeasible)
    throw SolverError("cannot round an infeasible solution");
  const int n = g.n(), k = g.k(), N = g.N();
  Selection sel;
  sel.node_probs = sol.Z.diagonal().segment(1, N).cwiseMax(0.0).cwiseMin(1.0);

  sel.answer_index = 0;
  for (int i = 1; i < n; ++i)
    if (sel.node_probs[i] > sel.node_probs[sel.answer_index]) sel.answer_index = i;

  // Probabilities are compared on a 1e-9 grid so that two facts tied in
  // exact arithmetic cannot have their order decided by solver noise; ties
  // then ascend by fact id. Quantizing (rather than comparing with a
  // tolerance) keeps the ordering transitive.
  std::vector<int> order(k);
  for (int j = 0; j < k; ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    long long qa = std::llround(sel.node_probs[n + a] * 1e9);
    long long qb = std::llround(sel.node_probs[n + b] * 1e9);
    if (qa != qb) return qa > qb;
    return g.facts[a].id < g.facts[b].id;
  });
  for (int j = 0; j < std::min(m, k); ++j) sel.explanation_ids.push_back(g.facts[order[j]].id);
  return sel;
}

// Exhaustive oracle over integral selections (one hypothesis, exactly m
// facts), checking every compiled row at the rank-1 lift of each candidate.
// Strict-improvement replacement makes ties resolve to the enumeration-first
// (lexicographically smallest) selection.
inline std::pair<Selection, double> brute_force_ilp(const Eigen::MatrixXd& W,
                                                    const ConstraintSet& cs, const FactGraph& g) {
  const int n = cs.n_hyp, k = cs.n_fact, N = cs.N(), m = cs.hp.m;
  if (N > 22) throw TooLargeError("brute force oracle limited to 22 nodes, got " +
                                  std::to_string(N));
  if (m > k) throw SolverError("brute force: no feasible selection (m exceeds fact count)");

  Eigen::VectorXd z(N + 1);
  bool found = false;
  double best_obj = 0.0;
  Eigen::VectorXd best_y;

  std::vector<int> combo(m);
  for (int h = 0; h < n; ++h) {
    for (int c = 0; c < m; ++c) combo[c] = c;
    for (;;) {
      z.setZero();
      z[0] = 1.0;
      z[1 + h] = 1.0;
      for (int c : combo) z[1 + n + c] = 1.0;

      bool ok = true;
      for (const auto& row : cs.rows) {
        double v = eval_constraint_at(row, z);
        if (row.sense == LinearConstraint::Sense::Eq ? std::abs(v - row.rhs) > 1e-9
                                                     : v > row.rhs + 1e-9) {
          ok = false;
          break;
        }
      }
      if (ok) {
        Eigen::VectorXd yv = z.segment(1, N);
        double obj = 0.5 * yv.dot(W * yv);
        if (!found || obj > best_obj) {
          found = true;
          best_obj = obj;
          best_y = yv;
        }
      }

      int c = m - 1;
      while (c >= 0 && combo[c] == k - m + c) --c;
      if (c < 0) break;
      ++combo[c];
      for (int c2 = c + 1; c2 < m; ++c2) combo[c2] = combo[c2 - 1] + 1;
    }
  }
  if (!found) throw SolverError("brute force: no feasible selection");

  Selection sel;
  sel.node_probs = best_y;
  sel.answer_index = 0;
  for (int i = 0; i < n; ++i)
    if (best_y[i] > 0.5) {
      sel.answer_index = i;
      break;
    }
  for (int j = 0; j < k; ++j)
    if (best_y[n + j] > 0.5) sel.explanation_ids.push_back(g.facts[j].id);
  return {sel, best_obj};
}

}  // namespace diffsel

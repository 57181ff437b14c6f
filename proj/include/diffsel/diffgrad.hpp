#pragma once

#include <Eigen/Dense>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "diffsel/constraints.hpp"
#include "diffsel/graph.hpp"
#include "diffsel/sdp.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

// Everything the theta/adapter chain rules need beyond the solver state.
// hyp_vecs/fact_vecs are the raw stored embeddings (pre-adapter) and may be
// left empty when the adapter is disabled.
struct WeightContext {
  const FactGraph& graph;
  const RelevanceScores& scores;
  const ThetaParams& theta;
  std::vector<Eigen::VectorXd> hyp_vecs;
  std::vector<Eigen::VectorXd> fact_vecs;
};

struct GradientBundle {
  Eigen::MatrixXd dL_dW;
  std::map<std::string, double> dL_dtheta;
  Eigen::MatrixXd dL_dAdapter;
  struct {
    double kkt_residual = 0.0;
    std::optional<double> fd_check;
  } diagnostics;
  bool used_fallback = false;
};

namespace detail {

// d cos(Pa, Pb) / dP, accumulated into dP with weight g.
inline void add_cosine_adapter_grad(Eigen::MatrixXd& dP, const Eigen::MatrixXd& P,
                                    const Eigen::VectorXd& va, const Eigen::VectorXd& vb,
                                    double g) {
  Eigen::VectorXd a = P * va, b = P * vb;
  double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return;
  double c = a.dot(b) / (na * nb);
  Eigen::VectorXd da = b / (na * nb) - c * a / (na * na);
  Eigen::VectorXd db = a / (na * nb) - c * b / (nb * nb);
  dP.noalias() += g * (da * va.transpose() + db * vb.transpose());
}

inline Eigen::MatrixXd fallback_fd_dW(const SdpProblem& p, const Eigen::MatrixXd& G,
                                      double h = 1e-5) {
  const int N = p.dim - 1;
  Eigen::MatrixXd W = -p.C.block(1, 1, N, N);
  Eigen::MatrixXd dW = Eigen::MatrixXd::Zero(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j) {
      Eigen::MatrixXd Wp = W, Wm = W;
      Wp(i, j) += h;
      Wp(j, i) += h;
      Wm(i, j) -= h;
      Wm(j, i) -= h;
      SdpSolution sp = solve(make_problem(Wp, p.cs, p.settings));
      SdpSolution sm = solve(make_problem(Wm, p.cs, p.settings));
      double deriv = (G.cwiseProduct(sp.Z).sum() - G.cwiseProduct(sm.Z).sum()) / (2.0 * h);
      dW(i, j) = dW(j, i) = 0.5 * deriv;  // split the symmetric-pair derivative
    }
  return dW;
}

}  // namespace detail

// Implicit differentiation of the barrier-smoothed optimality system at the
// final barrier value mu. The adjoint system is M~ v = g with
// M~_rs = <A_r X A_s X> (+ mu t_r / y_r on inequality diagonals, which is
// t_r^2 on the central path) and g_r = <A_r, X G X>; then
// dL/dC = -(1/mu) X (G - A*(v)) X, and dL/dW is the negated lower-right
// block (the objective carries -W).
inline GradientBundle solution_gradient(const SdpProblem& p, const SdpSolution& sol,
                                        const Eigen::MatrixXd& dL_dZ,
                                        const WeightContext* ctx = nullptr) {
  if (sol.status != SolveStatus::Optimal)
    throw ValidationError("solution_gradient requires an optimal solve");
  const int d = p.dim;
  const int N = d - 1;
  if (dL_dZ.rows() != d || dL_dZ.cols() != d)
    throw ValidationError("dL_dZ must match the lifted dimension");

  GradientBundle out;
  const Eigen::MatrixXd G = 0.5 * (dL_dZ + dL_dZ.transpose());
  const auto rows = detail::expand_rows(p.cs);
  const int R = static_cast<int>(rows.size());

  // The whole adjoint assembly runs in extended precision. The final barrier
  // value sits near 1e-9, and the sandwich products below cancel to O(mu)
  // before the 1/mu rescale, so double rounding alone would leave noise of
  // roughly eps/mu ~ 1e-6 in the result, large enough to drown flat entries.
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  const MatL X = sol.Z.cast<long double>();
  const MatL GL = G.cast<long double>();
  const long double mu = std::max(sol.final_barrier, 1e-300);

  auto row_dot_l = [&](const detail::ExpandedRow& r, const MatL& M) {
    long double acc = 0.0L;
    for (const auto& [u, vv, a] : r.entries) acc += static_cast<long double>(a) * M(u, vv);
    return acc;
  };

  MatL XGX = X * GL * X;
  VecL g(R);
  for (int r = 0; r < R; ++r) g[r] = row_dot_l(rows[r], XGX);

  MatL M = MatL::Zero(R, R);
  for (int r = 0; r < R; ++r)
    for (int s = r; s < R; ++s) {
      long double acc = 0.0L;
      for (const auto& [u, v, a1] : rows[r].entries)
        for (const auto& [pp, q, a2] : rows[s].entries)
          acc += static_cast<long double>(a1) * static_cast<long double>(a2) * X(v, pp) * X(q, u);
      M(r, s) = M(s, r) = acc;
    }
  for (int r = 0; r < R; ++r)
    if (rows[r].ineq) {
      long double t = std::max(static_cast<long double>(rows[r].rhs) - row_dot_l(rows[r], X),
                               static_cast<long double>(1e-14));
      long double yr = std::max(static_cast<long double>(sol.duals[r]),
                                static_cast<long double>(1e-14));
      M(r, r) += mu * t / yr;
    }

  // Jacobi equilibration keeps the pivoting honest across the wildly
  // different row scales (pins vs cardinality).
  VecL D(R);
  for (int r = 0; r < R; ++r)
    D[r] = 1.0L / std::sqrt(std::max(M(r, r), static_cast<long double>(1e-24)));
  MatL Ms = D.asDiagonal() * M * D.asDiagonal();
  Eigen::FullPivLU<MatL> lu(Ms);
  VecL v = D.asDiagonal() * lu.solve((D.asDiagonal() * g).eval());

  double kkt_res = v.allFinite() ? static_cast<double>((M * v - g).norm() / (1.0L + g.norm()))
                                 : std::numeric_limits<double>::infinity();
  out.diagnostics.kkt_residual = kkt_res;

  if (!std::isfinite(kkt_res) || kkt_res > 1e-4) {
    out.used_fallback = true;
    out.dL_dW = detail::fallback_fd_dW(p, G);
  } else {
    MatL Av = MatL::Zero(d, d);
    for (int r = 0; r < R; ++r) {
      if (v[r] == 0.0L) continue;
      for (const auto& [u, vv, a] : rows[r].entries) Av(u, vv) += v[r] * static_cast<long double>(a);
    }
    MatL dC = -(1.0L / mu) * (X * (GL - Av) * X);
    dC = 0.5L * (dC + dC.transpose()).eval();
    out.dL_dW = (-dC.block(1, 1, N, N)).cast<double>();
    out.dL_dW = 0.5 * (out.dL_dW + out.dL_dW.transpose()).eval();
  }

  if (ctx) {
    auto basis = weight_basis(ctx->graph, ctx->scores, ctx->theta.family);
    for (const auto& [name, B] : basis) out.dL_dtheta[name] = out.dL_dW.cwiseProduct(B).sum();

    if (ctx->theta.adapter.enabled) {
      const Eigen::MatrixXd& P = ctx->theta.adapter.P;
      out.dL_dAdapter = Eigen::MatrixXd::Zero(P.rows(), P.cols());
      if (ctx->hyp_vecs.size() != static_cast<std::size_t>(ctx->graph.n()) ||
          ctx->fact_vecs.size() != static_cast<std::size_t>(ctx->graph.k()))
        throw ValidationError("adapter gradient needs raw embeddings for every node");
      Eigen::MatrixXd coeff = semantic_coeff(ctx->graph, ctx->theta);
      const int n = ctx->graph.n(), k = ctx->graph.k();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          if (coeff(i, j) == 0.0) continue;
          double gs = 2.0 * out.dL_dW(i, n + j) * coeff(i, j);
          if (gs == 0.0) continue;
          detail::add_cosine_adapter_grad(out.dL_dAdapter, P, ctx->hyp_vecs[i], ctx->fact_vecs[j],
                                          gs);
        }
    } else {
      out.dL_dAdapter = Eigen::MatrixXd::Zero(0, 0);
    }
  }
  return out;
}

// Central-difference oracle for the analytic gradient. Probes symmetric
// W-entry pairs on the family support; relative error uses
// max(|fd|, |analytic|, 1e-4) as denominator and entries where both sides
// are below 1e-6 are skipped (both "zero" to working precision).
inline double finite_diff_check(const SdpProblem& p, const Eigen::MatrixXd& dL_dZ, int n_probes,
                                std::uint64_t seed, double h = 1e-4) {
  const int N = p.dim - 1;
  if (N > 12) throw TooLargeError("finite_diff_check limited to 12 nodes");
  const int n = p.cs.n_hyp, k = p.cs.n_fact;

  SdpSolution sol = solve(p);
  if (sol.status != SolveStatus::Optimal)
    throw SolverError("finite_diff_check: base solve not optimal");
  GradientBundle bundle = solution_gradient(p, sol, dL_dZ);

  std::vector<std::pair<int, int>> support;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) support.emplace_back(i, n + j);
  if (p.cs.family == Family::ExplanationLp)
    for (int a = 0; a < k; ++a)
      for (int b = a + 1; b < k; ++b) support.emplace_back(n + a, n + b);

  Eigen::MatrixXd W = -p.C.block(1, 1, N, N);
  const Eigen::MatrixXd G = 0.5 * (dL_dZ + dL_dZ.transpose());
  std::mt19937_64 rng(seed);
  double max_err = 0.0;

  for (int probe = 0; probe < n_probes; ++probe) {
    auto [i, j] = support[rng() % support.size()];
    Eigen::MatrixXd Wp = W, Wm = W;
    Wp(i, j) += h;
    Wp(j, i) += h;
    Wm(i, j) -= h;
    Wm(j, i) -= h;
    SdpSolution sp = solve(make_problem(Wp, p.cs, p.settings));
    SdpSolution sm = solve(make_problem(Wm, p.cs, p.settings));
    double fd = (G.cwiseProduct(sp.Z).sum() - G.cwiseProduct(sm.Z).sum()) / (2.0 * h);
    double an = bundle.dL_dW(i, j) + bundle.dL_dW(j, i);
    if (std::max(std::abs(fd), std::abs(an)) <= 1e-6) continue;
    max_err = std::max(max_err, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}));
  }
  return max_err;
}

}  // namespace diffsel

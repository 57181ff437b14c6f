#pragma once

#include <Eigen/Dense>
#include <set>
#include <string>
#include <vector>

#include "diffsel/graph.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

// One linear trace row over the lifted (N+1)x(N+1) variable Z. Entries are
// stored upper-triangular: (i, j, a) with i <= j sets coeff(i,j) = coeff(j,i)
// = a, so <coeff, Z> = sum_i a_ii Z_ii + 2 sum_{i<j} a_ij Z_ij.
struct LinearConstraint {
  enum class Sense { Eq, Le };
  struct Entry {
    int i, j;
    double a;
  };
  std::vector<Entry> entries;
  double rhs = 0.0;
  Sense sense = Sense::Eq;
  std::string label;
};

struct Hyperparams {
  int m = 2, w1 = 2, w2 = 2, w3 = 1, w4 = 2;
};

struct ConstraintSet {
  std::vector<LinearConstraint> rows;
  std::set<std::pair<int, int>> pinned_zero_edges;  // graph node indices, i < j
  Hyperparams hp;
  Family family = Family::TupleIlp;
  int n_hyp = 0, n_fact = 0;

  int N() const { return n_hyp + n_fact; }
  int dim() const { return N() + 1; }
};

inline double eval_constraint(const LinearConstraint& c, const Eigen::MatrixXd& Z) {
  double v = 0.0;
  for (const auto& e : c.entries) v += e.i == e.j ? e.a * Z(e.i, e.i) : 2.0 * e.a * Z(e.i, e.j);
  return v;
}

// Same row evaluated at the rank-1 point Z = z z^T without forming it.
inline double eval_constraint_at(const LinearConstraint& c, const Eigen::VectorXd& z) {
  double v = 0.0;
  for (const auto& e : c.entries)
    v += e.i == e.j ? e.a * z[e.i] * z[e.i] : 2.0 * e.a * z[e.i] * z[e.j];
  return v;
}

inline Eigen::MatrixXd constraint_matrix(const LinearConstraint& c, int dim) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& e : c.entries) {
    A(e.i, e.j) += e.a;
    if (e.i != e.j) A(e.j, e.i) += e.a;
  }
  return A;
}

inline double max_eq_residual(const ConstraintSet& cs, const Eigen::MatrixXd& Z) {
  double r = 0.0;
  for (const auto& c : cs.rows)
    if (c.sense == LinearConstraint::Sense::Eq)
      r = std::max(r, std::abs(eval_constraint(c, Z) - c.rhs));
  return r;
}

inline double max_ineq_violation(const ConstraintSet& cs, const Eigen::MatrixXd& Z) {
  double r = 0.0;
  for (const auto& c : cs.rows)
    if (c.sense == LinearConstraint::Sense::Le)
      r = std::max(r, eval_constraint(c, Z) - c.rhs);
  return r;
}

namespace detail {

// Common rows: lifting consistency, the answer and cardinality equalities,
// diagonal box rows, and nonnegativity of the hypothesis-fact block. Pins are
// excluded from the nonnegativity rows (they are already forced to zero and a
// 0 <= Z_ij <= 0 pair would leave the interior empty).
inline void emit_common_rows(ConstraintSet& cs, int m) {
  const int n = cs.n_hyp, k = cs.n_fact, N = cs.N();
  if (m < 1) throw ValidationError("subgraph size m must be >= 1");
  if (m + 1 > N)
    throw InfeasibleCardinalityError("m+1 = " + std::to_string(m + 1) + " exceeds node count " +
                                     std::to_string(N));

  LinearConstraint z00;
  z00.entries = {{0, 0, 1.0}};
  z00.rhs = 1.0;
  z00.sense = LinearConstraint::Sense::Eq;
  z00.label = "lift/z00";
  cs.rows.push_back(std::move(z00));

  for (int i = 1; i <= N; ++i) {
    LinearConstraint c;
    c.entries = {{0, i, 0.5}, {i, i, -1.0}};
    c.rhs = 0.0;
    c.sense = LinearConstraint::Sense::Eq;
    c.label = "lift/diag" + std::to_string(i);
    cs.rows.push_back(std::move(c));
  }

  LinearConstraint ans;
  for (int i = 1; i <= n; ++i) ans.entries.push_back({i, i, 1.0});
  ans.rhs = 1.0;
  ans.sense = LinearConstraint::Sense::Eq;
  ans.label = "answer";
  cs.rows.push_back(std::move(ans));

  LinearConstraint card;
  for (int i = 1; i <= N; ++i) card.entries.push_back({i, i, 1.0});
  card.rhs = m + 1.0;
  card.sense = LinearConstraint::Sense::Eq;
  card.label = "cardinality";
  cs.rows.push_back(std::move(card));

  for (const auto& [i, j] : cs.pinned_zero_edges) {
    LinearConstraint pin;
    pin.entries = {{1 + i, 1 + j, 0.5}};
    pin.rhs = 0.0;
    pin.sense = LinearConstraint::Sense::Eq;
    pin.label = "pin/" + std::to_string(i) + "_" + std::to_string(j);
    cs.rows.push_back(std::move(pin));
  }

  for (int i = 1; i <= N; ++i) {
    LinearConstraint box;
    box.entries = {{i, i, 1.0}};
    box.rhs = 1.0;
    box.sense = LinearConstraint::Sense::Le;
    box.label = "box/" + std::to_string(i);
    cs.rows.push_back(std::move(box));
  }

  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      if (cs.pinned_zero_edges.count({i, n + j})) continue;
      LinearConstraint nn;
      nn.entries = {{1 + i, 1 + n + j, -0.5}};
      nn.rhs = 0.0;
      nn.sense = LinearConstraint::Sense::Le;
      nn.label = "nonneg/" + std::to_string(i) + "_" + std::to_string(n + j);
      cs.rows.push_back(std::move(nn));
    }
}

}  // namespace detail

inline ConstraintSet compile_common(const FactGraph& g, int m) {
  ConstraintSet cs;
  cs.n_hyp = g.n();
  cs.n_fact = g.k();
  cs.hp.m = m;
  detail::emit_common_rows(cs, m);
  return cs;
}

inline ConstraintSet compile_tupleilp(const FactGraph& g, const Hyperparams& hp) {
  for (const auto& f : g.facts)
    if (!f.tuple) throw MissingTuplesError("fact '" + f.id + "' has no SPO tuple");

  ConstraintSet cs;
  cs.n_hyp = g.n();
  cs.n_fact = g.k();
  cs.hp = hp;
  cs.family = Family::TupleIlp;
  const int n = g.n(), k = g.k();

  // Subject / field rules compile to pins on edges whose tuple-field overlap
  // count falls short. Both rules can hit the same edge; the set dedupes.
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      if (g.A(i, n + j) == 0.0) continue;
      double fields = g.Ts(i, n + j) + g.Tp(i, n + j) + g.To(i, n + j);
      if (g.Ts(i, n + j) == 0.0 || fields < hp.w3) cs.pinned_zero_edges.insert({i, n + j});
    }

  detail::emit_common_rows(cs, hp.m);

  // The cardinality equalities already force sum_F Z_ii = m, so a budget of
  // exactly m is implied and would zero the slack identically; skip it. A
  // budget below m stays so the solver can certify infeasibility.
  if (hp.w1 + 1 != hp.m) {
    LinearConstraint w1;
    for (int j = 0; j < k; ++j) w1.entries.push_back({1 + n + j, 1 + n + j, 1.0});
    w1.rhs = hp.w1 + 1.0;
    w1.sense = LinearConstraint::Sense::Le;
    w1.label = "tuple/w1";
    cs.rows.push_back(std::move(w1));
  }

  for (std::size_t t = 0; t < g.hyp_terms.size(); ++t) {
    LinearConstraint row;
    for (const auto& [i, node_j] : g.term_edges[t]) row.entries.push_back({1 + i, 1 + node_j, 1.0});
    row.rhs = hp.w2;
    row.sense = LinearConstraint::Sense::Le;
    row.label = "tuple/term/" + g.hyp_terms[t];
    cs.rows.push_back(std::move(row));
  }
  return cs;
}

inline ConstraintSet compile_explanationlp(const FactGraph& g, const Hyperparams& hp) {
  detail::require_kinds(g);

  ConstraintSet cs;
  cs.n_hyp = g.n();
  cs.n_fact = g.k();
  cs.hp = hp;
  cs.family = Family::ExplanationLp;
  detail::emit_common_rows(cs, hp.m);

  const int n = g.n(), k = g.k();
  int abstract_count = 0;
  for (const auto& f : g.facts)
    if (*f.kind == FactKind::Abstract) ++abstract_count;

  // All-abstract roster with w4 == m: the budget is implied with zero slack,
  // same presolve rationale as the tuple fact budget.
  if (!(abstract_count == k && hp.w4 == hp.m)) {
    LinearConstraint w4;
    for (int j = 0; j < k; ++j)
      if (*g.facts[j].kind == FactKind::Abstract) w4.entries.push_back({1 + n + j, 1 + n + j, 1.0});
    w4.rhs = hp.w4;
    w4.sense = LinearConstraint::Sense::Le;
    w4.label = "elp/w4";
    cs.rows.push_back(std::move(w4));
  }
  return cs;
}

inline ConstraintSet compile(const FactGraph& g, Family family, const Hyperparams& hp) {
  return family == Family::TupleIlp ? compile_tupleilp(g, hp) : compile_explanationlp(g, hp);
}

}  // namespace diffsel

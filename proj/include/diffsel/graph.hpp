#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "diffsel/corpus.hpp"
#include "diffsel/relevance.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

enum class Family { TupleIlp, ExplanationLp };

inline std::string family_name(Family f) {
  return f == Family::TupleIlp ? "tupleilp" : "explanationlp";
}

inline Family parse_family(const std::string& s) {
  if (s == "tupleilp") return Family::TupleIlp;
  if (s == "explanationlp") return Family::ExplanationLp;
  throw ValidationError("unknown family '" + s + "'");
}

// Per-question bipartite graph over node order [h_1..h_n, f_1..f_k].
// All matrices are N x N with hypothesis rows first.
struct FactGraph {
  std::vector<Hypothesis> hyps;
  std::vector<Fact> facts;
  Eigen::MatrixXd A;                // 0/1, hyp-fact pairs sharing >= 1 term
  Eigen::MatrixXd Ts, Tp, To;       // 0/1, edge shares a tuple-field term
  Eigen::MatrixXd Fab;              // 0/1, hyp-to-abstract-fact mask
  std::vector<std::string> hyp_terms;                     // sorted union, size L
  std::vector<std::vector<std::pair<int, int>>> term_edges;  // per term: (i, n+j) edges

  int n() const { return static_cast<int>(hyps.size()); }
  int k() const { return static_cast<int>(facts.size()); }
  int N() const { return n() + k(); }
  bool is_hyp(int node) const { return node < n(); }
};

// Roster construction: dedup by id, order by id, drop facts that share no
// term with any hypothesis. The tuple-field and term-incidence structure is
// masked by A so pins always land on actual edges.
inline FactGraph build_graph(std::vector<Hypothesis> hyps, std::vector<Fact> facts) {
  if (hyps.empty()) throw ValidationError("build_graph needs at least one hypothesis");
  std::sort(facts.begin(), facts.end(), [](const Fact& a, const Fact& b) { return a.id < b.id; });
  facts.erase(std::unique(facts.begin(), facts.end(),
                          [](const Fact& a, const Fact& b) { return a.id == b.id; }),
              facts.end());

  std::vector<Fact> kept;
  for (auto& f : facts) {
    bool connected = false;
    for (const auto& h : hyps)
      if (lexical_relevance(h.terms, f.terms) > 0.0) {
        connected = true;
        break;
      }
    if (connected) kept.push_back(std::move(f));
  }
  if (kept.empty()) throw EmptyGraphError("build_graph: no fact shares a term with any hypothesis");

  FactGraph g;
  g.hyps = std::move(hyps);
  g.facts = std::move(kept);
  const int n = g.n(), k = g.k(), N = g.N();
  g.A = Eigen::MatrixXd::Zero(N, N);
  g.Ts = Eigen::MatrixXd::Zero(N, N);
  g.Tp = Eigen::MatrixXd::Zero(N, N);
  g.To = Eigen::MatrixXd::Zero(N, N);
  g.Fab = Eigen::MatrixXd::Zero(N, N);

  std::set<std::string> term_union;
  for (const auto& h : g.hyps) term_union.insert(h.terms.begin(), h.terms.end());
  g.hyp_terms.assign(term_union.begin(), term_union.end());
  g.term_edges.assign(g.hyp_terms.size(), {});
  std::map<std::string, int> term_pos;
  for (std::size_t t = 0; t < g.hyp_terms.size(); ++t) term_pos[g.hyp_terms[t]] = static_cast<int>(t);

  auto overlaps = [](const TermSet& a, const TermSet& b) {
    for (const auto& x : a)
      if (b.count(x)) return true;
    return false;
  };

  for (int i = 0; i < n; ++i) {
    const Hypothesis& h = g.hyps[i];
    for (int j = 0; j < k; ++j) {
      const Fact& f = g.facts[j];
      bool edge = false;
      for (const auto& t : h.terms)
        if (f.terms.count(t)) {
          edge = true;
          g.term_edges[term_pos[t]].emplace_back(i, n + j);
        }
      if (!edge) continue;
      g.A(i, n + j) = g.A(n + j, i) = 1.0;
      if (f.tuple) {
        if (overlaps(h.terms, f.tuple->subject)) g.Ts(i, n + j) = g.Ts(n + j, i) = 1.0;
        if (overlaps(h.terms, f.tuple->predicate)) g.Tp(i, n + j) = g.Tp(n + j, i) = 1.0;
        if (overlaps(h.terms, f.tuple->object)) g.To(i, n + j) = g.To(n + j, i) = 1.0;
      }
      if (f.kind && *f.kind == FactKind::Abstract) g.Fab(i, n + j) = g.Fab(n + j, i) = 1.0;
    }
  }
  return g;
}

struct ThetaParams {
  Family family = Family::ExplanationLp;
  std::map<std::string, double> values;  // sorted keys define the vector order
  EmbeddingAdapter adapter;

  static const std::vector<std::string>& names(Family f) {
    static const std::vector<std::string> tuple_names = {"lr", "sr"};
    static const std::vector<std::string> elp_names = {"aa", "ga",  "gg",  "qal",
                                                       "qas", "qgl", "qgs"};
    return f == Family::TupleIlp ? tuple_names : elp_names;
  }

  static ThetaParams defaults(Family f, double value = 0.5) {
    ThetaParams t;
    t.family = f;
    for (const auto& name : names(f)) t.values[name] = value;
    return t;
  }

  double at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ValidationError("theta has no parameter '" + name + "'");
    return it->second;
  }

  Eigen::VectorXd vector() const {
    const auto& ns = names(family);
    Eigen::VectorXd v(ns.size());
    for (std::size_t i = 0; i < ns.size(); ++i) v[static_cast<int>(i)] = at(ns[i]);
    return v;
  }

  void set_vector(const Eigen::VectorXd& v) {
    const auto& ns = names(family);
    if (static_cast<std::size_t>(v.size()) != ns.size())
      throw ValidationError("theta vector size mismatch");
    for (std::size_t i = 0; i < ns.size(); ++i) values[ns[i]] = v[static_cast<int>(i)];
  }

  void clamp01() {
    for (auto& [k, v] : values) v = std::min(1.0, std::max(0.0, v));
  }
};

namespace detail {

inline void require_kinds(const FactGraph& g) {
  for (const auto& f : g.facts)
    if (!f.kind) throw UnlabeledFactError("fact '" + f.id + "' has no grounding/abstract label");
}

}  // namespace detail

// W is linear in theta at fixed scores; these masks are the basis matrices,
// so W(theta) = sum_p theta_p * basis[p] exactly, and dW/dtheta_p = basis[p].
inline std::map<std::string, Eigen::MatrixXd> weight_basis(const FactGraph& g,
                                                           const RelevanceScores& sc,
                                                           Family family) {
  const int n = g.n(), k = g.k(), N = g.N();
  std::map<std::string, Eigen::MatrixXd> basis;
  for (const auto& name : ThetaParams::names(family)) basis[name] = Eigen::MatrixXd::Zero(N, N);

  auto put = [&](const std::string& name, int a, int b, double v) {
    basis[name](a, b) += v;
    basis[name](b, a) += v;
  };

  if (family == Family::TupleIlp) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        if (g.A(i, n + j) == 0.0) continue;
        put("sr", i, n + j, sc.s(i, j));
        put("lr", i, n + j, sc.l(i, j));
      }
    return basis;
  }

  detail::require_kinds(g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      bool abs = *g.facts[j].kind == FactKind::Abstract;
      put(abs ? "qal" : "qgl", i, n + j, sc.l(i, j));
      put(abs ? "qas" : "qgs", i, n + j, sc.s(i, j));
    }
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) {
      double lff = lexical_relevance(g.facts[a].terms, g.facts[b].terms);
      if (lff == 0.0) continue;
      bool abs_a = *g.facts[a].kind == FactKind::Abstract;
      bool abs_b = *g.facts[b].kind == FactKind::Abstract;
      if (abs_a && abs_b)
        put("aa", n + a, n + b, -lff);
      else if (!abs_a && !abs_b)
        put("gg", n + a, n + b, -lff);
      else
        put("ga", n + a, n + b, lff);
    }
  return basis;
}

inline Eigen::MatrixXd assemble_weights(const std::map<std::string, Eigen::MatrixXd>& basis,
                                        const ThetaParams& theta) {
  Eigen::MatrixXd W;
  for (const auto& [name, B] : basis) {
    if (W.size() == 0)
      W = theta.at(name) * B;
    else
      W += theta.at(name) * B;
  }
  return W;
}

inline Eigen::MatrixXd weights_tupleilp(const FactGraph& g, const RelevanceScores& sc,
                                        const ThetaParams& theta) {
  return assemble_weights(weight_basis(g, sc, Family::TupleIlp), theta);
}

inline Eigen::MatrixXd weights_explanationlp(const FactGraph& g, const RelevanceScores& sc,
                                             const ThetaParams& theta) {
  return assemble_weights(weight_basis(g, sc, Family::ExplanationLp), theta);
}

inline Eigen::MatrixXd weights(const FactGraph& g, const RelevanceScores& sc,
                               const ThetaParams& theta) {
  return theta.family == Family::TupleIlp ? weights_tupleilp(g, sc, theta)
                                          : weights_explanationlp(g, sc, theta);
}

// dW_ij / dS_ij on hypothesis-fact entries, for chaining loss gradients back
// through the cosine into the embedding adapter.
inline Eigen::MatrixXd semantic_coeff(const FactGraph& g, const ThetaParams& theta) {
  const int n = g.n(), k = g.k();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n, k);
  if (theta.family == Family::TupleIlp) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        if (g.A(i, n + j) != 0.0) c(i, j) = theta.at("sr");
    return c;
  }
  detail::require_kinds(g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      c(i, j) = *g.facts[j].kind == FactKind::Abstract ? theta.at("qas") : theta.at("qgs");
  return c;
}

}  // namespace diffsel

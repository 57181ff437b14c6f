#pragma once

// Shared test-only helpers: hand-built graph pieces and the seeded random
// instance generator used by both the unit and acceptance suites.

#include <random>
#include <string>
#include <vector>

#include "diffsel/constraints.hpp"
#include "diffsel/graph.hpp"
#include "diffsel/sdp.hpp"

namespace diffsel::testgen {

inline Hypothesis mk_hyp(std::initializer_list<std::string> terms, int index = 0) {
  Hypothesis h;
  h.question_id = "q";
  h.candidate_index = index;
  h.terms = TermSet(terms);
  h.embedding_key = "q#" + std::to_string(index);
  return h;
}

inline Fact mk_fact(const std::string& id, std::initializer_list<std::string> terms,
                    std::optional<FactKind> kind = std::nullopt) {
  Fact f;
  f.id = id;
  f.terms = TermSet(terms);
  f.kind = kind;
  return f;
}

inline Fact mk_tuple_fact(const std::string& id, std::initializer_list<std::string> subj,
                          std::initializer_list<std::string> pred,
                          std::initializer_list<std::string> obj,
                          std::optional<FactKind> kind = std::nullopt) {
  Fact f;
  f.id = id;
  f.kind = kind;
  SpoTuple t;
  t.subject = TermSet(subj);
  t.predicate = TermSet(pred);
  t.object = TermSet(obj);
  f.tuple = t;
  f.terms = t.subject;
  f.terms.insert(t.predicate.begin(), t.predicate.end());
  f.terms.insert(t.object.begin(), t.object.end());
  return f;
}

struct RandomInstance {
  FactGraph g;
  ConstraintSet cs;
  Eigen::MatrixXd W;
};

// Random bipartite instances with 2-4 hypotheses, 4-8 facts, term structure
// drawn from a 12-token pool, random SPO partitions and kind labels, and
// uniform [0,1] weights on the family's support. Resamples until the
// brute-force oracle confirms a feasible integral selection.
inline RandomInstance make_random_instance(std::uint64_t seed, Family family,
                                           const Hyperparams& hp = Hyperparams{},
                                           int fixed_n = -1, int fixed_k = -1) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng(seed * 1000003ull + attempt);
    auto randint = [&](int lo, int hi) {
      return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };

    const int n = fixed_n > 0 ? fixed_n : randint(2, 4);
    const int k = fixed_k > 0 ? fixed_k : randint(4, 8);
    std::vector<std::string> pool;
    for (int t = 0; t < 12; ++t) pool.push_back("t" + std::to_string(t));

    auto draw_terms = [&](int lo, int hi) {
      TermSet s;
      int cnt = randint(lo, hi);
      while (static_cast<int>(s.size()) < cnt) s.insert(pool[rng() % pool.size()]);
      return s;
    };

    std::vector<Hypothesis> hyps;
    for (int i = 0; i < n; ++i) {
      Hypothesis h = mk_hyp({}, i);
      h.terms = draw_terms(3, 5);
      hyps.push_back(std::move(h));
    }

    std::vector<Fact> facts;
    for (int j = 0; j < k; ++j) {
      Fact f;
      f.id = "f" + std::to_string(10 + j);  // keeps id order == index order
      f.terms = draw_terms(2, 4);
      bool connected = false;
      for (const auto& h : hyps)
        if (lexical_relevance(h.terms, f.terms) > 0) connected = true;
      if (!connected) {
        const auto& ht = hyps[rng() % hyps.size()].terms;
        auto it = ht.begin();
        std::advance(it, static_cast<long>(rng() % ht.size()));
        f.terms.insert(*it);
      }
      SpoTuple t;
      for (const auto& term : f.terms) {
        switch (rng() % 3) {
          case 0: t.subject.insert(term); break;
          case 1: t.predicate.insert(term); break;
          default: t.object.insert(term); break;
        }
      }
      f.tuple = t;
      f.kind = (rng() % 2 == 0) ? FactKind::Grounding : FactKind::Abstract;
      facts.push_back(std::move(f));
    }

    RandomInstance inst;
    inst.g = build_graph(hyps, facts);
    if (inst.g.k() != k) continue;  // a fact was dropped; resample for size stability
    try {
      inst.cs = compile(inst.g, family, hp);
    } catch (const ValidationError&) {
      continue;
    }

    const int N = inst.g.N();
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    inst.W = Eigen::MatrixXd::Zero(N, N);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        if (family == Family::TupleIlp && inst.g.A(i, n + j) == 0.0) continue;
        double w = uni(rng);
        inst.W(i, n + j) = inst.W(n + j, i) = w;
      }
    if (family == Family::ExplanationLp)
      for (int a = 0; a < k; ++a)
        for (int b = a + 1; b < k; ++b) {
          double w = uni(rng);
          inst.W(n + a, n + b) = inst.W(n + b, n + a) = w;
        }

    try {
      brute_force_ilp(inst.W, inst.cs, inst.g);
    } catch (const SolverError&) {
      continue;  // integrally infeasible draw
    }
    return inst;
  }
}

}  // namespace diffsel::testgen

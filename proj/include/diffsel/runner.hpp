#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "diffsel/constraints.hpp"
#include "diffsel/corpus.hpp"
#include "diffsel/graph.hpp"
#include "diffsel/relevance.hpp"
#include "diffsel/sdp.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

struct PipelineConfig {
  Family family = Family::ExplanationLp;
  int k = 5;  // retrieval depth per hypothesis
  Hyperparams hp;
  SdpSettings sdp;
  RetrievalMode retrieval = RetrievalMode::Semantic;
};

// One question prepared for the solver: hypotheses, the retrieved fact
// roster as a graph, relevance scores over that roster, and the compiled
// constraint set. Everything here is independent of theta, so training can
// build it once per question and reuse it across epochs. The scores depend
// on the adapter; callers that train the adapter re-score via rescore().
struct QuestionInstance {
  std::string question_id;
  std::vector<Hypothesis> hyps;
  FactGraph g;
  RelevanceScores scores;
  ConstraintSet cs;
};

inline QuestionInstance build_instance(const Corpus& c, const QuestionRecord& q,
                                       const PipelineConfig& cfg,
                                       const EmbeddingAdapter* adapter = nullptr) {
  QuestionInstance qi;
  qi.question_id = q.id;
  qi.hyps = build_hypotheses(q, c.stopwords);

  // Fact roster: union of the per-hypothesis top-k lists, deduplicated,
  // ordered by id. Retrieval ranks by the stored embeddings; the adapter
  // only reweights scoring, it does not re-rank retrieval.
  std::set<int> chosen;
  for (const auto& h : qi.hyps) {
    Retrieval r = retrieve_top_k(c, h, cfg.k, cfg.retrieval);
    chosen.insert(r.fact_indices.begin(), r.fact_indices.end());
  }
  std::vector<Fact> roster;
  roster.reserve(chosen.size());
  for (int idx : chosen) roster.push_back(c.facts[static_cast<std::size_t>(idx)]);
  std::sort(roster.begin(), roster.end(), [](const Fact& a, const Fact& b) { return a.id < b.id; });

  qi.g = build_graph(qi.hyps, std::move(roster));
  qi.scores = score_pairs(c, qi.hyps, qi.g.facts, adapter);
  qi.cs = compile(qi.g, cfg.family, cfg.hp);
  return qi;
}

// Recompute the semantic half of the scores under the current adapter.
// Lexical overlap is untouched and the roster is fixed by construction.
inline void rescore(QuestionInstance& qi, const Corpus& c, const EmbeddingAdapter* adapter) {
  qi.scores = score_pairs(c, qi.hyps, qi.g.facts, adapter);
}

struct QuestionResult {
  SdpSolution sol;
  Selection sel;
};

// Weight assembly + solve + rounding for one prepared question. A solve
// that does not reach Optimal throws SolverError; callers in training and
// evaluation catch it and skip the example.
inline QuestionResult solve_instance(const QuestionInstance& qi, const ThetaParams& theta,
                                     const SdpSettings& settings = {}) {
  Eigen::MatrixXd W = weights(qi.g, qi.scores, theta);
  SdpSolution sol = solve(make_problem(W, qi.cs, settings));
  if (sol.status != SolveStatus::Optimal) {
    throw SolverError("solve did not reach optimality for question " + qi.question_id);
  }
  QuestionResult r{std::move(sol), {}};
  r.sel = round_solution(r.sol, qi.g, qi.cs.hp.m);
  return r;
}

namespace detail {

// A question prepared once for a whole training or search run. Retrieval
// and the graph do not depend on theta or the adapter, so only the scores
// are refreshed while parameters move.
struct PreparedExample {
  const QuestionRecord* q = nullptr;
  std::optional<QuestionInstance> qi;  // empty when the instance cannot be built
  Eigen::VectorXd targets;             // explanation targets over the roster
  bool supervised = false;             // explanation loss applies
  std::vector<Eigen::VectorXd> hyp_vecs, fact_vecs;  // raw embeddings, adapter chain
};

inline std::vector<PreparedExample> prepare_examples(const Corpus& corpus,
                                                     const PipelineConfig& pcfg, bool with_vecs,
                                                     int jobs) {
  std::vector<PreparedExample> prep(corpus.questions.size());
  parallel_for(corpus.questions.size(), jobs, [&](std::size_t i) {
    PreparedExample& ex = prep[i];
    ex.q = &corpus.questions[i];
    try {
      ex.qi = build_instance(corpus, *ex.q, pcfg);
    } catch (const EmptyGraphError&) {
      return;  // no usable facts: permanently skipped
    } catch (const InfeasibleCardinalityError&) {
      return;  // roster smaller than m: permanently skipped
    }
    if (with_vecs) {
      for (const auto& h : ex.qi->hyps)
        ex.hyp_vecs.push_back(corpus.embedding_for(h.embedding_key));
      for (const auto& f : ex.qi->g.facts) ex.fact_vecs.push_back(corpus.embedding_for(f.id));
    }
  });
  return prep;
}

// Scores under the live adapter. The lexical half and the roster are fixed;
// only the cosine half moves while the adapter trains.
inline RelevanceScores live_scores(const PreparedExample& ex, const ThetaParams& theta) {
  RelevanceScores sc = ex.qi->scores;
  if (theta.adapter.enabled) {
    const int n = ex.qi->g.n(), k = ex.qi->g.k();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        sc.s(i, j) = semantic_relevance(ex.hyp_vecs[static_cast<std::size_t>(i)],
                                        ex.fact_vecs[static_cast<std::size_t>(j)], &theta.adapter);
  }
  return sc;
}

// Answer accuracy over a slice of prepared examples: correct / answered,
// where questions whose instance or solve failed are not answered.
inline double slice_accuracy(const std::vector<PreparedExample>& prep, std::size_t begin,
                             std::size_t end, const ThetaParams& theta,
                             const SdpSettings& settings, int jobs) {
  const std::size_t count = end - begin;
  std::vector<int> verdict(count, -1);
  parallel_for(count, jobs, [&](std::size_t w) {
    const PreparedExample& ex = prep[begin + w];
    if (!ex.qi) return;
    try {
      RelevanceScores sc = live_scores(ex, theta);
      SdpSolution sol = solve(make_problem(weights(ex.qi->g, sc, theta), ex.qi->cs, settings));
      if (sol.status != SolveStatus::Optimal) return;
      Selection sel = round_solution(sol, ex.qi->g, ex.qi->cs.hp.m);
      verdict[w] = sel.answer_index == ex.q->answer ? 1 : 0;
    } catch (const Error&) {
    }
  });
  int answered = 0, correct = 0;
  for (int v : verdict) {
    if (v < 0) continue;
    ++answered;
    correct += v;
  }
  return answered == 0 ? 0.0 : static_cast<double>(correct) / answered;
}

}  // namespace detail

}  // namespace diffsel

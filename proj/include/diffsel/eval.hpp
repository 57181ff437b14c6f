#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "diffsel/runner.hpp"

namespace diffsel {

struct PerQuestion {
  std::string id;
  int predicted = -1;  // -1 when the question was skipped
  int gold = 0;
  int explanation_hits = 0;  // |top-m predicted facts ∩ gold explanations|
};

struct EvalReport {
  double accuracy = 0.0;               // correct / answered
  std::map<int, double> precision_at;  // K -> macro P@K over gold-bearing questions
  std::vector<PerQuestion> per_question;
  int skipped = 0;
};

// Cutoffs reported by evaluate(). P@K divides by K even when the roster is
// shorter, so the values are comparable across questions.
inline const std::vector<int>& precision_cutoffs() {
  static const std::vector<int> ks = {1, 2, 3, 5, 10};
  return ks;
}

namespace detail {

// Fact indices ranked the way round_solution ranks them: probability on a
// 1e-9 grid descending, then fact id ascending.
inline std::vector<int> ranked_facts(const FactGraph& g, const Eigen::VectorXd& node_probs) {
  const int n = g.n(), k = g.k();
  std::vector<int> order(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) order[static_cast<std::size_t>(j)] = j;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    long long qa = std::llround(node_probs[n + a] * 1e9);
    long long qb = std::llround(node_probs[n + b] * 1e9);
    if (qa != qb) return qa > qb;
    return g.facts[static_cast<std::size_t>(a)].id < g.facts[static_cast<std::size_t>(b)].id;
  });
  return order;
}

}  // namespace detail

// Full pipeline evaluation at retrieval depth k. Questions whose instance
// cannot be built or whose solve fails are skipped; accuracy is over the
// answered remainder. Precision@K is macro-averaged over the answered
// questions that carry gold explanations.
inline EvalReport evaluate(const Corpus& corpus, Family family, const ThetaParams& theta, int k,
                           const Hyperparams& hp = {}, const SdpSettings& sdp = {}, int jobs = 1) {
  PipelineConfig pcfg;
  pcfg.family = family;
  pcfg.k = k;
  pcfg.hp = hp;
  pcfg.sdp = sdp;

  auto prep = detail::prepare_examples(corpus, pcfg, theta.adapter.enabled, jobs);

  EvalReport rep;
  rep.per_question.resize(prep.size());
  std::vector<std::map<int, double>> prec(prep.size());

  parallel_for(prep.size(), jobs, [&](std::size_t i) {
    const detail::PreparedExample& ex = prep[i];
    PerQuestion& pq = rep.per_question[i];
    pq.id = ex.q->id;
    pq.gold = ex.q->answer;
    if (!ex.qi) return;
    try {
      RelevanceScores sc = detail::live_scores(ex, theta);
      SdpSolution sol = solve(make_problem(weights(ex.qi->g, sc, theta), ex.qi->cs, sdp));
      if (sol.status != SolveStatus::Optimal) return;
      Selection sel = round_solution(sol, ex.qi->g, ex.qi->cs.hp.m);
      pq.predicted = sel.answer_index;
      if (!ex.q->has_explanations) return;

      std::set<std::string> gold(ex.q->explanations.begin(), ex.q->explanations.end());
      for (const auto& id : sel.explanation_ids) pq.explanation_hits += gold.count(id) ? 1 : 0;

      auto order = detail::ranked_facts(ex.qi->g, sel.node_probs);
      for (int K : precision_cutoffs()) {
        int hits = 0;
        for (int r = 0; r < K && r < static_cast<int>(order.size()); ++r) {
          const Fact& f = ex.qi->g.facts[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
          hits += gold.count(f.id) ? 1 : 0;
        }
        prec[i][K] = static_cast<double>(hits) / K;
      }
    } catch (const Error&) {
      pq.predicted = -1;
    }
  });

  int answered = 0, correct = 0, with_gold = 0;
  std::map<int, double> psum;
  for (std::size_t i = 0; i < prep.size(); ++i) {
    const PerQuestion& pq = rep.per_question[i];
    if (pq.predicted < 0) {
      ++rep.skipped;
      continue;
    }
    ++answered;
    if (pq.predicted == pq.gold) ++correct;
    if (!prec[i].empty()) {
      ++with_gold;
      for (const auto& [K, v] : prec[i]) psum[K] += v;
    }
  }
  rep.accuracy = answered == 0 ? 0.0 : static_cast<double>(correct) / answered;
  if (with_gold > 0)
    for (const auto& [K, v] : psum) rep.precision_at[K] = v / with_gold;
  return rep;
}

// Retrieval-only baseline: each hypothesis is scored by the sum of the
// cosines of its own top-k facts and the best sum answers. No graph, no
// solver, no explanations; ties go to the smaller candidate index.
inline EvalReport ir_solver(const Corpus& corpus, int k, int jobs = 1) {
  EvalReport rep;
  rep.per_question.resize(corpus.questions.size());
  parallel_for(corpus.questions.size(), jobs, [&](std::size_t qi) {
    const QuestionRecord& q = corpus.questions[qi];
    PerQuestion& pq = rep.per_question[qi];
    pq.id = q.id;
    pq.gold = q.answer;
    auto hyps = build_hypotheses(q, corpus.stopwords);
    double best = 0.0;
    int best_i = -1;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const Eigen::VectorXd& hv = corpus.embedding_for(hyps[i].embedding_key);
      Retrieval r = retrieve_top_k(corpus, hyps[i], k, RetrievalMode::Semantic);
      double sum = 0.0;
      for (int fi : r.fact_indices)
        sum += semantic_relevance(hv, corpus.embedding_for(corpus.facts[static_cast<std::size_t>(fi)].id));
      if (best_i < 0 || sum > best) {
        best = sum;
        best_i = static_cast<int>(i);
      }
    }
    pq.predicted = best_i;
  });
  int correct = 0, answered = 0;
  for (const auto& pq : rep.per_question) {
    if (pq.predicted < 0) {
      ++rep.skipped;
      continue;
    }
    ++answered;
    if (pq.predicted == pq.gold) ++correct;
  }
  rep.accuracy = answered == 0 ? 0.0 : static_cast<double>(correct) / answered;
  return rep;
}

// Gradient-free baseline over theta. TupleIlp enumerates a grid_points x
// grid_points lattice on [0,1]^2 in lexicographic order; ExplanationLp draws
// grid_points uniform samples of the 7 parameters and visits them in sorted
// order. Candidates are scored by answer accuracy on the held-out tail and
// only a strict improvement replaces the incumbent, so exact ties resolve to
// the lexicographically smallest theta. Deterministic for a given seed.
inline ThetaParams grid_search_theta(const Corpus& corpus, Family family, int grid_points,
                                     int k = 5, const Hyperparams& hp = {},
                                     const SdpSettings& sdp = {}, std::uint64_t seed = 0,
                                     double dev_fraction = 0.2, int jobs = 1) {
  if (grid_points < 2) throw ValidationError("grid search needs at least two points");
  if (corpus.questions.empty()) throw ValidationError("corpus has no questions");
  if (dev_fraction < 0.0 || dev_fraction >= 1.0)
    throw ValidationError("dev fraction must lie in [0, 1)");

  PipelineConfig pcfg;
  pcfg.family = family;
  pcfg.k = k;
  pcfg.hp = hp;
  pcfg.sdp = sdp;
  auto prep = detail::prepare_examples(corpus, pcfg, false, jobs);

  const std::size_t n_total = corpus.questions.size();
  auto n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n_total) * dev_fraction));
  const std::size_t begin = n_dev == 0 ? 0 : n_total - n_dev;  // empty tail: score everything

  const auto& names = ThetaParams::names(family);
  std::vector<Eigen::VectorXd> candidates;
  if (family == Family::TupleIlp) {
    for (int a = 0; a < grid_points; ++a)
      for (int b = 0; b < grid_points; ++b) {
        Eigen::VectorXd v(2);
        v << static_cast<double>(a) / (grid_points - 1), static_cast<double>(b) / (grid_points - 1);
        candidates.push_back(v);
      }
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int s = 0; s < grid_points; ++s) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(names.size()));
      for (Eigen::Index p = 0; p < v.size(); ++p) v[p] = ud(rng);
      candidates.push_back(v);
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
                return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(),
                                                    b.data() + b.size());
              });
  }

  ThetaParams best = ThetaParams::defaults(family);
  double best_acc = -1.0;
  for (const auto& v : candidates) {
    ThetaParams th = ThetaParams::defaults(family);
    th.set_vector(v);
    double acc = detail::slice_accuracy(prep, begin, n_total, th, sdp, jobs);
    if (acc > best_acc) {
      best_acc = acc;
      best = th;
    }
  }
  return best;
}

struct SweepPoint {
  int k = 0;
  double accuracy = 0.0;           // full pipeline at this retrieval depth
  double baseline_accuracy = 0.0;  // ir_solver at the same depth
};

inline std::vector<SweepPoint> k_sweep(const Corpus& corpus, Family family,
                                       const ThetaParams& theta, const std::vector<int>& ks,
                                       const Hyperparams& hp = {}, const SdpSettings& sdp = {},
                                       int jobs = 1) {
  if (ks.empty()) throw ValidationError("k sweep needs at least one depth");
  std::vector<SweepPoint> points;
  for (int k : ks) {
    if (k < 1) throw ValidationError("retrieval depth must be positive");
    SweepPoint p;
    p.k = k;
    p.accuracy = evaluate(corpus, family, theta, k, hp, sdp, jobs).accuracy;
    p.baseline_accuracy = ir_solver(corpus, k, jobs).accuracy;
    points.push_back(p);
  }
  return points;
}

inline void write_sweep_json(const std::vector<SweepPoint>& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  json arr = json::array();
  for (const auto& p : points) {
    json j;
    j["k"] = p.k;
    j["accuracy"] = p.accuracy;
    j["baseline_accuracy"] = p.baseline_accuracy;
    arr.push_back(std::move(j));
  }
  out << arr.dump(2) << "\n";
}

inline void write_sweep_csv(const std::vector<SweepPoint>& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << "k,accuracy,baseline_accuracy\n";
  out.precision(17);
  for (const auto& p : points)
    out << p.k << "," << p.accuracy << "," << p.baseline_accuracy << "\n";
}

// A hand-pickable parameter point that separates the synthetic questions:
// semantic evidence in, lexical bait out. Useful as a brute-force oracle in
// tests and as a reference for what training should rediscover.
inline ThetaParams synthetic_oracle_theta() {
  ThetaParams t = ThetaParams::defaults(Family::ExplanationLp, 0.0);
  t.values["qas"] = 1.0;
  t.values["qgs"] = 0.6;
  t.values["gg"] = 1.0;
  return t;
}

// Synthetic multiple-choice corpus with planted evidence. Each question has
// four candidates; the gold one owns an abstract/grounding fact pair with
// strong cosine and a shared core term, every wrong one owns a pair of
// lexical-bait facts whose term overlap beats the gold pair while their
// cosine trails it, and distractor_ratio controls a cloud of deep
// distractors that are cosine-close to wrong candidates but share no terms,
// so they poison retrieval sums without ever entering the graph. Uniform
// theta is mildly fooled by the bait; any theta that trusts cosine over
// term overlap separates cleanly.
inline Corpus generate_synthetic_corpus(int n_questions, std::uint64_t seed,
                                        double distractor_ratio) {
  if (n_questions < 10) throw ValidationError("synthetic corpus needs at least 10 questions");
  if (!(distractor_ratio >= 0.0 && distractor_ratio <= 1.0))
    throw ValidationError("distractor ratio must lie in [0, 1]");

  const int dim = 256;
  const int n_cand = 4;
  const int n_deep = static_cast<int>(std::lround(16.0 * distractor_ratio));
  const double jitter = 0.03;

  // Planted cosines. The gold pair dominates semantically; the bait pair
  // dominates lexically (term counts below put it at 0.6 vs the gold 0.4 /
  // 0.2) and is tuned so that at uniform theta the bait wins by a nose.
  const double cos_gold_abs = 0.95, cos_gold_grd = 0.85;
  const double cos_bait = 0.50, cos_support = 0.4, cos_deep = 0.35;

  Corpus c;
  c.dim = dim;
  c.stopwords = builtin_stopwords();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);

  auto unit = [&]() {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = nd(rng);
    v.normalize();
    return v;
  };
  // Unit vector at (roughly) the requested cosine from e, jittered.
  auto plant = [&](const Eigen::VectorXd& e, double target) {
    double ct = std::clamp(target + jitter * (2.0 * ud(rng) - 1.0), 0.05, 0.99);
    Eigen::VectorXd u = unit();
    u -= u.dot(e) * e;
    u.normalize();
    return (ct * e + std::sqrt(1.0 - ct * ct) * u).eval();
  };

  auto add_fact = [&](const std::string& id, const std::string& text, FactKind kind,
                      const Eigen::VectorXd& emb) {
    Fact f;
    f.id = id;
    f.text = text;
    f.terms = extract_terms(text, c.stopwords);
    f.kind = kind;
    c.facts.push_back(std::move(f));
    c.embeddings[id] = emb;
  };

  for (int qi = 0; qi < n_questions; ++qi) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "syn%04d", qi);
    const std::string qid = buf;
    const std::string qn = std::to_string(qi);
    // Tokens end in a digit so suffix stripping never rewrites them.
    auto stem = [&](int t) { return "q" + qn + "st" + std::to_string(t) + "0"; };
    auto cand_tok = [&](int cc, int t) {
      return "q" + qn + "c" + std::to_string(cc) + "d" + std::to_string(t) + "0";
    };
    const std::string core = "q" + qn + "core0";

    std::vector<Eigen::VectorXd> e(static_cast<std::size_t>(n_cand));
    Eigen::VectorXd e_sum = Eigen::VectorXd::Zero(dim);
    for (int cc = 0; cc < n_cand; ++cc) {
      e[static_cast<std::size_t>(cc)] = unit();
      e_sum += e[static_cast<std::size_t>(cc)];
    }
    e_sum.normalize();

    const int gold = static_cast<int>(rng() % n_cand);

    QuestionRecord q;
    q.id = qid;
    q.question = stem(0) + " " + stem(1) + " " + stem(2);
    for (int cc = 0; cc < n_cand; ++cc) q.candidates.push_back(cand_tok(cc, 0) + " " + cand_tok(cc, 1));
    q.answer = gold;
    q.explanations = {qid + "_fga", qid + "_fgg"};
    q.has_explanations = true;

    for (int cc = 0; cc < n_cand; ++cc)
      c.embeddings[hypothesis_key(qid, cc)] = e[static_cast<std::size_t>(cc)];

    // Gold evidence pair: abstract fact names both candidate tokens plus the
    // core term, the grounding fact bridges one candidate token and the core.
    add_fact(qid + "_fga",
             cand_tok(gold, 0) + " " + cand_tok(gold, 1) + " " + core + " q" + qn + "owna0",
             FactKind::Abstract, plant(e[static_cast<std::size_t>(gold)], cos_gold_abs));
    add_fact(qid + "_fgg", cand_tok(gold, 0) + " " + core + " q" + qn + "owng0",
             FactKind::Grounding, plant(e[static_cast<std::size_t>(gold)], cos_gold_grd));

    // Support: weakly relevant to every candidate through one stem term.
    for (int t = 0; t < 3; ++t)
      add_fact(qid + "_fs" + std::to_string(t), stem(t) + " q" + qn + "owns" + std::to_string(t) + "0",
               FactKind::Abstract, plant(e_sum, cos_support));

    for (int cc = 0; cc < n_cand; ++cc) {
      if (cc == gold) continue;
      // Lexical bait pair: high term overlap with its candidate plus a
      // strong mutual bridge, moderate cosine.
      add_fact(qid + "_fa" + std::to_string(cc),
               cand_tok(cc, 0) + " " + cand_tok(cc, 1) + " " + stem(0) + " q" + qn + "owna" +
                   std::to_string(cc) + "0",
               FactKind::Abstract, plant(e[static_cast<std::size_t>(cc)], cos_bait));
      add_fact(qid + "_fd" + std::to_string(cc),
               cand_tok(cc, 0) + " " + cand_tok(cc, 1) + " " + stem(0) + " q" + qn + "ownd" +
                   std::to_string(cc) + "0",
               FactKind::Grounding, plant(e[static_cast<std::size_t>(cc)], cos_bait));
      // Deep distractors: cosine-close to the wrong candidate, zero term
      // overlap with anything, so only retrieval-sum baselines see them.
      for (int t = 0; t < n_deep; ++t)
        add_fact(qid + "_fx" + std::to_string(cc) + "_" + std::to_string(t),
                 "q" + qn + "jx" + std::to_string(cc) + "t" + std::to_string(t) + "0 q" + qn +
                     "jy" + std::to_string(cc) + "t" + std::to_string(t) + "0",
                 FactKind::Grounding, plant(e[static_cast<std::size_t>(cc)], cos_deep));
    }
    c.questions.push_back(std::move(q));
  }

  std::vector<TermSet> docs;
  docs.reserve(c.facts.size());
  for (const auto& f : c.facts) docs.push_back(f.terms);
  c.stats = build_kb_stats(docs);
  return c;
}

}  // namespace diffsel

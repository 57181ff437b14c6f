#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "diffsel/relevance.hpp"
#include "diffsel/util.hpp"

namespace diffsel {

using json = nlohmann::json;

enum class FactKind { Grounding, Abstract };

struct SpoTuple {
  TermSet subject, predicate, object;
  bool all_empty() const { return subject.empty() && predicate.empty() && object.empty(); }
};

struct Fact {
  std::string id;
  std::string text;
  TermSet terms;
  std::optional<FactKind> kind;
  std::optional<SpoTuple> tuple;
};

struct Hypothesis {
  std::string question_id;
  int candidate_index = 0;
  std::string text;
  TermSet terms;
  std::string embedding_key;
};

struct QuestionRecord {
  std::string id;
  std::string question;
  std::vector<std::string> candidates;
  int answer = 0;
  std::vector<std::string> explanations;
  bool has_explanations = false;
};

struct Corpus {
  std::vector<Fact> facts;
  std::vector<QuestionRecord> questions;
  std::map<std::string, Eigen::VectorXd> embeddings;
  KbStats stats;
  StopwordSet stopwords;
  int dim = 0;

  const Fact* fact_by_id(const std::string& id) const {
    auto it = fact_index.find(id);
    return it == fact_index.end() ? nullptr : &facts[it->second];
  }
  std::unordered_map<std::string, std::size_t> fact_index;

  const Eigen::VectorXd& embedding_for(const std::string& key) const {
    auto it = embeddings.find(key);
    if (it == embeddings.end())
      throw ValidationError("no embedding stored for key '" + key + "'");
    return it->second;
  }
};

inline std::string hypothesis_key(const std::string& question_id, int candidate_index) {
  return question_id + "#" + std::to_string(candidate_index);
}

namespace detail {

// Copula/verb markers tried at each token position; longest match wins at
// equal position, earliest position wins overall.
inline const std::vector<std::vector<std::string>>& spo_markers() {
  static const std::vector<std::vector<std::string>> markers = {
      {"is", "a"}, {"is"}, {"are"}, {"causes"}, {"can", "be", "used", "to"}, {"has"}, {"means"}};
  return markers;
}

inline TermSet normalize_predicate(const std::vector<std::string>& tokens) {
  TermSet out;
  for (const auto& t : tokens) {
    if (t.size() < 2) continue;  // articles inside markers ("is a") drop out
    out.insert(strip_suffix(t));
  }
  return out;
}

inline TermSet terms_of_tokens(const std::vector<std::string>& tokens, std::size_t begin,
                               std::size_t end, const StopwordSet& stop) {
  TermSet out;
  for (std::size_t i = begin; i < end && i < tokens.size(); ++i) {
    if (stop.count(tokens[i])) continue;
    std::string t = strip_suffix(tokens[i]);
    if (!t.empty()) out.insert(t);
  }
  return out;
}

}  // namespace detail

// Splits "subject marker object" on the first marker occurrence; without a
// marker every term lands in the subject.
inline SpoTuple naive_spo_split(const std::string& text, const StopwordSet& stop) {
  std::vector<std::string> toks = tokenize(text);
  const auto& markers = detail::spo_markers();
  std::size_t best_pos = 0;
  const std::vector<std::string>* best = nullptr;
  for (std::size_t pos = 0; pos < toks.size() && !best; ++pos) {
    for (const auto& m : markers) {
      if (pos + m.size() > toks.size()) continue;
      bool match = true;
      for (std::size_t j = 0; j < m.size(); ++j)
        if (toks[pos + j] != m[j]) {
          match = false;
          break;
        }
      if (match && (!best || m.size() > best->size())) {
        best_pos = pos;
        best = &m;
      }
    }
  }
  SpoTuple t;
  if (!best) {
    t.subject = detail::terms_of_tokens(toks, 0, toks.size(), stop);
    return t;
  }
  t.subject = detail::terms_of_tokens(toks, 0, best_pos, stop);
  t.predicate = detail::normalize_predicate(*best);
  t.object = detail::terms_of_tokens(toks, best_pos + best->size(), toks.size(), stop);
  return t;
}

inline std::vector<Hypothesis> build_hypotheses(const QuestionRecord& q, const StopwordSet& stop) {
  std::vector<Hypothesis> out;
  out.reserve(q.candidates.size());
  for (std::size_t i = 0; i < q.candidates.size(); ++i) {
    Hypothesis h;
    h.question_id = q.id;
    h.candidate_index = static_cast<int>(i);
    h.text = q.question + " " + q.candidates[i];
    h.terms = extract_terms(h.text, stop);
    h.embedding_key = hypothesis_key(q.id, h.candidate_index);
    out.push_back(std::move(h));
  }
  return out;
}

namespace detail {

inline json parse_jsonl_line(const std::string& line, const std::string& path, int lineno) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

inline TermSet tuple_field(const json& arr, const std::string& ctx, bool predicate) {
  if (!arr.is_array()) throw ParseError(ctx + ": tuple field must be an array of strings");
  TermSet out;
  for (const auto& el : arr) {
    if (!el.is_string()) throw ParseError(ctx + ": tuple field must be an array of strings");
    for (const auto& tok : tokenize(el.get<std::string>())) {
      if (predicate) {
        if (tok.size() < 2) continue;
        out.insert(strip_suffix(tok));
      } else {
        out.insert(strip_suffix(tok));
      }
    }
  }
  return out;
}

template <typename Fn>
inline void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    fn(parse_jsonl_line(line, path, lineno), lineno);
  }
}

}  // namespace detail

struct LoadOptions {
  std::string stopwords_path;  // empty -> bundled list
  int synth_dim = 256;         // dimension of synthesized TF-IDF embeddings
};

inline Corpus load_corpus(const std::string& kb_path, const std::string& questions_path,
                          const std::string& embeddings_path = "",
                          const LoadOptions& opt = LoadOptions{}) {
  Corpus c;
  c.stopwords =
      opt.stopwords_path.empty() ? builtin_stopwords() : load_stopwords(opt.stopwords_path);

  detail::for_each_jsonl(kb_path, [&](const json& j, int lineno) {
    Fact f;
    if (!j.contains("id") || !j["id"].is_string())
      throw ParseError(kb_path + ":" + std::to_string(lineno) + ": fact needs a string 'id'");
    f.id = j["id"].get<std::string>();
    if (!j.contains("text") || !j["text"].is_string())
      throw ValidationError("fact '" + f.id + "' needs a string 'text'");
    f.text = j["text"].get<std::string>();
    f.terms = extract_terms(f.text, c.stopwords);
    if (j.contains("kind")) {
      std::string k = j["kind"].get<std::string>();
      if (k == "grounding")
        f.kind = FactKind::Grounding;
      else if (k == "abstract")
        f.kind = FactKind::Abstract;
      else
        throw ValidationError("fact '" + f.id + "': unknown kind '" + k + "'");
    }
    if (j.contains("tuple")) {
      const json& t = j["tuple"];
      SpoTuple sp;
      if (t.contains("s")) sp.subject = detail::tuple_field(t["s"], "fact '" + f.id + "'", false);
      if (t.contains("p")) sp.predicate = detail::tuple_field(t["p"], "fact '" + f.id + "'", true);
      if (t.contains("o")) sp.object = detail::tuple_field(t["o"], "fact '" + f.id + "'", false);
      if (!sp.all_empty()) f.tuple = std::move(sp);
    } else {
      SpoTuple sp = naive_spo_split(f.text, c.stopwords);
      if (!sp.all_empty()) f.tuple = std::move(sp);
    }
    if (c.fact_index.count(f.id)) throw ValidationError("duplicate fact id '" + f.id + "'");
    c.fact_index[f.id] = c.facts.size();
    c.facts.push_back(std::move(f));
  });

  std::unordered_map<std::string, int> seen_q;
  detail::for_each_jsonl(questions_path, [&](const json& j, int lineno) {
    QuestionRecord q;
    if (!j.contains("id") || !j["id"].is_string())
      throw ParseError(questions_path + ":" + std::to_string(lineno) +
                       ": question needs a string 'id'");
    q.id = j["id"].get<std::string>();
    if (seen_q.count(q.id)) throw ValidationError("duplicate question id '" + q.id + "'");
    seen_q[q.id] = 1;
    if (!j.contains("question") || !j["question"].is_string())
      throw ValidationError("question '" + q.id + "' needs a string 'question'");
    q.question = j["question"].get<std::string>();
    if (!j.contains("candidates") || !j["candidates"].is_array() || j["candidates"].empty())
      throw ValidationError("question '" + q.id + "' needs a non-empty 'candidates' array");
    for (const auto& el : j["candidates"]) q.candidates.push_back(el.get<std::string>());
    if (!j.contains("answer") || !j["answer"].is_number_integer())
      throw ValidationError("question '" + q.id + "' needs an integer 'answer'");
    q.answer = j["answer"].get<int>();
    if (q.answer < 0 || q.answer >= static_cast<int>(q.candidates.size()))
      throw ValidationError("question '" + q.id + "': answer index out of range");
    if (j.contains("explanations")) {
      q.has_explanations = true;
      for (const auto& el : j["explanations"]) {
        std::string fid = el.get<std::string>();
        if (!c.fact_index.count(fid))
          throw ValidationError("question '" + q.id + "': explanation fact '" + fid +
                                "' is not in the KB");
        q.explanations.push_back(fid);
      }
    }
    c.questions.push_back(std::move(q));
  });

  std::vector<TermSet> docs;
  docs.reserve(c.facts.size());
  for (const auto& f : c.facts) docs.push_back(f.terms);
  c.stats = build_kb_stats(docs);

  if (!embeddings_path.empty()) {
    detail::for_each_jsonl(embeddings_path, [&](const json& j, int lineno) {
      if (!j.contains("key") || !j.contains("vec"))
        throw ParseError(embeddings_path + ":" + std::to_string(lineno) +
                         ": embedding needs 'key' and 'vec'");
      std::string key = j["key"].get<std::string>();
      const json& arr = j["vec"];
      if (!arr.is_array() || arr.empty())
        throw ValidationError("embedding '" + key + "': 'vec' must be a non-empty array");
      Eigen::VectorXd v(arr.size());
      for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<int>(i)] = arr[i].get<double>();
      if (c.dim == 0) c.dim = static_cast<int>(v.size());
      if (static_cast<int>(v.size()) != c.dim)
        throw ValidationError("embedding '" + key + "': dimension mismatch");
      double n = v.norm();
      if (n < 1e-12) throw ValidationError("embedding '" + key + "' has zero norm");
      if (c.embeddings.count(key)) throw ValidationError("duplicate embedding key '" + key + "'");
      c.embeddings[key] = v / n;
    });
    for (const auto& f : c.facts)
      if (!c.embeddings.count(f.id))
        throw ValidationError("no embedding for fact '" + f.id + "'");
    for (const auto& q : c.questions)
      for (std::size_t i = 0; i < q.candidates.size(); ++i) {
        std::string key = hypothesis_key(q.id, static_cast<int>(i));
        if (!c.embeddings.count(key))
          throw ValidationError("no embedding for hypothesis '" + key + "'");
      }
  } else {
    c.dim = opt.synth_dim;
    for (const auto& f : c.facts)
      c.embeddings[f.id] = hashed_tfidf_embed(f.text, c.stats, c.dim, c.stopwords);
    for (const auto& q : c.questions)
      for (std::size_t i = 0; i < q.candidates.size(); ++i)
        c.embeddings[hypothesis_key(q.id, static_cast<int>(i))] =
            hashed_tfidf_embed(q.question + " " + q.candidates[i], c.stats, c.dim, c.stopwords);
  }
  return c;
}

inline void write_kb_jsonl(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  for (const auto& f : c.facts) {
    json j;
    j["id"] = f.id;
    j["text"] = f.text;
    if (f.kind) j["kind"] = *f.kind == FactKind::Grounding ? "grounding" : "abstract";
    if (f.tuple) {
      json t;
      t["s"] = std::vector<std::string>(f.tuple->subject.begin(), f.tuple->subject.end());
      t["p"] = std::vector<std::string>(f.tuple->predicate.begin(), f.tuple->predicate.end());
      t["o"] = std::vector<std::string>(f.tuple->object.begin(), f.tuple->object.end());
      j["tuple"] = t;
    }
    out << j.dump() << "\n";
  }
}

inline void write_questions_jsonl(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  for (const auto& q : c.questions) {
    json j;
    j["id"] = q.id;
    j["question"] = q.question;
    j["candidates"] = q.candidates;
    j["answer"] = q.answer;
    if (q.has_explanations) j["explanations"] = q.explanations;
    out << j.dump() << "\n";
  }
}

inline void write_embeddings_jsonl(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  for (const auto& [key, vec] : c.embeddings) {
    json j;
    j["key"] = key;
    std::vector<double> v(vec.data(), vec.data() + vec.size());
    j["vec"] = v;
    out << j.dump() << "\n";
  }
}

enum class RetrievalMode { Semantic, Combined };

struct Retrieval {
  std::vector<int> fact_indices;
  bool clamped = false;
};

// Exact top-k scan over the KB. Semantic mode ranks by cosine of the stored
// vectors; combined averages cosine with lexical overlap. Ties break toward
// the smaller fact id; k beyond the KB clamps and flags.
inline Retrieval retrieve_top_k(const Corpus& c, const Hypothesis& h, int k,
                                RetrievalMode mode = RetrievalMode::Semantic) {
  if (k <= 0) throw ValidationError("retrieval depth k must be positive");
  Retrieval r;
  if (k > static_cast<int>(c.facts.size())) {
    k = static_cast<int>(c.facts.size());
    r.clamped = true;
  }
  const Eigen::VectorXd& hv = c.embedding_for(h.embedding_key);
  std::vector<std::pair<double, int>> scored;
  scored.reserve(c.facts.size());
  for (std::size_t i = 0; i < c.facts.size(); ++i) {
    const Fact& f = c.facts[i];
    double s = semantic_relevance(hv, c.embedding_for(f.id));
    double score = mode == RetrievalMode::Semantic
                       ? s
                       : 0.5 * s + 0.5 * lexical_relevance(h.terms, f.terms);
    scored.emplace_back(score, static_cast<int>(i));
  }
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return c.facts[a.second].id < c.facts[b.second].id;
  });
  for (int i = 0; i < k; ++i) r.fact_indices.push_back(scored[i].second);
  return r;
}

struct RelevanceScores {
  Eigen::MatrixXd s;  // cosine, adapter-mapped when enabled
  Eigen::MatrixXd l;  // lexical overlap
};

inline RelevanceScores score_pairs(const Corpus& c, const std::vector<Hypothesis>& hyps,
                                   const std::vector<Fact>& facts,
                                   const EmbeddingAdapter* adapter = nullptr) {
  RelevanceScores sc;
  sc.s.resize(hyps.size(), facts.size());
  sc.l.resize(hyps.size(), facts.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Eigen::VectorXd& hv = c.embedding_for(hyps[i].embedding_key);
    for (std::size_t j = 0; j < facts.size(); ++j) {
      sc.s(i, j) = semantic_relevance(hv, c.embedding_for(facts[j].id), adapter);
      sc.l(i, j) = lexical_relevance(hyps[i].terms, facts[j].terms);
    }
  }
  return sc;
}

}  // namespace diffsel

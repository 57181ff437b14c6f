#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "diffsel/util.hpp"

namespace diffsel {

using TermSet = std::set<std::string>;
using StopwordSet = std::unordered_set<std::string>;

// Bundled function-word list; data/stopwords.txt carries the same words and a
// unit test keeps the two in sync. Override per run with --stopwords.
inline const char* kBuiltinStopwords =
    "a about above after again against all also am an and any are as at be because been "
    "before being below between both but by can cannot could did do does done down during "
    "each either few for from further had has have having he her here hers herself him "
    "himself his how i if in into is it its itself just may me might mine must my myself "
    "near neither no nor not of off on once only onto or other our ours ourselves out over "
    "own per shall she should so some such than that the their theirs them themselves then "
    "there these they this those through to too under until up upon us very via was we were "
    "what when where which while who whom whose why will with within without would you your "
    "yours yourself yourselves";

inline const StopwordSet& builtin_stopwords() {
  static const StopwordSet words = [] {
    StopwordSet s;
    std::istringstream in(kBuiltinStopwords);
    std::string w;
    while (in >> w) s.insert(w);
    return s;
  }();
  return words;
}

inline StopwordSet load_stopwords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open stopword list: " + path);
  StopwordSet s;
  std::string w;
  while (in >> w) s.insert(w);
  if (s.empty()) throw ValidationError("stopword list is empty: " + path);
  return s;
}

// Lowercase and split on non-alphanumeric characters.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Light suffix normalization: drop a trailing "ing"/"ed"/"s" when the stem
// keeps at least 3 characters (a trailing "es" falls under the "s" rule), and
// collapse the doubled consonant such strips expose (fanning -> fan), except
// l/s/z which double legitimately (falling -> fall).
inline std::string strip_suffix(const std::string& tok) {
  static const char* suffixes[] = {"ing", "ed", "s"};
  auto is_vowel = [](char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; };
  for (const char* suf : suffixes) {
    std::size_t n = std::char_traits<char>::length(suf);
    if (tok.size() > n && tok.size() - n >= 3 && tok.compare(tok.size() - n, n, suf) == 0) {
      std::string stem = tok.substr(0, tok.size() - n);
      if (n >= 2) {  // ing/ed strips can expose a doubled consonant
        std::size_t m = stem.size();
        char last = stem[m - 1];
        if (m >= 2 && stem[m - 2] == last && !is_vowel(last) && last != 'l' && last != 's' &&
            last != 'z') {
          stem.pop_back();
        }
      }
      return stem;
    }
  }
  return tok;
}

// Normalized token stream with duplicates kept (term frequencies need them).
inline std::vector<std::string> term_stream(const std::string& text, const StopwordSet& stop) {
  std::vector<std::string> out;
  for (auto& tok : tokenize(text)) {
    if (stop.count(tok)) continue;
    std::string t = strip_suffix(tok);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

inline TermSet extract_terms(const std::string& text, const StopwordSet& stop) {
  TermSet s;
  for (auto& t : term_stream(text, stop)) s.insert(t);
  return s;
}

// |a n b| / max(|a|, |b|); 0 when either side is empty.
inline double lexical_relevance(const TermSet& a, const TermSet& b) {
  if (a.empty() || b.empty()) return 0.0;
  std::size_t inter = 0;
  const TermSet& small = a.size() <= b.size() ? a : b;
  const TermSet& large = a.size() <= b.size() ? b : a;
  for (const auto& t : small) inter += large.count(t);
  return static_cast<double>(inter) / static_cast<double>(std::max(a.size(), b.size()));
}

struct KbStats {
  int n_docs = 0;
  std::unordered_map<std::string, int> df;
};

inline KbStats build_kb_stats(const std::vector<TermSet>& docs) {
  KbStats st;
  st.n_docs = static_cast<int>(docs.size());
  for (const auto& d : docs)
    for (const auto& t : d) ++st.df[t];
  return st;
}

// Feature-hashed TF-IDF document vector: index = hash(term) mod dim, sign from
// the hash's top bit, weight (1 + ln tf) * ln((1+N)/(1+df)), L2-normalized.
// An all-zero result degrades to the first basis vector.
inline Eigen::VectorXd hashed_tfidf_embed(const std::string& text, const KbStats& stats, int dim,
                                          const StopwordSet& stop) {
  if (dim <= 0) throw ValidationError("embedding dimension must be positive");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  std::unordered_map<std::string, int> tf;
  for (auto& t : term_stream(text, stop)) ++tf[t];
  for (const auto& [term, count] : tf) {
    std::uint64_t h = fnv1a64(term);
    int idx = static_cast<int>(h % static_cast<std::uint64_t>(dim));
    double sign = (h >> 63) ? -1.0 : 1.0;
    auto it = stats.df.find(term);
    int df = it == stats.df.end() ? 0 : it->second;
    double w = (1.0 + std::log(static_cast<double>(count))) *
               std::log((1.0 + stats.n_docs) / (1.0 + df));
    v[idx] += sign * w;
  }
  double norm = v.norm();
  if (norm < 1e-12) {
    v.setZero();
    v[0] = 1.0;
    return v;
  }
  return v / norm;
}

// Optional linear map applied to both embeddings before the cosine; the only
// trained component besides the edge weights.
struct EmbeddingAdapter {
  Eigen::MatrixXd P;
  bool enabled = false;

  static EmbeddingAdapter identity(int dim) {
    EmbeddingAdapter a;
    a.P = Eigen::MatrixXd::Identity(dim, dim);
    a.enabled = true;
    return a;
  }
};

inline double semantic_relevance(const Eigen::VectorXd& v, const Eigen::VectorXd& w,
                                 const EmbeddingAdapter* adapter = nullptr) {
  if (v.size() != w.size()) throw ValidationError("embedding dimension mismatch");
  Eigen::VectorXd a = v, b = w;
  if (adapter && adapter->enabled) {
    a = adapter->P * v;
    b = adapter->P * w;
  }
  double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12)
    throw ZeroVectorError("ZeroVector: embedding has near-zero norm under the current map");
  double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace diffsel

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "diffsel/diffgrad.hpp"
#include "diffsel/runner.hpp"

namespace diffsel {

// L1 distance between the hypothesis probabilities and the one-hot gold
// answer. The subgradient is the sign pattern; exact ties contribute zero.
inline double answer_loss(const Eigen::VectorXd& probs, int gold,
                          Eigen::VectorXd* grad = nullptr) {
  if (gold < 0 || gold >= probs.size()) throw ValidationError("gold answer index out of range");
  if (grad) *grad = Eigen::VectorXd::Zero(probs.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    double d = probs[i] - (i == gold ? 1.0 : 0.0);
    loss += std::abs(d);
    if (grad && std::abs(d) > 1e-12) (*grad)[i] = d > 0.0 ? 1.0 : -1.0;
  }
  return loss;
}

// Mean binary cross entropy over the fact roster against 0/1 targets.
// Probabilities are clamped to [1e-6, 1 - 1e-6] before the logs; where the
// clamp is active the gradient is zero.
inline double explanation_loss(const Eigen::VectorXd& probs, const Eigen::VectorXd& targets,
                               Eigen::VectorXd* grad = nullptr) {
  if (probs.size() != targets.size()) throw ValidationError("explanation target size mismatch");
  if (probs.size() == 0) throw ValidationError("explanation loss needs at least one fact");
  const double lo = 1e-6, hi = 1.0 - 1e-6;
  const double inv = 1.0 / static_cast<double>(probs.size());
  if (grad) *grad = Eigen::VectorXd::Zero(probs.size());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    double p = std::clamp(probs[j], lo, hi);
    double y = targets[j];
    loss -= inv * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    if (grad && probs[j] > lo && probs[j] < hi) (*grad)[j] = inv * (p - y) / (p * (1.0 - p));
  }
  return loss;
}

// 0/1 targets over the graph roster from the question's gold explanation
// ids. Gold ids absent from the roster cannot be supervised; they are
// counted so callers can report how much supervision retrieval dropped.
inline Eigen::VectorXd explanation_targets(const FactGraph& g,
                                           const std::vector<std::string>& gold_ids,
                                           int* missing = nullptr) {
  std::set<std::string> gold(gold_ids.begin(), gold_ids.end());
  Eigen::VectorXd t = Eigen::VectorXd::Zero(g.k());
  int hit = 0;
  for (int j = 0; j < g.k(); ++j) {
    if (gold.count(g.facts[j].id)) {
      t[j] = 1.0;
      ++hit;
    }
  }
  if (missing) *missing += static_cast<int>(gold.size()) - hit;
  return t;
}

// Adam with decoupled weight decay. One instance per parameter block.
class AdamW {
 public:
  explicit AdamW(Eigen::Index size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1),
        b2_(beta2),
        eps_(eps),
        m_(Eigen::VectorXd::Zero(size)),
        v_(Eigen::VectorXd::Zero(size)) {}

  void step(Eigen::Ref<Eigen::VectorXd> param, const Eigen::VectorXd& grad, double lr, double wd) {
    if (param.size() != m_.size() || grad.size() != m_.size())
      throw ValidationError("optimizer size mismatch");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseProduct(grad).eval();
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      double mhat = m_[i] / c1;
      double vhat = v_[i] / c2;
      param[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * param[i]);
    }
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  Eigen::VectorXd m_, v_;
};

struct TrainConfig {
  int epochs = 30;
  double lr = 0.01;
  int batch_size = 8;
  double weight_decay = 0.0;
  bool use_explanation_loss = true;
  bool adapter_enabled = false;
  std::uint64_t seed = 0;
  bool determinism = false;
  double dev_fraction = 0.2;  // tail of the question list held out for model selection
  int k = 5;                  // retrieval depth per hypothesis
  int jobs = 1;
  Hyperparams hp;
  SdpSettings sdp;
};

struct Checkpoint {
  ThetaParams theta;
  int epoch = 0;
  double dev_accuracy = 0.0;
};

inline std::string config_hash(Family family, const TrainConfig& cfg) {
  json j;
  j["adapter_enabled"] = cfg.adapter_enabled;
  j["batch_size"] = cfg.batch_size;
  j["determinism"] = cfg.determinism;
  j["dev_fraction"] = cfg.dev_fraction;
  j["epochs"] = cfg.epochs;
  j["family"] = family_name(family);
  j["k"] = cfg.k;
  j["lr"] = cfg.lr;
  j["m"] = cfg.hp.m;
  j["seed"] = cfg.seed;
  j["use_explanation_loss"] = cfg.use_explanation_loss;
  j["w"] = {cfg.hp.w1, cfg.hp.w2, cfg.hp.w3, cfg.hp.w4};
  j["weight_decay"] = cfg.weight_decay;
  return hex64(fnv1a64(j.dump()));
}

inline json checkpoint_to_json(const Checkpoint& ckpt, const std::string& cfg_hash) {
  json j;
  j["family"] = family_name(ckpt.theta.family);
  j["theta"] = json::object();
  for (const auto& [name, value] : ckpt.theta.values) j["theta"][name] = value;
  json a;
  a["enabled"] = ckpt.theta.adapter.enabled;
  if (ckpt.theta.adapter.enabled) {
    const Eigen::MatrixXd& P = ckpt.theta.adapter.P;
    a["dim"] = static_cast<int>(P.rows());
    json rows = json::array();
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < P.cols(); ++c) row.push_back(P(r, c));
      rows.push_back(std::move(row));
    }
    a["P"] = std::move(rows);
  }
  j["adapter"] = std::move(a);
  j["config_hash"] = cfg_hash;
  j["epoch"] = ckpt.epoch;
  j["dev_accuracy"] = ckpt.dev_accuracy;
  return j;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt,
                             const std::string& cfg_hash) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << checkpoint_to_json(ckpt, cfg_hash).dump(2) << "\n";
}

inline Checkpoint read_checkpoint(const std::string& path, std::string* cfg_hash = nullptr) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("family") || !j.contains("theta"))
    throw ParseError(path + ": not a checkpoint file");
  Checkpoint ckpt;
  ckpt.theta.family = parse_family(j["family"].get<std::string>());
  const auto& ns = ThetaParams::names(ckpt.theta.family);
  for (const auto& name : ns) {
    if (!j["theta"].contains(name))
      throw ParseError(path + ": theta is missing parameter '" + name + "'");
    double v = j["theta"][name].get<double>();
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ParseError(path + ": theta parameter '" + name + "' outside [0,1]");
    ckpt.theta.values[name] = v;
  }
  if (j["theta"].size() != ns.size()) throw ParseError(path + ": theta has unknown parameters");
  if (j.contains("adapter") && j["adapter"].value("enabled", false)) {
    int dim = j["adapter"].at("dim").get<int>();
    if (dim <= 0) throw ParseError(path + ": bad adapter dimension");
    const json& rows = j["adapter"].at("P");
    if (static_cast<int>(rows.size()) != dim) throw ParseError(path + ": bad adapter matrix");
    ckpt.theta.adapter.P.resize(dim, dim);
    for (int r = 0; r < dim; ++r) {
      if (static_cast<int>(rows[r].size()) != dim) throw ParseError(path + ": bad adapter matrix");
      for (int c = 0; c < dim; ++c) ckpt.theta.adapter.P(r, c) = rows[r][c].get<double>();
    }
    ckpt.theta.adapter.enabled = true;
  }
  ckpt.epoch = j.value("epoch", 0);
  ckpt.dev_accuracy = j.value("dev_accuracy", 0.0);
  if (cfg_hash && j.contains("config_hash")) *cfg_hash = j["config_hash"].get<std::string>();
  return ckpt;
}

struct FitStats {
  std::vector<double> train_loss;    // index 1..epochs; [0] unused
  std::vector<double> dev_accuracy;  // index 0 is the pre-training eval
  std::vector<int> skipped;          // per epoch, like train_loss
  int skipped_total = 0;
  int gold_missing = 0;
};

namespace detail {

struct ExampleGrad {
  bool ok = false;
  double loss = 0.0;
  std::map<std::string, double> dtheta;
  Eigen::MatrixXd dadapter;
};

inline void forward_backward(const PreparedExample& ex, const ThetaParams& theta,
                             const TrainConfig& cfg, ExampleGrad& out) {
  const QuestionInstance& qi = *ex.qi;
  RelevanceScores sc = live_scores(ex, theta);
  SdpProblem prob = make_problem(weights(qi.g, sc, theta), qi.cs, cfg.sdp);
  SdpSolution sol = solve(prob);
  if (sol.status != SolveStatus::Optimal) return;

  const int n = qi.g.n(), k = qi.g.k(), N = qi.g.N();
  Eigen::VectorXd diag = sol.Z.diagonal().segment(1, N);
  Eigen::VectorXd probs = diag.cwiseMax(0.0).cwiseMin(1.0);

  Eigen::VectorXd ga;
  out.loss = answer_loss(probs.head(n), ex.q->answer, &ga);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(prob.dim, prob.dim);
  for (int i = 0; i < n; ++i)
    if (diag[i] > 0.0 && diag[i] < 1.0) G(1 + i, 1 + i) = ga[i];

  if (cfg.use_explanation_loss && ex.supervised) {
    Eigen::VectorXd ge;
    out.loss += explanation_loss(probs.tail(k), ex.targets, &ge);
    for (int j = 0; j < k; ++j)
      if (diag[n + j] > 0.0 && diag[n + j] < 1.0) G(1 + n + j, 1 + n + j) = ge[j];
  }

  WeightContext ctx{qi.g, sc, theta,
                    theta.adapter.enabled ? ex.hyp_vecs : std::vector<Eigen::VectorXd>{},
                    theta.adapter.enabled ? ex.fact_vecs : std::vector<Eigen::VectorXd>{}};
  GradientBundle b = solution_gradient(prob, sol, G, &ctx);
  out.dtheta = std::move(b.dL_dtheta);
  if (theta.adapter.enabled) out.dadapter = std::move(b.dL_dAdapter);
  out.ok = true;
}

}  // namespace detail

// Gradient training loop. Returns the checkpoint with the best dev accuracy
// seen, the untrained parameters included: an epoch only replaces it by a
// strict improvement. One JSONL line per epoch goes to `log` when given.
inline Checkpoint fit(const Corpus& corpus, Family family, const TrainConfig& cfg,
                      std::ostream* log = nullptr, FitStats* stats = nullptr) {
  if (cfg.epochs < 1) throw ValidationError("training requires at least one epoch");
  if (cfg.lr < 0.0 || !std::isfinite(cfg.lr)) throw ValidationError("learning rate must be >= 0");
  if (cfg.batch_size < 1) throw ValidationError("batch size must be positive");
  if (cfg.dev_fraction < 0.0 || cfg.dev_fraction >= 1.0)
    throw ValidationError("dev fraction must lie in [0, 1)");
  if (corpus.questions.empty()) throw ValidationError("corpus has no questions");

  PipelineConfig pcfg;
  pcfg.family = family;
  pcfg.k = cfg.k;
  pcfg.hp = cfg.hp;
  pcfg.sdp = cfg.sdp;

  const std::size_t n_total = corpus.questions.size();
  const auto n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n_total) * cfg.dev_fraction));
  const std::size_t n_train = n_total - n_dev;
  if (n_train == 0) throw ValidationError("training split is empty");
  const int jobs = cfg.determinism ? 1 : std::max(1, cfg.jobs);

  TrainConfig run = cfg;
  run.jobs = jobs;

  ThetaParams theta = ThetaParams::defaults(family);
  if (cfg.adapter_enabled) {
    if (corpus.dim <= 0) throw ValidationError("adapter training needs embeddings");
    theta.adapter = EmbeddingAdapter::identity(corpus.dim);
  }

  auto prep = detail::prepare_examples(corpus, pcfg, cfg.adapter_enabled, jobs);
  int gold_missing = 0;
  for (auto& ex : prep) {
    if (!ex.qi || !ex.q->has_explanations) continue;
    ex.targets = explanation_targets(ex.qi->g, ex.q->explanations, &gold_missing);
    ex.supervised = true;
  }

  FitStats local;
  FitStats& st = stats ? *stats : local;
  st.train_loss.assign(static_cast<std::size_t>(cfg.epochs) + 1, 0.0);
  st.dev_accuracy.assign(static_cast<std::size_t>(cfg.epochs) + 1, 0.0);
  st.skipped.assign(static_cast<std::size_t>(cfg.epochs) + 1, 0);
  st.gold_missing = gold_missing;

  st.dev_accuracy[0] = detail::slice_accuracy(prep, n_train, n_total, theta, cfg.sdp, jobs);
  Checkpoint best{theta, 0, st.dev_accuracy[0]};
  if (log) {
    json line;
    line["epoch"] = 0;
    line["train_loss"] = nullptr;
    line["dev_acc"] = st.dev_accuracy[0];
    line["skipped"] = 0;
    *log << line.dump() << "\n";
  }

  const auto& names = ThetaParams::names(family);
  AdamW opt_theta(static_cast<Eigen::Index>(names.size()));
  AdamW opt_adapter(cfg.adapter_enabled ? static_cast<Eigen::Index>(corpus.dim) * corpus.dim : 0);

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    int contributed = 0, skipped = 0;

    for (std::size_t at = 0; at < n_train; at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t take = std::min<std::size_t>(cfg.batch_size, n_train - at);
      std::vector<detail::ExampleGrad> slot(take);
      parallel_for(take, jobs, [&](std::size_t w) {
        const detail::PreparedExample& ex = prep[order[at + w]];
        if (!ex.qi) return;
        try {
          detail::forward_backward(ex, theta, run, slot[w]);
        } catch (const Error&) {
          // example-level failure: corpus-level problems already surfaced
          // during preparation, so whatever breaks here is data-specific
          // (numerical breakdown, degenerate adapter image) and is skipped
        }
      });

      Eigen::VectorXd gt = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(names.size()));
      Eigen::MatrixXd gA;
      if (cfg.adapter_enabled) gA = Eigen::MatrixXd::Zero(corpus.dim, corpus.dim);
      int ok = 0;
      for (const auto& s : slot) {
        if (!s.ok) {
          ++skipped;
          continue;
        }
        ++ok;
        loss_sum += s.loss;
        for (std::size_t p = 0; p < names.size(); ++p) {
          auto it = s.dtheta.find(names[p]);
          if (it != s.dtheta.end()) gt[static_cast<Eigen::Index>(p)] += it->second;
        }
        if (cfg.adapter_enabled) gA += s.dadapter;
      }
      contributed += ok;
      if (ok == 0) continue;

      gt /= ok;
      Eigen::VectorXd tv = theta.vector();
      opt_theta.step(tv, gt, cfg.lr, cfg.weight_decay);
      theta.set_vector(tv);
      if (cfg.adapter_enabled) {
        gA /= ok;
        Eigen::VectorXd av = Eigen::Map<Eigen::VectorXd>(theta.adapter.P.data(), theta.adapter.P.size());
        Eigen::VectorXd ag = Eigen::Map<Eigen::VectorXd>(gA.data(), gA.size());
        opt_adapter.step(av, ag, cfg.lr, cfg.weight_decay);
        theta.adapter.P = Eigen::Map<Eigen::MatrixXd>(av.data(), corpus.dim, corpus.dim);
      }
      theta.clamp01();  // last operation of every update
    }

    if (2 * skipped > static_cast<int>(n_train))
      throw SolverError("epoch " + std::to_string(epoch) + ": more than half the training examples failed");

    double dev_acc = detail::slice_accuracy(prep, n_train, n_total, theta, cfg.sdp, jobs);
    double train_loss = contributed > 0 ? loss_sum / contributed : 0.0;
    st.train_loss[static_cast<std::size_t>(epoch)] = train_loss;
    st.dev_accuracy[static_cast<std::size_t>(epoch)] = dev_acc;
    st.skipped[static_cast<std::size_t>(epoch)] = skipped;
    st.skipped_total += skipped;

    if (log) {
      json line;
      line["epoch"] = epoch;
      line["train_loss"] = train_loss;
      line["dev_acc"] = dev_acc;
      line["skipped"] = skipped;
      *log << line.dump() << "\n";
    }
    if (dev_acc > best.dev_accuracy) best = Checkpoint{theta, epoch, dev_acc};
  }
  return best;
}

}  // namespace diffsel

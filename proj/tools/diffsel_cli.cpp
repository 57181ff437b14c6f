#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "diffsel/eval.hpp"
#include "diffsel/train.hpp"

namespace {

using namespace diffsel;

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Validation:
      return 2;
    case ErrorKind::Solver:
      return 3;
    default:
      return 4;
  }
}

ThetaParams load_theta_file(const std::string& path, Family family) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (j.is_object() && j.contains("theta")) {
    Checkpoint ck = read_checkpoint(path);
    if (ck.theta.family != family)
      throw ValidationError(path + ": checkpoint family is " + family_name(ck.theta.family) +
                            ", not " + family_name(family));
    return ck.theta;
  }
  if (!j.is_object()) throw ParseError(path + ": expected a JSON object");
  const auto& names = ThetaParams::names(family);
  ThetaParams t = ThetaParams::defaults(family);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(names.begin(), names.end(), it.key()) == names.end())
      throw ValidationError(path + ": unknown theta parameter '" + it.key() + "'");
    double v = it.value().get<double>();
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError(path + ": theta parameter '" + it.key() + "' outside [0,1]");
    t.values[it.key()] = v;
  }
  return t;
}

struct Common {
  std::string kb, questions, embeddings;
  std::string family_str = "explanationlp";
  int k = 5;
  Hyperparams hp;
  int jobs = 1;

  Family family() const { return parse_family(family_str); }
  Corpus corpus() const { return load_corpus(kb, questions, embeddings); }
};

void add_corpus_options(CLI::App* cmd, Common& c) {
  cmd->add_option("kb", c.kb, "fact KB (JSONL)")->required();
  cmd->add_option("questions", c.questions, "questions (JSONL)")->required();
  cmd->add_option("--embeddings", c.embeddings, "embeddings (JSONL); synthesized if absent");
  cmd->add_option("--family", c.family_str, "constraint family: tupleilp or explanationlp")
      ->check(CLI::IsMember({"tupleilp", "explanationlp"}));
  cmd->add_option("--k", c.k, "retrieval depth per hypothesis");
  cmd->add_option("--m", c.hp.m, "explanation size");
  cmd->add_option("--w1", c.hp.w1, "tuple cover limit");
  cmd->add_option("--w2", c.hp.w2, "per-term subject/object limit");
  cmd->add_option("--w3", c.hp.w3, "per-term predicate limit");
  cmd->add_option("--w4", c.hp.w4, "abstract fact limit");
  cmd->add_option("--jobs", c.jobs, "worker threads");
}

std::unique_ptr<std::ofstream> open_out(const std::string& path, std::ostream*& out) {
  if (path.empty()) {
    out = &std::cout;
    return nullptr;
  }
  auto f = std::make_unique<std::ofstream>(path);
  if (!*f) throw ValidationError("cannot write " + path);
  out = f.get();
  return f;
}

// ---------------------------------------------------------------- solve --

struct SolveArgs {
  Common c;
  std::string theta_file, out;
  bool skip_errors = false;
};

int cmd_solve(const SolveArgs& a) {
  Corpus corpus = a.c.corpus();
  Family family = a.c.family();
  ThetaParams theta =
      a.theta_file.empty() ? ThetaParams::defaults(family) : load_theta_file(a.theta_file, family);

  PipelineConfig pcfg;
  pcfg.family = family;
  pcfg.k = a.c.k;
  pcfg.hp = a.c.hp;

  std::ostream* out = nullptr;
  auto hold = open_out(a.out, out);

  int solved = 0, skipped = 0;
  for (const auto& q : corpus.questions) {
    try {
      QuestionInstance qi = build_instance(corpus, q, pcfg,
                                           theta.adapter.enabled ? &theta.adapter : nullptr);
      QuestionResult r = solve_instance(qi, theta, pcfg.sdp);
      json line;
      line["question_id"] = q.id;
      line["answer_index"] = r.sel.answer_index;
      line["explanation_ids"] = r.sel.explanation_ids;
      std::vector<double> probs(r.sel.node_probs.data(),
                                r.sel.node_probs.data() + r.sel.node_probs.size());
      line["node_probs"] = probs;
      *out << line.dump() << "\n";
      ++solved;
    } catch (const Error& e) {
      if (!a.skip_errors) throw;
      std::cerr << "skipping " << q.id << ": " << e.what() << "\n";
      ++skipped;
    }
  }
  std::cerr << "solved " << solved << " of " << corpus.questions.size() << " questions, skipped "
            << skipped << "\n";
  return 0;
}

// ---------------------------------------------------------------- train --

struct TrainArgs {
  Common c;
  TrainConfig tc;
  std::string out = "checkpoint.json";
  std::string config_file;
};

void apply_config_file(const std::string& path, CLI::App* cmd, TrainArgs& a) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError(path + ": expected a JSON object");

  // Explicit command-line flags beat the config file.
  auto fresh = [&](const char* flag) { return cmd->count(flag) == 0; };
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    const json& v = it.value();
    if (key == "epochs" && fresh("--epochs")) a.tc.epochs = v.get<int>();
    else if (key == "lr" && fresh("--lr")) a.tc.lr = v.get<double>();
    else if (key == "batch_size" && fresh("--batch")) a.tc.batch_size = v.get<int>();
    else if (key == "weight_decay" && fresh("--weight-decay")) a.tc.weight_decay = v.get<double>();
    else if (key == "use_explanation_loss" && fresh("--answer-only"))
      a.tc.use_explanation_loss = v.get<bool>();
    else if (key == "adapter_enabled" && fresh("--adapter")) a.tc.adapter_enabled = v.get<bool>();
    else if (key == "seed" && fresh("--seed")) a.tc.seed = v.get<std::uint64_t>();
    else if (key == "determinism" && fresh("--determinism")) a.tc.determinism = v.get<bool>();
    else if (key == "dev_fraction") a.tc.dev_fraction = v.get<double>();
    else if (key == "k" && fresh("--k")) a.c.k = v.get<int>();
    else if (key == "m" && fresh("--m")) a.c.hp.m = v.get<int>();
    else if (key == "w1" && fresh("--w1")) a.c.hp.w1 = v.get<int>();
    else if (key == "w2" && fresh("--w2")) a.c.hp.w2 = v.get<int>();
    else if (key == "w3" && fresh("--w3")) a.c.hp.w3 = v.get<int>();
    else if (key == "w4" && fresh("--w4")) a.c.hp.w4 = v.get<int>();
    else if (key == "family" && fresh("--family")) a.c.family_str = v.get<std::string>();
    else if (key == "jobs" && fresh("--jobs")) a.c.jobs = v.get<int>();
    else
      throw ValidationError(path + ": unknown config key '" + key + "'");
  }
}

int cmd_train(CLI::App* cmd, TrainArgs& a) {
  if (!a.config_file.empty()) apply_config_file(a.config_file, cmd, a);
  Corpus corpus = a.c.corpus();
  Family family = a.c.family();
  a.tc.k = a.c.k;
  a.tc.hp = a.c.hp;
  a.tc.jobs = a.c.jobs;

  FitStats stats;
  Checkpoint ck = fit(corpus, family, a.tc, &std::cout, &stats);
  write_checkpoint(a.out, ck, config_hash(family, a.tc));
  std::cerr << "best epoch " << ck.epoch << ", dev accuracy " << ck.dev_accuracy << ", skipped "
            << stats.skipped_total << " examples, " << stats.gold_missing
            << " gold explanations outside retrieval\n"
            << "checkpoint written to " << a.out << "\n";
  return 0;
}

// ----------------------------------------------------------------- eval --

struct EvalArgs {
  Common c;
  std::string theta_file, out;
};

int cmd_eval(const EvalArgs& a) {
  Corpus corpus = a.c.corpus();
  Family family = a.c.family();
  ThetaParams theta =
      a.theta_file.empty() ? ThetaParams::defaults(family) : load_theta_file(a.theta_file, family);

  EvalReport rep = evaluate(corpus, family, theta, a.c.k, a.c.hp, SdpSettings{}, a.c.jobs);

  json j;
  j["accuracy"] = rep.accuracy;
  j["skipped"] = rep.skipped;
  j["precision_at"] = json::object();
  for (const auto& [K, v] : rep.precision_at) j["precision_at"][std::to_string(K)] = v;
  json per = json::array();
  for (const auto& pq : rep.per_question) {
    json e;
    e["id"] = pq.id;
    e["predicted"] = pq.predicted;
    e["gold"] = pq.gold;
    e["explanation_hits"] = pq.explanation_hits;
    per.push_back(std::move(e));
  }
  j["per_question"] = std::move(per);

  std::ostream* out = nullptr;
  auto hold = open_out(a.out, out);
  *out << j.dump(2) << "\n";

  std::cerr << "accuracy " << rep.accuracy << " over "
            << rep.per_question.size() - static_cast<std::size_t>(rep.skipped) << " questions ("
            << rep.skipped << " skipped)";
  if (rep.precision_at.count(2)) std::cerr << ", P@2 " << rep.precision_at.at(2);
  std::cerr << "\n";
  return 0;
}

// ---------------------------------------------------------------- sweep --

struct SweepArgs {
  Common c;
  std::string theta_file;
  std::string ks = "5,10,25,50";
  std::string out = "sweep";
};

int cmd_sweep(const SweepArgs& a) {
  Corpus corpus = a.c.corpus();
  Family family = a.c.family();
  ThetaParams theta =
      a.theta_file.empty() ? ThetaParams::defaults(family) : load_theta_file(a.theta_file, family);

  std::vector<int> ks;
  for (std::size_t pos = 0; pos < a.ks.size();) {
    std::size_t comma = a.ks.find(',', pos);
    if (comma == std::string::npos) comma = a.ks.size();
    try {
      ks.push_back(std::stoi(a.ks.substr(pos, comma - pos)));
    } catch (const std::exception&) {
      throw ValidationError("bad --ks list: " + a.ks);
    }
    pos = comma + 1;
  }

  auto points = k_sweep(corpus, family, theta, ks, a.c.hp, SdpSettings{}, a.c.jobs);
  write_sweep_json(points, a.out + ".json");
  write_sweep_csv(points, a.out + ".csv");

  json arr = json::array();
  for (const auto& p : points) {
    json e;
    e["k"] = p.k;
    e["accuracy"] = p.accuracy;
    e["baseline_accuracy"] = p.baseline_accuracy;
    arr.push_back(std::move(e));
    std::cerr << "k=" << p.k << " accuracy " << p.accuracy << " baseline " << p.baseline_accuracy
              << "\n";
  }
  std::cout << arr.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------- gradcheck --

struct GradcheckArgs {
  std::string family_str = "explanationlp";
  int instances = 20;
  int probes = 5;
  std::uint64_t seed = 1;
};

// Small fully connected bipartite instance with random weights on the
// family support and a random diagonal loss direction.
SdpProblem gradcheck_instance(std::uint64_t seed, Family family, Eigen::MatrixXd* G_out) {
  std::vector<Hypothesis> hyps;
  for (int i = 0; i < 3; ++i) {
    Hypothesis h;
    h.question_id = "gc";
    h.candidate_index = i;
    h.terms = TermSet{"sh0", "h" + std::to_string(i) + "x0"};
    h.embedding_key = hypothesis_key("gc", i);
    hyps.push_back(std::move(h));
  }
  std::vector<Fact> facts;
  for (int j = 0; j < 3; ++j) {
    Fact f;
    f.id = "f" + std::to_string(j);
    f.terms = TermSet{"sh0", "f" + std::to_string(j) + "x0"};
    f.kind = j % 2 == 0 ? FactKind::Grounding : FactKind::Abstract;
    SpoTuple t;
    t.subject = TermSet{"sh0"};
    t.object = TermSet{"f" + std::to_string(j) + "x0"};
    f.tuple = t;
    facts.push_back(std::move(f));
  }
  FactGraph g = build_graph(hyps, facts);
  ConstraintSet cs = compile(g, family, Hyperparams{});

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const int n = g.n(), k = g.k(), N = g.N();
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(N, N);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      double w = ud(rng);
      W(i, n + j) = W(n + j, i) = w;
    }
  if (family == Family::ExplanationLp)
    for (int a = 0; a < k; ++a)
      for (int b = a + 1; b < k; ++b) {
        double w = 0.6 * ud(rng) - 0.3;
        W(n + a, n + b) = W(n + b, n + a) = w;
      }

  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(N + 1, N + 1);
  for (int t = 1; t <= N; ++t) G(t, t) = 2.0 * ud(rng) - 1.0;
  *G_out = G;

  SdpSettings st;
  st.tol_gap = 1e-9;
  return make_problem(W, cs, st);
}

int cmd_gradcheck(const GradcheckArgs& a) {
  Family family = parse_family(a.family_str);
  double max_err = 0.0;
  for (int t = 0; t < a.instances; ++t) {
    Eigen::MatrixXd G;
    SdpProblem p = gradcheck_instance(a.seed + static_cast<std::uint64_t>(t), family, &G);
    max_err = std::max(max_err,
                       finite_diff_check(p, G, a.probes, a.seed + 1000 + static_cast<std::uint64_t>(t)));
  }
  json j;
  j["family"] = a.family_str;
  j["instances"] = a.instances;
  j["probes"] = a.probes;
  j["max_rel_err"] = max_err;
  std::cout << j.dump() << "\n";
  std::cerr << "max relative gradient error " << max_err << (max_err <= 1e-3 ? " (ok)" : " (FAIL)")
            << "\n";
  return max_err <= 1e-3 ? 0 : 3;
}

// ---------------------------------------------------------------- synth --

struct SynthArgs {
  int n = 200;
  std::uint64_t seed = 0;
  double ratio = 0.5;
  std::string out_dir = ".";
};

int cmd_synth(const SynthArgs& a) {
  Corpus c = generate_synthetic_corpus(a.n, a.seed, a.ratio);
  std::filesystem::create_directories(a.out_dir);
  const std::string kb = a.out_dir + "/kb.jsonl";
  const std::string qs = a.out_dir + "/questions.jsonl";
  const std::string em = a.out_dir + "/embeddings.jsonl";
  write_kb_jsonl(c, kb);
  write_questions_jsonl(c, qs);
  write_embeddings_jsonl(c, em);
  json j;
  j["facts"] = c.facts.size();
  j["questions"] = c.questions.size();
  j["dim"] = c.dim;
  j["kb"] = kb;
  j["questions_file"] = qs;
  j["embeddings"] = em;
  std::cout << j.dump() << "\n";
  std::cerr << "wrote " << c.facts.size() << " facts, " << c.questions.size() << " questions to "
            << a.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable subgraph selection over fact graphs"};
  app.require_subcommand(1);

  SolveArgs solve_args;
  auto* solve_cmd = app.add_subcommand("solve", "answer questions and emit selections as JSONL");
  add_corpus_options(solve_cmd, solve_args.c);
  solve_cmd->add_option("--theta", solve_args.theta_file, "theta JSON or checkpoint file");
  solve_cmd->add_option("--out", solve_args.out, "output path (default stdout)");
  solve_cmd->add_flag("--skip-errors", solve_args.skip_errors,
                      "skip questions that fail instead of aborting");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "fit theta (and optionally the adapter)");
  add_corpus_options(train_cmd, train_args.c);
  train_cmd->add_option("--lr", train_args.tc.lr, "learning rate");
  train_cmd->add_option("--epochs", train_args.tc.epochs, "training epochs");
  train_cmd->add_option("--batch", train_args.tc.batch_size, "batch size");
  train_cmd->add_option("--weight-decay", train_args.tc.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--seed", train_args.tc.seed, "run seed");
  train_cmd->add_flag("--determinism", train_args.tc.determinism,
                      "single-threaded bit-reproducible mode");
  train_cmd->add_flag("--adapter", train_args.tc.adapter_enabled, "train the embedding adapter");
  bool answer_only = false;
  train_cmd->add_flag("--answer-only", answer_only, "drop the explanation loss term");
  train_cmd->add_option("--dev-fraction", train_args.tc.dev_fraction,
                        "fraction of questions held out for model selection");
  train_cmd->add_option("--out", train_args.out, "checkpoint path");
  train_cmd->add_option("--config", train_args.config_file, "JSON config file");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "run the pipeline and report accuracy and P@K");
  add_corpus_options(eval_cmd, eval_args.c);
  eval_cmd->add_option("--theta", eval_args.theta_file, "theta JSON or checkpoint file");
  eval_cmd->add_option("--out", eval_args.out, "report path (default stdout)");

  SweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "accuracy vs retrieval depth, with IR baseline");
  add_corpus_options(sweep_cmd, sweep_args.c);
  sweep_cmd->add_option("--theta", sweep_args.theta_file, "theta JSON or checkpoint file");
  sweep_cmd->add_option("--ks", sweep_args.ks, "comma-separated retrieval depths");
  sweep_cmd->add_option("--out", sweep_args.out, "output basename (.json/.csv appended)");

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare analytic gradients to finite differences");
  gc_cmd->add_option("--family", gc_args.family_str, "constraint family")
      ->check(CLI::IsMember({"tupleilp", "explanationlp"}));
  gc_cmd->add_option("--instances", gc_args.instances, "number of random instances");
  gc_cmd->add_option("--probes", gc_args.probes, "finite difference probes per instance");
  gc_cmd->add_option("--seed", gc_args.seed, "base seed");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic corpus");
  synth_cmd->add_option("--n", synth_args.n, "number of questions");
  synth_cmd->add_option("--seed", synth_args.seed, "generator seed");
  synth_cmd->add_option("--ratio", synth_args.ratio, "deep distractor ratio in [0,1]");
  synth_cmd->add_option("--out-dir", synth_args.out_dir, "output directory");
  bool synth_det = false;
  synth_cmd->add_flag("--determinism", synth_det, "accepted for symmetry; generation is always deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (solve_cmd->parsed()) return cmd_solve(solve_args);
    if (train_cmd->parsed()) {
      if (answer_only) train_args.tc.use_explanation_loss = false;
      return cmd_train(train_cmd, train_args);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_args);
    if (gc_cmd->parsed()) return cmd_gradcheck(gc_args);
    if (synth_cmd->parsed()) return cmd_synth(synth_args);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

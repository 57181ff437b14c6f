#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "diffsel/eval.hpp"
#include "diffsel/train.hpp"

using namespace diffsel;
namespace fs = std::filesystem;

namespace {

fs::path repo_root() {
  const char* r = std::getenv("DIFFSEL_ROOT");
  REQUIRE(r != nullptr);
  return fs::path(r);
}

Corpus toy_corpus() {
  fs::path d = repo_root() / "data" / "toy";
  return load_corpus((d / "kb.jsonl").string(), (d / "questions.jsonl").string());
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("diffsel_pipe_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("answer loss matches hand-computed values", "[train]") {
  Eigen::VectorXd p(2);
  p << 0.9, 0.1;
  CHECK(answer_loss(p, 0) == Catch::Approx(0.2).margin(1e-12));

  Eigen::VectorXd onehot(3);
  onehot << 0.0, 1.0, 0.0;
  CHECK(answer_loss(onehot, 1) == Catch::Approx(0.0).margin(1e-12));

  Eigen::VectorXd uniform = Eigen::VectorXd::Constant(4, 0.25);
  CHECK(answer_loss(uniform, 2) == Catch::Approx(1.5).margin(1e-12));

  Eigen::VectorXd g;
  answer_loss(p, 0, &g);
  CHECK(g[0] == -1.0);  // below the target
  CHECK(g[1] == 1.0);   // above the target

  CHECK_THROWS_AS(answer_loss(p, 5), ValidationError);
}

TEST_CASE("explanation loss is mean clamped BCE", "[train]") {
  Eigen::VectorXd p1(1), t1(1);
  p1 << 0.5;
  t1 << 1.0;
  CHECK(explanation_loss(p1, t1) == Catch::Approx(0.6931471805599453).margin(1e-12));

  Eigen::VectorXd p3(3), t3(3);
  p3 << 0.9, 0.2, 0.1;
  t3 << 1.0, 0.0, 0.0;
  // -(ln .9 + ln .8 + ln .9)/3
  CHECK(explanation_loss(p3, t3) == Catch::Approx(0.14462152754328745).margin(1e-12));

  // Clamp keeps exact 0/1 probabilities finite and kills their gradient.
  Eigen::VectorXd p0(1), g;
  p0 << 0.0;
  CHECK(explanation_loss(p0, t1, &g) == Catch::Approx(-std::log(1e-6)).margin(1e-9));
  CHECK(g[0] == 0.0);

  Eigen::VectorXd bad(2);
  CHECK_THROWS_AS(explanation_loss(p1, bad), ValidationError);
}

TEST_CASE("explanation targets mark roster facts and count misses", "[train]") {
  std::vector<Hypothesis> hyps(1);
  hyps[0].terms = TermSet{"a", "b"};
  std::vector<Fact> facts(2);
  facts[0].id = "f1";
  facts[0].terms = TermSet{"a"};
  facts[1].id = "f2";
  facts[1].terms = TermSet{"b"};
  FactGraph g = build_graph(hyps, facts);

  int missing = 0;
  Eigen::VectorXd t = explanation_targets(g, {"f2", "zzz"}, &missing);
  REQUIRE(t.size() == 2);
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 1.0);
  CHECK(missing == 1);
}

TEST_CASE("adamw first step and decoupled decay", "[train]") {
  AdamW opt(1);
  Eigen::VectorXd p(1), g(1);
  p << 0.5;
  g << 0.3;
  opt.step(p, g, 0.01, 0.0);
  // First Adam step moves by ~lr regardless of gradient scale.
  CHECK(p[0] == Catch::Approx(0.5 - 0.01).epsilon(1e-4));

  AdamW opt2(1);
  Eigen::VectorXd q(1), zero(1);
  q << 0.8;
  zero << 0.0;
  opt2.step(q, zero, 0.1, 0.5);
  CHECK(q[0] == Catch::Approx(0.8 * (1.0 - 0.1 * 0.5)).margin(1e-12));

  AdamW opt3(1);
  Eigen::VectorXd r(1);
  r << 0.4;
  opt3.step(r, g, 0.0, 0.7);
  CHECK(r[0] == 0.4);  // lr 0 freezes everything, decay included

  Eigen::VectorXd wrong(2);
  CHECK_THROWS_AS(opt.step(p, wrong, 0.01, 0.0), ValidationError);
}

TEST_CASE("checkpoint io round trips exactly", "[train]") {
  TempDir tmp;
  Checkpoint ck;
  ck.theta = ThetaParams::defaults(Family::ExplanationLp);
  ck.theta.values["qas"] = 0.123456789012345;
  ck.theta.values["ga"] = 1.0;
  ck.theta.adapter.enabled = true;
  ck.theta.adapter.P = Eigen::MatrixXd::Identity(3, 3);
  ck.theta.adapter.P(0, 1) = -0.25;
  ck.epoch = 7;
  ck.dev_accuracy = 0.875;

  fs::path f = tmp.path / "ck.json";
  write_checkpoint(f.string(), ck, "deadbeef");

  std::string hash;
  Checkpoint back = read_checkpoint(f.string(), &hash);
  CHECK(hash == "deadbeef");
  CHECK(back.theta.family == Family::ExplanationLp);
  CHECK(back.epoch == 7);
  CHECK(back.dev_accuracy == 0.875);
  for (const auto& [k, v] : ck.theta.values) CHECK(back.theta.values.at(k) == v);
  REQUIRE(back.theta.adapter.enabled);
  CHECK((back.theta.adapter.P - ck.theta.adapter.P).cwiseAbs().maxCoeff() == 0.0);

  // Same checkpoint written twice is byte-identical.
  fs::path f2 = tmp.path / "ck2.json";
  write_checkpoint(f2.string(), ck, "deadbeef");
  CHECK(slurp(f) == slurp(f2));
}

TEST_CASE("checkpoint reader rejects malformed files", "[train]") {
  TempDir tmp;
  auto write = [&](const char* name, const json& j) {
    fs::path p = tmp.path / name;
    std::ofstream out(p);
    out << j.dump() << "\n";
    return p.string();
  };

  json good;
  good["family"] = "tupleilp";
  good["theta"] = {{"lr", 0.5}, {"sr", 0.5}};
  Checkpoint ok = read_checkpoint(write("ok.json", good));
  CHECK(ok.theta.at("lr") == 0.5);

  json extra = good;
  extra["theta"]["bogus"] = 0.1;
  CHECK_THROWS_AS(read_checkpoint(write("extra.json", extra)), ValidationError);

  json missing = good;
  missing["theta"].erase("sr");
  CHECK_THROWS_AS(read_checkpoint(write("missing.json", missing)), ValidationError);

  json range = good;
  range["theta"]["lr"] = 1.5;
  CHECK_THROWS_AS(read_checkpoint(write("range.json", range)), ValidationError);

  json fam = good;
  fam["family"] = "nonsense";
  CHECK_THROWS_AS(read_checkpoint(write("fam.json", fam)), ValidationError);
}

TEST_CASE("config hash tracks configuration changes", "[train]") {
  TrainConfig a;
  TrainConfig b;
  CHECK(config_hash(Family::ExplanationLp, a) == config_hash(Family::ExplanationLp, b));
  CHECK(config_hash(Family::ExplanationLp, a) != config_hash(Family::TupleIlp, a));
  b.seed = 99;
  CHECK(config_hash(Family::ExplanationLp, a) != config_hash(Family::ExplanationLp, b));
}

TEST_CASE("toy corpus solves to the gold answers with gold evidence", "[pipeline]") {
  Corpus c = toy_corpus();
  REQUIRE(c.questions.size() == 2);

  EvalReport rep = evaluate(c, Family::ExplanationLp, ThetaParams::defaults(Family::ExplanationLp),
                            /*k=*/6);
  CHECK(rep.skipped == 0);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.precision_at.at(2) == 1.0);
  REQUIRE(rep.per_question.size() == 2);
  for (const auto& pq : rep.per_question) {
    CHECK(pq.predicted == 0);
    CHECK(pq.gold == 0);
    CHECK(pq.explanation_hits == 2);
  }
  // P@K divides by K, so deeper cutoffs dilute with only two gold facts.
  CHECK(rep.precision_at.at(5) == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("solved instances agree with exhaustive search on the toy corpus", "[pipeline]") {
  Corpus c = toy_corpus();
  PipelineConfig pcfg;
  pcfg.k = 6;
  ThetaParams theta = ThetaParams::defaults(Family::ExplanationLp);

  for (const auto& q : c.questions) {
    QuestionInstance qi = build_instance(c, q, pcfg);
    // Roster facts are sorted by id with no duplicates.
    for (std::size_t j = 1; j < qi.g.facts.size(); ++j)
      CHECK(qi.g.facts[j - 1].id < qi.g.facts[j].id);

    QuestionResult r = solve_instance(qi, theta);
    auto [best, best_val] = brute_force_ilp(weights(qi.g, qi.scores, theta), qi.cs, qi.g);
    CHECK(r.sel.answer_index == best.answer_index);
    CHECK(r.sol.objective_value >= best_val - 1e-6);

    // Hypothesis probabilities respect the one-answer simplex.
    double hyp_mass = r.sel.node_probs.head(qi.g.n()).sum();
    CHECK(hyp_mass == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("synthetic corpus generation is deterministic and validated", "[synth]") {
  CHECK_THROWS_AS(generate_synthetic_corpus(5, 0, 0.5), ValidationError);
  CHECK_THROWS_AS(generate_synthetic_corpus(20, 0, -0.1), ValidationError);
  CHECK_THROWS_AS(generate_synthetic_corpus(20, 0, 1.5), ValidationError);

  Corpus a = generate_synthetic_corpus(12, 42, 0.5);
  Corpus b = generate_synthetic_corpus(12, 42, 0.5);
  REQUIRE(a.facts.size() == b.facts.size());
  REQUIRE(a.questions.size() == 12);
  for (std::size_t i = 0; i < a.facts.size(); ++i) CHECK(a.facts[i].id == b.facts[i].id);
  for (const auto& q : a.questions) {
    CHECK(q.answer >= 0);
    CHECK(q.answer < static_cast<int>(q.candidates.size()));
    CHECK(q.has_explanations);
    CHECK(q.explanations.size() == 2);
  }
  const auto& key = a.questions[0].id + "#0";
  CHECK((a.embeddings.at(key) - b.embeddings.at(key)).norm() == 0.0);

  // Different seeds decorrelate the planted geometry.
  Corpus d = generate_synthetic_corpus(12, 43, 0.5);
  CHECK((a.embeddings.at(key) - d.embeddings.at(key)).norm() > 1e-6);
}

TEST_CASE("oracle weights separate the planted gold structure", "[synth]") {
  Corpus c = generate_synthetic_corpus(20, 3, 0.5);
  EvalReport rep = evaluate(c, Family::ExplanationLp, synthetic_oracle_theta(), /*k=*/5);
  CHECK(rep.skipped == 0);
  CHECK(rep.accuracy >= 0.95);
}

TEST_CASE("retrieval-sum baseline is perfect without deep distractors", "[synth]") {
  Corpus c = generate_synthetic_corpus(12, 11, 0.0);
  EvalReport rep = ir_solver(c, 5);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.skipped == 0);
}

TEST_CASE("training with zero learning rate leaves theta at its start", "[train]") {
  Corpus c = generate_synthetic_corpus(10, 5, 0.0);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 0.0;
  cfg.seed = 1;
  Checkpoint ck = fit(c, Family::ExplanationLp, cfg);
  for (const auto& [name, v] : ck.theta.values) CHECK(v == 0.5);
}

TEST_CASE("fit rejects bad configurations", "[train]") {
  Corpus c = generate_synthetic_corpus(10, 5, 0.0);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(fit(c, Family::ExplanationLp, cfg), ValidationError);
  cfg.epochs = 1;
  cfg.lr = -0.5;
  CHECK_THROWS_AS(fit(c, Family::ExplanationLp, cfg), ValidationError);
  cfg.lr = 0.01;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(fit(c, Family::ExplanationLp, cfg), ValidationError);
  cfg.batch_size = 8;
  cfg.dev_fraction = 1.0;
  CHECK_THROWS_AS(fit(c, Family::ExplanationLp, cfg), ValidationError);

  Corpus empty;
  TrainConfig ok;
  CHECK_THROWS_AS(fit(empty, Family::ExplanationLp, ok), ValidationError);
}

TEST_CASE("grid search is deterministic and self-consistent", "[eval]") {
  Corpus c = generate_synthetic_corpus(16, 9, 0.5);
  ThetaParams r1 = grid_search_theta(c, Family::ExplanationLp, /*grid_points=*/8, /*k=*/5,
                                     Hyperparams{}, SdpSettings{}, /*seed=*/2);
  ThetaParams r2 =
      grid_search_theta(c, Family::ExplanationLp, 8, 5, Hyperparams{}, SdpSettings{}, 2);
  for (const auto& [k, v] : r1.values) CHECK(r2.values.at(k) == v);
  for (const auto& [k, v] : r1.values) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(grid_search_theta(c, Family::ExplanationLp, 1, 5), ValidationError);
}

TEST_CASE("k sweep reports model and baseline accuracy per depth", "[eval]") {
  TempDir tmp;
  Corpus c = generate_synthetic_corpus(10, 13, 0.0);
  auto pts = k_sweep(c, Family::ExplanationLp, synthetic_oracle_theta(), {3, 5});
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].k == 3);
  CHECK(pts[1].k == 5);
  for (const auto& p : pts) {
    CHECK(p.accuracy >= 0.0);
    CHECK(p.baseline_accuracy >= 0.0);
  }

  fs::path j = tmp.path / "sweep.json";
  fs::path csv = tmp.path / "sweep.csv";
  write_sweep_json(pts, j.string());
  write_sweep_csv(pts, csv.string());
  json parsed = json::parse(slurp(j));
  REQUIRE(parsed.is_array());
  CHECK(parsed.size() == 2);
  CHECK(parsed[0]["k"] == 3);
  std::string head = slurp(csv).substr(0, 30);
  CHECK(head.rfind("k,accuracy,baseline_accuracy", 0) == 0);

  CHECK_THROWS_AS(k_sweep(c, Family::ExplanationLp, synthetic_oracle_theta(), {}),
                  ValidationError);
}

TEST_CASE("jobs parallelism does not change evaluation results", "[eval]") {
  Corpus c = generate_synthetic_corpus(12, 17, 0.5);
  ThetaParams theta = synthetic_oracle_theta();
  EvalReport serial = evaluate(c, Family::ExplanationLp, theta, 5, {}, {}, 1);
  EvalReport parallel = evaluate(c, Family::ExplanationLp, theta, 5, {}, {}, 3);
  CHECK(serial.accuracy == parallel.accuracy);
  CHECK(serial.skipped == parallel.skipped);
  REQUIRE(serial.per_question.size() == parallel.per_question.size());
  for (std::size_t i = 0; i < serial.per_question.size(); ++i)
    CHECK(serial.per_question[i].predicted == parallel.per_question[i].predicted);
}

// ------------------------------------------------------------------ CLI --

namespace {

struct CliResult {
  int exit = -1;
  std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
  const char* cli = std::getenv("DIFFSEL_CLI");
  REQUIRE(cli != nullptr);
  fs::path outfile = workdir / "cli_stdout.txt";
  std::string cmd = "cd " + workdir.string() + " && " + std::string(cli) + " " + args + " > " +
                    outfile.string() + " 2> /dev/null";
  int rc = std::system(cmd.c_str());
  CliResult r;
  r.exit = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  if (fs::exists(outfile)) r.out = slurp(outfile);
  return r;
}

}  // namespace

TEST_CASE("cli solve emits one selection per question", "[cli]") {
  TempDir tmp;
  fs::path d = repo_root() / "data" / "toy";
  CliResult r = run_cli("solve " + (d / "kb.jsonl").string() + " " +
                            (d / "questions.jsonl").string() + " --k 6",
                        tmp.path);
  REQUIRE(r.exit == 0);
  std::istringstream lines(r.out);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    json j = json::parse(line);
    CHECK(j["answer_index"] == 0);
    CHECK(j["explanation_ids"].size() == 2);
    ++count;
  }
  CHECK(count == 2);
}

TEST_CASE("cli maps failures to distinct exit codes", "[cli]") {
  TempDir tmp;
  CliResult missing = run_cli("solve nope.jsonl alsonope.jsonl", tmp.path);
  CHECK(missing.exit == 2);

  CliResult badflag = run_cli("solve --not-a-flag", tmp.path);
  CHECK(badflag.exit == 2);

  CliResult help = run_cli("--help", tmp.path);
  CHECK(help.exit == 0);
}

TEST_CASE("cli synth writes a loadable corpus", "[cli]") {
  TempDir tmp;
  CliResult r = run_cli("synth --n 10 --seed 4 --ratio 0 --out-dir corpus", tmp.path);
  REQUIRE(r.exit == 0);
  Corpus c = load_corpus((tmp.path / "corpus" / "kb.jsonl").string(),
                         (tmp.path / "corpus" / "questions.jsonl").string(),
                         (tmp.path / "corpus" / "embeddings.jsonl").string());
  CHECK(c.questions.size() == 10);
  CHECK(c.dim == 256);
}

TEST_CASE("cli gradcheck passes its own tolerance", "[cli]") {
  TempDir tmp;
  CliResult r = run_cli("gradcheck --instances 3 --probes 3 --seed 5", tmp.path);
  REQUIRE(r.exit == 0);
  json j = json::parse(r.out);
  CHECK(j["max_rel_err"].get<double>() <= 1e-3);
}

TEST_CASE("cli train writes a checkpoint and logs epochs", "[cli]") {
  TempDir tmp;
  CliResult s = run_cli("synth --n 10 --seed 6 --ratio 0 --out-dir c", tmp.path);
  REQUIRE(s.exit == 0);
  CliResult t = run_cli(
      "train c/kb.jsonl c/questions.jsonl --embeddings c/embeddings.jsonl "
      "--epochs 2 --seed 1 --out ck.json",
      tmp.path);
  REQUIRE(t.exit == 0);
  int epochs_logged = 0;
  std::istringstream lines(t.out);
  std::string line;
  while (std::getline(lines, line)) {
    json j = json::parse(line);
    CHECK(j.contains("dev_acc"));
    ++epochs_logged;
  }
  CHECK(epochs_logged == 3);  // epoch 0 plus two training epochs

  Checkpoint ck = read_checkpoint((tmp.path / "ck.json").string());
  CHECK(ck.theta.family == Family::ExplanationLp);
}

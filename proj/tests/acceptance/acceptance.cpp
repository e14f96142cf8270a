// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria 1-6 are oracle checks. 7-10 train desk-size models and take most
// of the runtime. 11 runs the command-line tool twice and compares files.
// The exit code is 0 when every selected criterion ran to completion, even if
// some failed; --strict makes any FAIL exit 1. Crashes always exit 2. Every
// line is also written to report.txt in the work directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "intrus/analysis.hpp"
#include "intrus/bleu.hpp"
#include "intrus/inference.hpp"
#include "intrus/rng.hpp"
#include "intrus/tasks.hpp"
#include "intrus/training.hpp"
#include "intrus/verify.hpp"

namespace fs = std::filesystem;
using namespace intrus;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and budgets.
constexpr int kEnumInstances = 200;
constexpr double kEnumTolerance = 1e-12;
constexpr double kEnumSeconds = 30.0;
constexpr int kBoundModels = 100;
constexpr double kTightTolerance = 1e-12;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr int kNormDraws = 50;
constexpr int kNormMaxPartial = 10;
constexpr double kNormTolerance = 1e-9;
constexpr int kSearchInstances = 100;
constexpr double kLearnAccuracy = 0.99;
constexpr int kLearnSteps = 20000;
constexpr double kLearnSeconds = 3600.0;
constexpr std::size_t kLearnTrain = 20000;
constexpr std::size_t kLearnValid = 200;
constexpr std::size_t kLearnTest = 500;
constexpr int kBranchSteps = 8000;
constexpr std::size_t kBranchTrain = 5000;
constexpr std::size_t kBranchValid = 200;
constexpr int kBranchSeeds = 3;
constexpr int kBenchMinLen = 4;
constexpr int kBenchMaxLen = 31;  // longest output the desk model represents
constexpr int kBenchPerLen = 3;
constexpr int kBenchBeam = 4;
constexpr double kSlopeLow = 0.5;
constexpr double kSlopeHigh = 1.5;
constexpr double kOrderGap = 0.05;
constexpr int kDeterminismSteps = 300;

struct Options {
  fs::path work;
  std::string cli;
  bool quick = false;
};

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;
std::ofstream report_file;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  report_file << line << '\n' << std::flush;
}

void report(int criterion, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  char head[32];
  std::snprintf(head, sizeof head, "criterion %2d: %s  ", criterion, pass ? "PASS" : "FAIL");
  emit(head + detail);
}

void note(const std::string& text) { emit("    " + text); }

std::string fmt(const char* pattern, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* pattern, ...) {
  char buf[512];
  va_list args;
  va_start(args, pattern);
  std::vsnprintf(buf, sizeof buf, pattern, args);
  va_end(args);
  return buf;
}

void criterion_1_2() {
  const EnumerationReport r = check_marginal_vs_enumeration(kEnumInstances, 1);
  report(1, r.max_rel_error < kEnumTolerance && r.seconds < kEnumSeconds,
         fmt("%d instances, max rel error %.2e, %.1fs", r.instances, r.max_rel_error, r.seconds));
  report(2, r.count_mismatches == 0,
         fmt("%d of %d trajectory counts differ from |y|!", r.count_mismatches, r.instances));
}

void criterion_3() {
  const BoundsReport r = check_bound_ordering(kBoundModels, 1);
  report(3, r.violations == 0 && r.tight_spread < kTightTolerance,
         fmt("%d violations over %d models, min gaps %.2e / %.2e, concentrated spread %.1e",
             r.violations, r.models, r.min_gap_max_minus_expected, r.min_gap_marginal_minus_max,
             r.tight_spread));
}

void criterion_4() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_op;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const OpGradient& g : check_op_gradients(seed)) {
      if (g.error > worst) {
        worst = g.error;
        worst_op = g.op;
      }
    }
  }
  const double ins = check_model_gradient(ModelKind::Insertion, 1);
  const double base = check_model_gradient(ModelKind::LeftToRight, 1);
  const double seconds = since(t0);
  report(4,
         worst < kGradTolerance && ins < kGradTolerance && base < kGradTolerance &&
             seconds < kGradSeconds,
         fmt("ops max %.2e (%s), insertion model %.2e, baseline model %.2e, %.1fs", worst,
             worst_op.c_str(), ins, base, seconds));
}

void criterion_5() {
  const double err = check_normalization(kNormDraws, kNormMaxPartial, 1);
  report(5, err < kNormTolerance, fmt("max |sum p - 1| = %.2e", err));
}

void criterion_6() {
  const SearchReport r = check_search(kSearchInstances, 1);
  report(6, r.beam_matches_exhaustive == r.instances && r.greedy_matches_beam1 == r.instances,
         fmt("beam = exhaustive %d/%d, beam 1 = greedy %d/%d", r.beam_matches_exhaustive,
             r.instances, r.greedy_matches_beam1, r.instances));
}

struct Run {
  Model model;
  TrainResult result;
  double seconds = 0.0;
};

Run train_run(const Vocab& vocab, const std::vector<Example>& train_set,
              const std::vector<Example>& valid_set, const TrainConfig& cfg, const fs::path& dir) {
  const ModelKind kind =
      cfg.mode == TrainMode::BaselineL2R ? ModelKind::LeftToRight : ModelKind::Insertion;
  Run run{Model(kind, ModelConfig::desk(vocab.size()), cfg.seed), {}, 0.0};
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  TrainOutputs out;
  out.metrics = &metrics;
  out.checkpoint_dir = dir.string();
  const auto t0 = Clock::now();
  run.result = train(run.model, train_set, valid_set, cfg, out);
  run.seconds = since(t0);
  return run;
}

std::vector<TokenSeq> targets(const std::vector<Example>& data) {
  std::vector<TokenSeq> out;
  for (const Example& e : data) out.push_back(e.tgt);
  return out;
}

std::vector<TokenSeq> sources(const std::vector<Example>& data) {
  std::vector<TokenSeq> out;
  for (const Example& e : data) out.push_back(e.src);
  return out;
}

std::vector<TokenSeq> outputs(const std::vector<DecodeResult>& results) {
  std::vector<TokenSeq> out;
  for (const DecodeResult& r : results) out.push_back(r.output);
  return out;
}

void criterion_7(const Options& opt) {
  bool pass = true;
  std::ostringstream detail;
  for (TaskKind kind : {TaskKind::Copy, TaskKind::Sort}) {
    TaskSpec spec;
    spec.kind = kind;
    spec.content_tokens = 20;
    spec.max_len = 10;
    spec.seed = 7;
    const Vocab vocab = make_task_vocab(spec);
    const auto train_set = generate(spec, vocab, opt.quick ? 500 : kLearnTrain);
    const auto valid_set = generate(spec, vocab, kLearnValid, kLearnTrain);
    const auto test_set = generate(spec, vocab, kLearnTest, kLearnTrain + kLearnValid);

    TrainConfig cfg = TrainConfig::desk();
    cfg.mode = TrainMode::Default;
    cfg.total_steps = opt.quick ? 200 : kLearnSteps;
    cfg.pretrain_steps = std::min(cfg.pretrain_steps, cfg.total_steps / 2);
    cfg.eval_every = opt.quick ? 100 : 500;
    cfg.target_val_accuracy = 1.0;
    const Run run =
        train_run(vocab, train_set, valid_set, cfg, opt.work / ("learn_" + to_string(kind)));

    DecodeOptions dopt;
    const auto hyps = outputs(decode_all(run.model, sources(test_set), dopt));
    const double acc = sequence_accuracy(hyps, targets(test_set));
    dopt.beam = 1;
    const auto greedy = outputs(decode_all(run.model, sources(test_set), dopt));
    const bool ok = acc >= kLearnAccuracy && run.seconds < kLearnSeconds;
    pass = pass && ok;
    detail << to_string(kind)
           << fmt(" test accuracy %.4f (greedy %.4f) after %d steps in %.0fs; ", acc,
                  sequence_accuracy(greedy, targets(test_set)), run.result.steps, run.seconds);
  }
  report(7, pass, detail.str());
}

struct BranchRuns {
  Vocab vocab;
  std::vector<Example> valid;
  std::vector<Model> intrus;  // default mode, one per seed
  std::vector<Model> baseline;
};

BranchRuns criterion_8(const Options& opt) {
  TaskSpec spec;
  spec.kind = TaskKind::Branching;
  spec.seed = 1;
  BranchRuns out{make_task_vocab(spec), {}, {}, {}};
  const auto train_set = generate(spec, out.vocab, opt.quick ? 300 : kBranchTrain);
  out.valid = generate(spec, out.vocab, kBranchValid, kBranchTrain);

  const std::vector<TrainMode> modes{TrainMode::Default, TrainMode::OnlyPretrainUniform,
                                     TrainMode::BaselineL2R};
  std::map<TrainMode, std::vector<double>> bleu;
  for (int s = 1; s <= kBranchSeeds; ++s) {
    for (TrainMode mode : modes) {
      TrainConfig cfg = TrainConfig::desk();
      cfg.mode = mode;
      cfg.seed = static_cast<std::uint64_t>(s);
      cfg.total_steps = opt.quick ? 100 : kBranchSteps;
      cfg.pretrain_steps = std::min(cfg.pretrain_steps, cfg.total_steps / 4);
      cfg.eval_every = opt.quick ? 50 : 1000;
      Run run = train_run(out.vocab, train_set, out.valid, cfg,
                          opt.work / fmt("branch_%s_seed%d", to_string(mode).c_str(), s));
      DecodeOptions dopt;
      const auto hyps = outputs(decode_all(run.model, sources(out.valid), dopt));
      const double b = corpus_bleu(hyps, targets(out.valid));
      const double acc = sequence_accuracy(hyps, targets(out.valid));
      bleu[mode].push_back(b);
      note(fmt("branching %-22s seed %d  bleu %6.2f  accuracy %.3f  %.0fs", to_string(mode).c_str(),
               s, b, acc, run.seconds));
      if (mode == TrainMode::Default) out.intrus.push_back(std::move(run.model));
      if (mode == TrainMode::BaselineL2R) out.baseline.push_back(std::move(run.model));
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double def = mean(bleu[TrainMode::Default]);
  const double uni = mean(bleu[TrainMode::OnlyPretrainUniform]);
  const double base = mean(bleu[TrainMode::BaselineL2R]);
  int wins = 0;
  for (int s = 0; s < kBranchSeeds; ++s) {
    if (bleu[TrainMode::Default][static_cast<std::size_t>(s)] >
        bleu[TrainMode::BaselineL2R][static_cast<std::size_t>(s)])
      ++wins;
  }
  report(8, def >= uni && def >= base && wins >= 2,
         fmt("mean bleu default %.2f, only_pretrain_uniform %.2f, baseline_l2r %.2f; default "
             "beats baseline on %d of %d seeds",
             def, uni, base, wins, kBranchSeeds));
  return out;
}

void criterion_9(const Options& opt, const BranchRuns& runs) {
  // Sources are irrelevant to timing; outputs are forced to the target length.
  std::vector<Example> data;
  Rng rng(9);
  const int content = runs.vocab.size() - reserved::kCount;
  for (int len = kBenchMinLen; len <= kBenchMaxLen; ++len) {
    for (int i = 0; i < (opt.quick ? 1 : kBenchPerLen); ++i) {
      Example e;
      for (int j = 0; j < 6; ++j)
        e.src.push_back(reserved::kCount + static_cast<Token>(rng.uniform_int(content)));
      for (int j = 0; j < len; ++j)
        e.tgt.push_back(reserved::kCount + static_cast<Token>(rng.uniform_int(content)));
      data.push_back(e);
    }
  }
  const BenchReport rep =
      bench_decode(runs.intrus.front(), runs.baseline.front(), data, kBenchBeam);
  {
    std::ofstream csv(opt.work / "bench.csv", std::ios::binary);
    csv << bench_csv(rep);
  }
  const double diff = rep.insertion_slope - rep.baseline_slope;
  note(fmt("mean slowdown of insertion decoding %.2fx (logged, not asserted)", rep.mean_slowdown));
  report(
      9, rep.insertion_slope > rep.baseline_slope && diff >= kSlopeLow && diff <= kSlopeHigh,
      fmt("log-log slope insertion %.3f, baseline %.3f, difference %.3f +- %.3f over lengths "
          "%d-%d",
          rep.insertion_slope, rep.baseline_slope, diff, rep.slope_ci, kBenchMinLen, kBenchMaxLen));
}

void criterion_10(const BranchRuns& runs) {
  std::vector<Trajectory> trajs;
  std::size_t duplicates = 0;
  for (const Model& m : runs.intrus) {
    DecodeOptions dopt;
    const auto results = decode_all(m, sources(runs.valid), dopt);
    duplicates += count_duplicate_outputs(results);
    for (const DecodeResult& r : results) trajs.push_back(r.trajectory);
  }
  const OrderStats stats = relative_order_stats(trajs, runs.vocab);
  const double fn = stats.count("function") ? stats.at("function").mean : NAN;
  const double ct = stats.count("content") ? stats.at("content").mean : NAN;
  std::ostringstream dirs;
  for (const auto& [label, n] : order_direction_profile(trajs)) dirs << label << ' ' << n << ' ';
  note("decode directions: " + dirs.str());
  note(fmt("inputs with duplicate finished outputs: %zu of %zu", duplicates, trajs.size()));
  report(10, ct - fn >= kOrderGap,
         fmt("mean relative index function %.3f, content %.3f over %zu decodes", fn, ct,
             trajs.size()));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_cli(const Options& opt, const std::string& args) {
  const std::string cmd = "\"" + opt.cli + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

void criterion_11(const Options& opt) {
  if (opt.cli.empty()) {
    report(11, false, "no --cli binary given");
    return;
  }
  const fs::path root = opt.work / "determinism";
  fs::remove_all(root);
  const std::string data = (root / "data").string();
  int rc = run_cli(opt, "gen-data --task reverse --n 500 --valid-n 50 --seed 3 --out " + data);
  for (const char* run : {"run1", "run2"}) {
    const std::string out = (root / run).string();
    rc |= run_cli(opt, "train --data " + data + " --out " + out + " --mode default --seed 5" +
                           " --total-steps " + std::to_string(kDeterminismSteps) +
                           " --pretrain-steps 100 --eval-every 100 --max-val-examples 50");
    rc |= run_cli(opt, "decode --ckpt " + out + "/final.ckpt --data " + data +
                           "/valid.tsv --beam 4 --out " + out + "/decodes.txt");
  }
  if (rc != 0) {
    report(11, false, "command-line run failed");
    return;
  }
  bool same = true;
  std::ostringstream detail;
  for (const char* f : {"metrics.jsonl", "decodes.txt", "final.ckpt"}) {
    const std::string a = slurp(root / "run1" / f);
    const std::string b = slurp(root / "run2" / f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    detail << f << (eq ? " identical" : " differ") << " (" << a.size() << " bytes); ";
  }
  report(11, same, detail.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Options opt;
  std::string work = "acceptance_work";
  std::vector<int> only;
  bool strict = false;
  app.add_option("--work", work, "Directory for training runs and reports");
  app.add_option("--cli", opt.cli, "Path of the intrus binary (criterion 11)");
  app.add_option("--only", only, "Criteria to run; all when empty")->delimiter(',');
  app.add_flag("--quick", opt.quick, "Tiny training budgets for a smoke run");
  app.add_flag("--strict", strict, "Exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  opt.work = work;

  const std::set<int> selected(only.begin(), only.end());
  auto wants = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  try {
    fs::create_directories(opt.work);
    report_file.open(opt.work / "report.txt");
    const auto t0 = Clock::now();
    if (opt.quick) note("quick mode: training budgets are far below the criteria");
    if (wants(1) || wants(2)) criterion_1_2();
    if (wants(3)) criterion_3();
    if (wants(4)) criterion_4();
    if (wants(5)) criterion_5();
    if (wants(6)) criterion_6();
    if (wants(7)) criterion_7(opt);
    if (wants(8) || wants(9) || wants(10)) {
      const BranchRuns runs = criterion_8(opt);
      if (wants(9)) criterion_9(opt, runs);
      if (wants(10)) criterion_10(runs);
    }
    if (wants(11)) criterion_11(opt);
    note(fmt("%d failed, total %.0fs", failures, since(t0)));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return strict && failures > 0 ? 1 : 0;
}

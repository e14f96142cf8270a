#include <doctest.h>

#include <cmath>
#include "json.hpp"
#include <sstream>

#include "helpers.hpp"
#include "intrus/tasks.hpp"
#include "intrus/training.hpp"
#include "intrus/verify.hpp"

using namespace intrus;

namespace {

constexpr int kVocab = reserved::kCount + 4;

TokenSeq seq(std::initializer_list<int> content) {
  TokenSeq s;
  for (int c : content) s.push_back(reserved::kCount + c);
  return s;
}

std::size_t factorial(std::size_t n) { return n <= 1 ? 1 : n * factorial(n - 1); }

std::vector<double> losses(const std::string& jsonl) {
  std::vector<double> out;
  std::istringstream in(jsonl);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("loss")) out.push_back(j["loss"].get<double>());
  }
  return out;
}

}  // namespace

TEST_CASE("train modes parse and print") {
  for (const std::string& name : train_mode_names()) {
    CHECK(to_string(parse_train_mode(name)) == name);
  }
  CHECK(train_mode_names().size() == 7);
  CHECK_THROWS_WITH(parse_train_mode("sideways"), doctest::Contains("only_pretrain_uniform"));
}

TEST_CASE("trajectory source per mode and phase") {
  TrainConfig c;
  c.pretrain_steps = 10;
  c.mode = TrainMode::Default;
  CHECK(source_for(c, 10) == TrajectorySource::Uniform);
  CHECK(source_for(c, 11) == TrajectorySource::Model);
  c.mode = TrainMode::Argmax;
  CHECK(source_for(c, 11) == TrajectorySource::Argmax);
  c.mode = TrainMode::PretrainL2RThenDefault;
  CHECK(source_for(c, 1) == TrajectorySource::LeftToRight);
  CHECK(source_for(c, 11) == TrajectorySource::Model);
  c.mode = TrainMode::NoPretrain;
  CHECK(source_for(c, 1) == TrajectorySource::Model);
  c.mode = TrainMode::OnlyPretrainUniform;
  CHECK(source_for(c, 1000) == TrajectorySource::Uniform);
  CHECK(in_pretraining(c, 1000));
  c.mode = TrainMode::OnlyPretrainL2R;
  CHECK(source_for(c, 1000) == TrajectorySource::LeftToRight);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.base_lr = 0.05;
  c.warmup_steps = 400;
  CHECK(learning_rate(c, 400) == doctest::Approx(0.05 / 20.0).epsilon(1e-14));
  CHECK(learning_rate(c, 100) == doctest::Approx(0.05 * 100 * std::pow(400.0, -1.5)));
  CHECK(learning_rate(c, 1600) == doctest::Approx(0.05 / 40.0));
  CHECK(learning_rate(c, 200) < learning_rate(c, 400));
  CHECK(learning_rate(c, 800) < learning_rate(c, 400));
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  ParameterSet p;
  p.add("w", Matrix::Constant(2, 3, 0.7));
  const Matrix before = p[0].value;
  AdamState s(p);
  const TrainConfig c;
  for (int i = 0; i < 10; ++i) adam_update(p, p.zero_gradients(), s, 0.1, c);
  CHECK(p[0].value == before);
  Gradients bad = p.zero_gradients();
  bad[0](1, 1) = NAN;
  CHECK_THROWS_WITH_AS(adam_update(p, bad, s, 0.1, c), doctest::Contains("w"), NumericError);
}

TEST_CASE("adam minimizes a quadratic bowl") {
  ParameterSet p;
  p.add("x", Matrix::Zero(1, 2));
  Matrix optimum(1, 2);
  optimum << 1.5, -0.75;
  const Matrix curvature = (Matrix(1, 2) << 1.0, 4.0).finished();
  AdamState s(p);
  const TrainConfig c;
  // Near the optimum Adam moves about lr per step, so the rate has to decay
  // well below the tolerance.
  double lr = 0.05;
  for (int step = 1; step <= 5000; ++step) {
    Gradients g{2.0 * curvature.cwiseProduct(p[0].value - optimum)};
    adam_update(p, g, s, lr, c);
    lr *= 0.997;
  }
  CHECK((p[0].value - optimum).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("global norm clipping") {
  Gradients g{Matrix::Constant(1, 1, 3.0), Matrix::Constant(1, 1, 4.0)};
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g[0](0, 0) == 3.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0](0, 0) == doctest::Approx(0.6));
  CHECK(g[1](0, 0) == doctest::Approx(0.8));
}

TEST_CASE("step loss for a one-token target") {
  const Model m(ModelKind::Insertion, testing::tiny_config(kVocab), 2);
  const TokenSeq src = seq({0, 1});
  const TokenSeq y = seq({2});
  Tape probe(false);
  ModelGraph pg(m, probe);
  const Memory pm = pg.prepare_memory(src);
  const double expected = -pg.insertion_distribution(pm, {}).log_prob(InsertionEvent::insert(0, y[0])) -
                          pg.insertion_distribution(pm, y).log_prob(InsertionEvent::eos());
  for (TrajectorySource source : {TrajectorySource::Uniform, TrajectorySource::LeftToRight,
                                  TrajectorySource::Model, TrajectorySource::Argmax}) {
    Tape t;
    ModelGraph g(m, t);
    Rng rng(1);
    const StepLoss sl = step_loss(g, g.prepare_memory(src), y, source, rng);
    CHECK(sl.loss.scalar() == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("uniform head contributes -log(k/N) per step") {
  Model m(ModelKind::Insertion, testing::tiny_config(kVocab), 3);
  m.params()[m.w_loc].value.setZero();
  m.params()[m.w_tok].value.setZero();
  const TokenSeq y = seq({0, 1, 0});
  Tape t;
  ModelGraph g(m, t);
  Rng rng(4);
  const StepLoss sl = step_loss(g, g.prepare_memory(seq({2})), y, TrajectorySource::LeftToRight, rng);
  // Partial of length l: l + 1 slots, 4 content tokens per slot, <stop> in the last.
  const int content = 4;
  double expected = 0.0;
  TokenSeq partial;
  for (const InsertionEvent& ev : sl.trajectory.events) {
    const auto correct = correct_insertions(y, partial);
    const double slots = static_cast<double>(partial.size() + 1);
    double mass = 0.0;
    for (const InsertionEvent& c : correct) {
      const bool last = c.is_eos() || c.pos == static_cast<int>(partial.size());
      mass += (1.0 / slots) / (last ? content + 1 : content);
    }
    expected -= std::log(mass);
    partial = apply_insertion(partial, ev);
  }
  CHECK(sl.loss.scalar() == doctest::Approx(expected).epsilon(1e-12));
  // First step: one slot, N = 5 events, k = 2 correct.
  CHECK(correct_insertions(y, {}).size() == 2);
  Tape u(false);
  ModelGraph h(m, u);
  const InsertionDistribution d = h.insertion_distribution(h.prepare_memory(seq({2})), {});
  const auto first = correct_insertions(y, {});
  CHECK(ag::cross_entropy_from_log_probs(d.log_probs, d.event_mask(first)).scalar() ==
        doctest::Approx(-std::log(2.0 / 5.0)).epsilon(1e-13));
}

TEST_CASE("step loss bounds the trajectory log-probability") {
  Rng pick(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Model m(ModelKind::Insertion, testing::tiny_config(kVocab),
                  static_cast<std::uint64_t>(trial));
    TokenSeq y;
    for (std::uint64_t i = 0, n = 1 + pick.uniform_int(4); i < n; ++i)
      y.push_back(reserved::kCount + static_cast<Token>(pick.uniform_int(3)));
    Tape t;
    ModelGraph g(m, t);
    Rng rng(static_cast<std::uint64_t>(trial));
    const StepLoss sl = step_loss(g, g.prepare_memory(seq({1})), y, TrajectorySource::Model, rng);
    CHECK(leads_to(sl.trajectory, y));
    CHECK(-sl.loss.scalar() >= trajectory_log_prob(m, seq({1}), sl.trajectory) - 1e-12);
    CHECK(sl.model_selections == static_cast<int>(y.size()) + 1);
  }
}

TEST_CASE("pretraining sources never consult the model") {
  const Model m(ModelKind::Insertion, testing::tiny_config(kVocab), 6);
  for (TrajectorySource source : {TrajectorySource::Uniform, TrajectorySource::LeftToRight}) {
    Tape t;
    ModelGraph g(m, t);
    Rng rng(1);
    CHECK(step_loss(g, g.prepare_memory({}), seq({0, 1, 2}), source, rng).model_selections == 0);
  }
}

TEST_CASE("constrained argmax finds the best trajectory") {
  Rng rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    TokenSeq y;
    for (std::uint64_t i = 0, n = 1 + rng.uniform_int(4); i < n; ++i)
      y.push_back(reserved::kCount + static_cast<Token>(rng.uniform_int(3)));
    const StubModel stub(static_cast<std::uint64_t>(trial), kVocab, 2.0);
    const auto all = enumerate_trajectories(y);
    double best = -INFINITY;
    for (const Trajectory& t : all) {
      best = std::max(best, std::log(trajectory_probability(t, {}, stub.fn())));
    }
    const Trajectory found =
        argmax_trajectory(y, {}, stub.fn(), static_cast<int>(factorial(y.size())));
    CHECK(leads_to(found, y));
    CHECK(std::log(trajectory_probability(found, {}, stub.fn())) ==
          doctest::Approx(best).epsilon(1e-12));
    CHECK(leads_to(argmax_trajectory(y, {}, stub.fn(), 1), y));
  }
  const TokenSeq y = seq({2, 0, 2, 1});
  CHECK(argmax_trajectory(y, {}, concentrated_model(y, kVocab), 4) == left_to_right_trajectory(y));
  CHECK_THROWS(argmax_trajectory(y, {}, concentrated_model(y, kVocab), 0));
}

TEST_CASE("overfitting one pair drives its marginal to one") {
  Model m(ModelKind::Insertion, testing::tiny_config(kVocab), 9);
  const std::vector<Example> data{{seq({0, 1, 2}), seq({2, 0, 1})}};
  TrainConfig c;
  c.mode = TrainMode::NoPretrain;
  c.total_steps = 200;
  c.base_lr = 0.1;
  c.warmup_steps = 20;
  c.batch_tokens = 1;
  c.eval_every = 0;
  std::ostringstream metrics;
  TrainOutputs out;
  out.metrics = &metrics;
  const double before = exact_marginal(data[0].tgt, data[0].src, as_step_fn(m));
  train(m, data, {}, c, out);
  const double after = exact_marginal(data[0].tgt, data[0].src, as_step_fn(m));
  MESSAGE("marginal " << before << " -> " << after);
  CHECK(after > 0.95);

  const auto l = losses(metrics.str());
  REQUIRE(l.size() == 200);
  double previous = INFINITY;
  for (std::size_t w = 0; w < l.size(); w += 50) {
    double mean = 0.0;
    for (std::size_t i = w; i < w + 50; ++i) mean += l[i] / 50.0;
    CHECK(mean < previous);
    previous = mean;
  }
}

TEST_CASE("training is reproducible and counts model selections") {
  TaskSpec spec;
  spec.content_tokens = 4;
  spec.max_len = 4;
  const Vocab v = make_task_vocab(spec);
  const auto data = generate(spec, v, 40);
  const auto valid = generate(spec, v, 10, 40);
  TrainConfig c;
  c.total_steps = 12;
  c.pretrain_steps = 6;
  c.eval_every = 6;
  c.max_val_examples = 10;
  auto run = [&](TrainResult* result) {
    Model m(ModelKind::Insertion, testing::tiny_config(v.size()), c.seed);
    std::ostringstream metrics;
    TrainOutputs out;
    out.metrics = &metrics;
    *result = train(m, data, valid, c, out);
    return metrics.str();
  };
  TrainResult a, b;
  const std::string first = run(&a);
  CHECK(first == run(&b));
  CHECK(a.steps == 12);
  CHECK(a.model_selections > 0);
  CHECK(first.find("\"phase\":\"pretrain\"") != std::string::npos);
  CHECK(first.find("\"phase\":\"main\"") != std::string::npos);
  CHECK(first.find("\"phase\":\"valid\"") != std::string::npos);

  c.mode = TrainMode::OnlyPretrainUniform;
  TrainResult u;
  run(&u);
  CHECK(u.model_selections == 0);

  Model base(ModelKind::LeftToRight, testing::tiny_config(v.size()), 1);
  CHECK_THROWS(train(base, data, valid, c));
  c.mode = TrainMode::BaselineL2R;
  CHECK(train(base, data, valid, c).model_selections == 0);
}

TEST_CASE("train config presets") {
  const TrainConfig d = TrainConfig::desk();
  CHECK(d.total_steps == 20000);
  CHECK(d.beta2 == 0.98);
  const TrainConfig t = TrainConfig::transformer_base();
  CHECK(t.base_lr == doctest::Approx(1.4e-3));
  CHECK(t.warmup_steps == 16000);
  CHECK(t.batch_tokens == 4000);
  CHECK(t.pretrain_steps == 100000);
  TrainConfig bad;
  bad.warmup_steps = 0;
  CHECK_THROWS(bad.validate());
}

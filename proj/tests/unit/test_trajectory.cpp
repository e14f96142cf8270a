#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "intrus/trajectory.hpp"
#include "intrus/verify.hpp"

using namespace intrus;

namespace {

struct Words {
  Vocab v;
  Words() {
    for (const char* t : {"a", "b", "c", "cat", "sat", "x"}) v.add(t);
  }
  TokenSeq operator()(const char* text) const { return v.parse(text); }
  Token operator[](const char* word) const { return v.id(word); }
};

InsertionEvent ins(int pos, Token t) { return InsertionEvent::insert(pos, t); }

// Same mass on every (slot, content token) pair and on termination.
StepProbFn uniform_model(int vocab_size) {
  return [vocab_size](const TokenSeq&, const TokenSeq& partial) {
    StepDistribution d;
    const auto slots = static_cast<Eigen::Index>(partial.size()) + 1;
    d.insert = Matrix::Zero(slots, vocab_size);
    d.insert.rightCols(vocab_size - reserved::kCount).setOnes();
    d.eos = 1.0;
    const double total = d.total();
    d.insert /= total;
    d.eos /= total;
    return d;
  };
}

TokenSeq random_seq(Rng& rng, std::size_t len, int content) {
  TokenSeq y(len);
  for (Token& t : y) t = reserved::kCount + static_cast<Token>(rng.uniform_int(content));
  return y;
}

std::size_t factorial(std::size_t n) { return n <= 1 ? 1 : n * factorial(n - 1); }

}  // namespace

TEST_CASE("apply_insertion examples") {
  const Words w;
  CHECK(apply_insertion(w("cat"), ins(0, w["a"])) == w("a cat"));
  CHECK(apply_insertion({}, ins(0, w["x"])) == w("x"));
  CHECK(apply_insertion(w("a b"), ins(2, w["c"])) == w("a b c"));
  CHECK(apply_insertion(w("a b"), InsertionEvent::eos()) == w("a b"));
  CHECK_THROWS_AS(apply_insertion(w("a b"), ins(3, w["c"])), TrajectoryError);
  CHECK_THROWS_AS(apply_insertion(w("a b"), ins(-1, w["c"])), TrajectoryError);
}

TEST_CASE("correct_insertions examples") {
  const Words w;
  const TokenSeq y = w("a cat sat");
  CHECK(correct_insertions(y, w("cat")) ==
        std::vector<InsertionEvent>{ins(0, w["a"]), ins(1, w["sat"])});
  CHECK(correct_insertions(y, y) == std::vector<InsertionEvent>{InsertionEvent::eos()});
  CHECK(correct_insertions(w("a b a"), w("a")) ==
        std::vector<InsertionEvent>{ins(0, w["a"]), ins(0, w["b"]), ins(1, w["a"]), ins(1, w["b"])});
  CHECK_THROWS_AS(correct_insertions(y, w("sat cat")), TrajectoryError);
}

TEST_CASE("correct_insertions matches brute force on every partial") {
  Rng rng(21);
  const int content = 3;
  const int vocab = reserved::kCount + content;
  for (int trial = 0; trial < 60; ++trial) {
    const TokenSeq y = random_seq(rng, 1 + rng.uniform_int(6), content);
    // Every subsequence of y, by position mask.
    for (unsigned mask = 0; mask < (1u << y.size()); ++mask) {
      TokenSeq partial;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (mask & (1u << i)) partial.push_back(y[i]);
      const auto fast = correct_insertions(y, partial);
      CHECK(fast == correct_insertions_brute_force(y, partial, vocab));
      CHECK_FALSE(fast.empty());
    }
  }
}

TEST_CASE("left_to_right_trajectory") {
  const Words w;
  const Trajectory t = left_to_right_trajectory(w("a b"));
  CHECK(t.events ==
        std::vector<InsertionEvent>{ins(0, w["a"]), ins(1, w["b"]), InsertionEvent::eos()});
  CHECK(left_to_right_trajectory({}).events == std::vector<InsertionEvent>{InsertionEvent::eos()});

  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const TokenSeq y = random_seq(rng, rng.uniform_int(7), 3);
    const auto all = enumerate_trajectories(y);
    CHECK(std::find(all.begin(), all.end(), left_to_right_trajectory(y)) != all.end());
  }
}

TEST_CASE("uniform sampling examples") {
  const Words w;
  Rng rng(1);
  CHECK(sample_trajectory_uniform(w("a"), rng).events ==
        std::vector<InsertionEvent>{ins(0, w["a"]), InsertionEvent::eos()});
  const std::vector<std::size_t> order{1, 0};
  CHECK(trajectory_from_order(w("a b"), order).events ==
        std::vector<InsertionEvent>{ins(0, w["b"]), ins(0, w["a"]), InsertionEvent::eos()});
}

TEST_CASE("uniform sampling is uniform over trajectories") {
  const Words w;
  const TokenSeq y = w("a b c");
  Rng rng(12345);
  std::map<Trajectory, int> counts;
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) ++counts[sample_trajectory_uniform(y, rng)];
  CHECK(counts.size() == 6);
  for (const Trajectory& t : enumerate_trajectories(y)) {
    CHECK(std::abs(counts[t] / static_cast<double>(draws) - 1.0 / 6.0) < 0.01);
  }
}

TEST_CASE("model sampling under a uniform model") {
  const Words w;
  const TokenSeq y = w("a b");
  const StepProbFn uniform = uniform_model(w.v.size());
  Rng rng(8);
  std::map<Trajectory, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const SampledTrajectory s = sample_trajectory_from_model(y, {}, uniform, rng);
    CHECK(s.trajectory.events.size() == y.size() + 1);
    ++counts[s.trajectory];
  }
  CHECK(counts.size() == 2);
  for (const auto& [t, n] : counts) CHECK(std::abs(n / static_cast<double>(draws) - 0.5) < 0.01);
}

TEST_CASE("model sampling follows a deterministic model") {
  const Words w;
  const TokenSeq y = w("c a b a");
  Rng rng(2);
  const SampledTrajectory s =
      sample_trajectory_from_model(y, {}, concentrated_model(y, w.v.size()), rng);
  CHECK(s.trajectory == left_to_right_trajectory(y));
  for (double p : s.step_probs) CHECK(p == 1.0);
}

TEST_CASE("model sampling stays inside T*(y)") {
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const TokenSeq y = random_seq(rng, 1 + rng.uniform_int(8), 3);
    const StubModel stub(static_cast<std::uint64_t>(trial), reserved::kCount + 3, 2.0);
    const SampledTrajectory s = sample_trajectory_from_model(y, {}, stub.fn(), rng);
    CHECK(leads_to(s.trajectory, y));
    for (double p : s.step_probs) CHECK((p > 0.0 && p <= 1.0));
  }
}

TEST_CASE("degenerate model is reported") {
  const Words w;
  const int vocab = w.v.size();
  const StepProbFn only_stop = [vocab](const TokenSeq&, const TokenSeq& partial) {
    StepDistribution d;
    d.insert = Matrix::Zero(static_cast<Eigen::Index>(partial.size()) + 1, vocab);
    d.eos = 1.0;
    return d;
  };
  Rng rng(1);
  CHECK_THROWS_AS(sample_trajectory_from_model(w("a"), {}, only_stop, rng), DegenerateModelError);
}

TEST_CASE("enumeration examples") {
  const Words w;
  CHECK(enumerate_trajectories(w("a cat sat")).size() == 6);
  const auto aa = enumerate_trajectories(w("a a"));
  const std::set<Trajectory> got(aa.begin(), aa.end());
  const Token a = w["a"];
  const std::set<Trajectory> expected{
      Trajectory{{ins(0, a), ins(0, a), InsertionEvent::eos()}},
      Trajectory{{ins(0, a), ins(1, a), InsertionEvent::eos()}}};
  CHECK(got == expected);
  CHECK_THROWS_AS(enumerate_trajectories(TokenSeq(9, a)), std::length_error);
}

TEST_CASE("enumeration count is n! including duplicates, with no repeats") {
  Rng rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    const TokenSeq y = random_seq(rng, rng.uniform_int(7), 2 + static_cast<int>(trial % 3));
    const auto all = enumerate_trajectories(y);
    CHECK(all.size() == factorial(y.size()));
    CHECK(std::set<Trajectory>(all.begin(), all.end()).size() == all.size());
    for (const Trajectory& t : all) {
      CHECK(leads_to(t, y));
      // Every prefix builds a subsequence of y.
      TokenSeq partial;
      for (const InsertionEvent& ev : t.events) {
        partial = apply_insertion(partial, ev);
        CHECK(is_subsequence(partial, y));
      }
    }
  }
}

TEST_CASE("exact_marginal on hand-sized cases") {
  const Words w;
  const int vocab = w.v.size();
  const double q = 0.3, r = 0.6;
  const Token a = w["a"];
  const StepProbFn model = [&](const TokenSeq&, const TokenSeq& partial) {
    StepDistribution d;
    d.insert = Matrix::Zero(static_cast<Eigen::Index>(partial.size()) + 1, vocab);
    if (partial.empty()) {
      d.insert(0, a) = q;
      d.insert(0, w["b"]) = 1.0 - q;
    } else {
      d.eos = r;
      d.insert(0, a) = 1.0 - r;
    }
    return d;
  };
  CHECK(exact_marginal(w("a"), {}, model) == doctest::Approx(q * r).epsilon(1e-15));

  const StubModel stub(5, vocab);
  const TokenSeq y = w("a b");
  const auto p = [&](const TokenSeq& partial, const InsertionEvent& ev) {
    return stub(TokenSeq{}, partial).prob(ev);
  };
  const double expected =
      p({}, ins(0, w["a"])) * p(w("a"), ins(1, w["b"])) * p(y, InsertionEvent::eos()) +
      p({}, ins(0, w["b"])) * p(w("b"), ins(0, w["a"])) * p(y, InsertionEvent::eos());
  CHECK(exact_marginal(y, {}, stub.fn()) == doctest::Approx(expected).epsilon(1e-14));
  CHECK_THROWS_AS(exact_marginal(TokenSeq(17, a), {}, stub.fn()), std::length_error);
}

TEST_CASE("dynamic programming equals the enumeration sum") {
  Rng rng(7);
  for (int trial = 0; trial < 60; ++trial) {
    const TokenSeq y = random_seq(rng, 1 + rng.uniform_int(6), 3);
    const StubModel stub(static_cast<std::uint64_t>(100 + trial), reserved::kCount + 3);
    double sum = 0.0;
    for (const Trajectory& t : enumerate_trajectories(y)) {
      sum += trajectory_probability(t, {}, stub.fn());
    }
    const double dp = exact_marginal(y, {}, stub.fn());
    CHECK(std::abs(dp - sum) / sum < 1e-12);
  }
}

TEST_CASE("bounds: tight on a concentrated model") {
  const Words w;
  const TokenSeq y = w("a b a c");
  const TrajectoryBounds b = exact_bounds(y, {}, concentrated_model(y, w.v.size()));
  CHECK(b.marginal_logp == doctest::Approx(0.0));
  CHECK(b.max_traj_logp == doctest::Approx(b.marginal_logp));
  CHECK(b.expected_logp == doctest::Approx(b.marginal_logp));
}

TEST_CASE("bounds: uniform model on two paths") {
  const Words w;
  const TrajectoryBounds b = exact_bounds(w("a b"), {}, uniform_model(w.v.size()));
  CHECK(b.expected_logp <= b.max_traj_logp + 1e-12);
  CHECK(b.max_traj_logp < b.marginal_logp);
  CHECK(b.marginal_logp == doctest::Approx(b.max_traj_logp + std::log(2.0)));
}

TEST_CASE("bounds ordering on random stub models") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSeq y = random_seq(rng, 1 + rng.uniform_int(5), 3);
    const StubModel stub(static_cast<std::uint64_t>(trial), reserved::kCount + 3, 2.0);
    const TrajectoryBounds b = exact_bounds(y, {}, stub.fn());
    CHECK(b.expected_logp <= b.max_traj_logp + 1e-12);
    CHECK(b.max_traj_logp <= b.marginal_logp + 1e-12);
  }
}

TEST_CASE("trajectory line format") {
  const Words w;
  const Trajectory t{{ins(0, w["cat"]), ins(0, w["a"]), ins(2, w["sat"]), InsertionEvent::eos()}};
  CHECK(format_trajectory(t, &w.v) == "0:cat 0:a 2:sat EOS");
  CHECK(parse_trajectory("0:cat 0:a 2:sat EOS", &w.v) == t);
  CHECK(parse_trajectory(format_trajectory(t)) == t);
  CHECK(format_trajectory(Trajectory{{InsertionEvent::eos()}}) == "EOS");
  CHECK_THROWS_AS(parse_trajectory("0:a", &w.v), TrajectoryError);
  CHECK_THROWS_AS(parse_trajectory("0:a EOS 1:b", &w.v), TrajectoryError);
  CHECK_THROWS_AS(parse_trajectory("x:a EOS", &w.v), TrajectoryError);
  CHECK_THROWS(parse_trajectory("0:zebra EOS", &w.v));
}

TEST_CASE("apply_trajectory rejects malformed streams") {
  const Words w;
  CHECK_THROWS_AS(apply_trajectory(Trajectory{{ins(0, w["a"])}}), TrajectoryError);
  CHECK_THROWS_AS(
      apply_trajectory(Trajectory{{InsertionEvent::eos(), ins(0, w["a"]), InsertionEvent::eos()}}),
      TrajectoryError);
  CHECK(apply_trajectory(Trajectory{{ins(0, w["b"]), ins(0, w["a"]), InsertionEvent::eos()}}) ==
        w("a b"));
}

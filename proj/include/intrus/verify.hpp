#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "intrus/autograd.hpp"
#include "intrus/inference.hpp"
#include "intrus/model.hpp"
#include "intrus/trajectory.hpp"

namespace intrus {

// Random but fixed step distribution: a pure function of (seed, partial).
// `sharpness` scales the log-weights; larger values give peakier draws.
class StubModel {
 public:
  StubModel(std::uint64_t seed, int vocab_size, double sharpness = 1.0)
      : seed_(seed), vocab_size_(vocab_size), sharpness_(sharpness) {}

  StepDistribution operator()(const TokenSeq& src, const TokenSeq& partial) const;
  StepProbFn fn() const;

 private:
  std::uint64_t seed_;
  int vocab_size_;
  double sharpness_;
};

// All mass on the left-to-right trajectory of y (uniform elsewhere).
StepProbFn concentrated_model(const TokenSeq& y, int vocab_size);

// Norm-wise relative error ||a - n|| / max(||a||, ||n||), 0 when both vanish.
double relative_error(const Matrix& analytic, const Matrix& numeric);

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest relative error between reverse-mode and central-difference
// gradients of a scalar-valued graph over each input.
double gradient_check(const GraphFn& f, const std::vector<Matrix>& inputs, double h = 1e-5);

struct OpGradient {
  std::string op;
  double error;
};
std::vector<OpGradient> check_op_gradients(std::uint64_t seed);

// Gradient of trajectory_log_prob (insertion) or baseline_log_prob over every
// parameter of a small random model.
double check_model_gradient(ModelKind kind, std::uint64_t seed, double h = 1e-5);

struct EnumerationReport {
  int instances = 0;
  double max_rel_error = 0.0;
  int count_mismatches = 0;  // instances with |trajectories| != |y|!
  double seconds = 0.0;
};
EnumerationReport check_marginal_vs_enumeration(int instances, std::uint64_t seed,
                                                std::size_t max_len = 6);

struct BoundsReport {
  int models = 0;
  int violations = 0;
  double min_gap_max_minus_expected = 0.0;
  double min_gap_marginal_minus_max = 0.0;
  double tight_spread = 0.0;  // max - min of the three bounds on the concentrated model
};
BoundsReport check_bound_ordering(int models, std::uint64_t seed, std::size_t max_len = 5);

// Largest |sum p - 1| over partial lengths 0..max_partial and `draws` models.
double check_normalization(int draws, int max_partial, std::uint64_t seed);

// Exhaustive search over every trajectory with at most max_len - 1 insertions.
struct ExhaustiveResult {
  Trajectory trajectory;
  double score = 0.0;
  std::size_t trajectories = 0;
};
ExhaustiveResult exhaustive_argmax(const Model& model, const TokenSeq& src, LengthNorm norm);

struct SearchReport {
  int instances = 0;
  int beam_matches_exhaustive = 0;
  int greedy_matches_beam1 = 0;
};
SearchReport check_search(int instances, std::uint64_t seed, LengthNorm norm = LengthNorm::BySteps);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Suites: gradients, enumeration, bounds, normalization, search, or
// "oracles" for all of them.
const std::vector<std::string>& suite_names();
std::vector<CheckResult> run_suite(const std::string& suite, std::uint64_t seed = 1);

}  // namespace intrus

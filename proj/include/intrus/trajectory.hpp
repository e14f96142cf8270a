#pragma once

#include <compare>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "intrus/rng.hpp"
#include "intrus/tensor.hpp"
#include "intrus/vocab.hpp"

namespace intrus {

// One decoding action: insert `token` before position `pos` of the partial
// output (pos == length appends), or terminate.
struct InsertionEvent {
  enum class Kind { Insert = 0, Eos = 1 };
  Kind kind = Kind::Eos;
  int pos = 0;
  Token token = 0;

  static InsertionEvent insert(int pos, Token token) { return {Kind::Insert, pos, token}; }
  static InsertionEvent eos() { return {Kind::Eos, 0, 0}; }
  bool is_eos() const { return kind == Kind::Eos; }

  auto operator<=>(const InsertionEvent&) const = default;
};

// Events in application order; a complete trajectory ends with its only Eos.
struct Trajectory {
  std::vector<InsertionEvent> events;

  std::size_t insertions() const;
  bool terminated() const { return !events.empty() && events.back().is_eos(); }
  auto operator<=>(const Trajectory&) const = default;
};

struct TrajectoryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when a model gives zero mass to every correct insertion.
struct DegenerateModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TokenSeq apply_insertion(const TokenSeq& partial, const InsertionEvent& ev);
// Applies a whole trajectory to the empty sequence; throws on malformed input.
TokenSeq apply_trajectory(const Trajectory& traj);
bool is_subsequence(const TokenSeq& small, const TokenSeq& big);
// True iff traj is well formed and produces exactly y.
bool leads_to(const Trajectory& traj, const TokenSeq& y);

// Events keeping the partial a subsequence of y, sorted by (pos, token);
// {Eos} exactly when partial == y.
std::vector<InsertionEvent> correct_insertions(const TokenSeq& y, const TokenSeq& partial);
// Reference definition: tries every (pos, token < vocab_size) pair.
std::vector<InsertionEvent> correct_insertions_brute_force(const TokenSeq& y,
                                                           const TokenSeq& partial, int vocab_size);

// Insertion stream that adds target positions in the given order.
Trajectory trajectory_from_order(const TokenSeq& y, std::span<const std::size_t> order);
Trajectory sample_trajectory_uniform(const TokenSeq& y, Rng& rng);
Trajectory left_to_right_trajectory(const TokenSeq& y);

// Normalized distribution over all events for one partial output:
// insert(pos, token) for pos in [0, len] plus the terminating event.
struct StepDistribution {
  Matrix insert;
  double eos = 0.0;

  double prob(const InsertionEvent& ev) const;
  double total() const { return insert.sum() + eos; }
};

using StepProbFn = std::function<StepDistribution(const TokenSeq& src, const TokenSeq& partial)>;

// Draws an index into `correct` with probability proportional to `mass`.
std::size_t sample_correct_event(std::span<const double> mass, Rng& rng, const TokenSeq& partial);

struct SampledTrajectory {
  Trajectory trajectory;
  std::vector<double> step_probs;  // renormalized probability of each chosen event
};

SampledTrajectory sample_trajectory_from_model(const TokenSeq& y, const TokenSeq& src,
                                               const StepProbFn& model, Rng& rng);

inline constexpr std::size_t kMaxEnumerateLength = 8;
inline constexpr std::size_t kMaxMarginalLength = 16;
inline constexpr std::size_t kMaxBoundsLength = 6;

std::vector<Trajectory> enumerate_trajectories(const TokenSeq& y);

double trajectory_probability(const Trajectory& traj, const TokenSeq& src, const StepProbFn& model);

// p(y | src) summed over every trajectory, by dynamic programming over the
// distinct subsequences of y.
double exact_marginal(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model);

struct TrajectoryBounds {
  double marginal_logp;
  double max_traj_logp;
  double expected_logp;  // under stepwise-renormalized sampling
};

TrajectoryBounds exact_bounds(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model);

// Line format: space-separated `pos:token` pairs then `EOS`. Tokens are
// vocabulary strings when a vocab is given, numeric ids otherwise.
std::string format_trajectory(const Trajectory& traj, const Vocab* vocab = nullptr);
Trajectory parse_trajectory(std::string_view line, const Vocab* vocab = nullptr);

}  // namespace intrus

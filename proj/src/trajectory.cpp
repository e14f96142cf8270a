#include "intrus/trajectory.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace intrus {
namespace {

std::string seq_string(const TokenSeq& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Model distribution at a partial, memoized per token content.
class DistCache {
 public:
  DistCache(const TokenSeq& src, const StepProbFn& model) : src_(src), model_(model) {}

  const StepDistribution& at(const TokenSeq& partial) {
    auto it = cache_.find(partial);
    if (it == cache_.end()) it = cache_.emplace(partial, model_(src_, partial)).first;
    return it->second;
  }

 private:
  const TokenSeq& src_;
  const StepProbFn& model_;
  std::map<TokenSeq, StepDistribution> cache_;
};

void enumerate_from(const TokenSeq& y, TokenSeq& partial, Trajectory& prefix,
                    std::vector<Trajectory>& out) {
  for (const InsertionEvent& ev : correct_insertions(y, partial)) {
    prefix.events.push_back(ev);
    if (ev.is_eos()) {
      out.push_back(prefix);
    } else {
      TokenSeq next = apply_insertion(partial, ev);
      enumerate_from(y, next, prefix, out);
    }
    prefix.events.pop_back();
  }
}

}  // namespace

std::size_t Trajectory::insertions() const {
  return static_cast<std::size_t>(
      std::count_if(events.begin(), events.end(), [](const auto& e) { return !e.is_eos(); }));
}

TokenSeq apply_insertion(const TokenSeq& partial, const InsertionEvent& ev) {
  if (ev.is_eos()) return partial;
  if (ev.pos < 0 || static_cast<std::size_t>(ev.pos) > partial.size()) {
    throw TrajectoryError("insertion position " + std::to_string(ev.pos) + " outside [0, " +
                          std::to_string(partial.size()) + "]");
  }
  TokenSeq out;
  out.reserve(partial.size() + 1);
  out.insert(out.end(), partial.begin(), partial.begin() + ev.pos);
  out.push_back(ev.token);
  out.insert(out.end(), partial.begin() + ev.pos, partial.end());
  return out;
}

TokenSeq apply_trajectory(const Trajectory& traj) {
  if (!traj.terminated()) throw TrajectoryError("trajectory does not end with EOS");
  TokenSeq seq;
  for (std::size_t i = 0; i + 1 < traj.events.size(); ++i) {
    if (traj.events[i].is_eos()) throw TrajectoryError("EOS before the final event");
    seq = apply_insertion(seq, traj.events[i]);
  }
  return seq;
}

bool is_subsequence(const TokenSeq& small, const TokenSeq& big) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < big.size() && j < small.size(); ++i) {
    if (big[i] == small[j]) ++j;
  }
  return j == small.size();
}

bool leads_to(const Trajectory& traj, const TokenSeq& y) {
  try {
    return apply_trajectory(traj) == y;
  } catch (const TrajectoryError&) {
    return false;
  }
}

std::vector<InsertionEvent> correct_insertions(const TokenSeq& y, const TokenSeq& partial) {
  if (partial == y) return {InsertionEvent::eos()};
  const std::size_t n = y.size(), l = partial.size();
  // pre[i]: y-prefix length consumed by the earliest embedding of partial[0, i).
  std::vector<std::size_t> pre(l + 1, 0);
  for (std::size_t i = 0, j = 0; i < l; ++i) {
    while (j < n && y[j] != partial[i]) ++j;
    if (j == n)
      throw TrajectoryError("partial " + seq_string(partial) + " is not a subsequence of " +
                            seq_string(y));
    pre[i + 1] = ++j;
  }
  // suf[i]: latest y index at which an embedding of partial[i, l) can start.
  std::vector<std::size_t> suf(l + 1, n);
  for (std::size_t i = l, j = n; i-- > 0;) {
    while (y[j - 1] != partial[i]) --j;
    suf[i] = --j;
  }
  std::vector<InsertionEvent> out;
  for (std::size_t p = 0; p <= l; ++p) {
    std::set<Token> tokens;
    for (std::size_t j = pre[p]; j < suf[p]; ++j) tokens.insert(y[j]);
    for (Token t : tokens) out.push_back(InsertionEvent::insert(static_cast<int>(p), t));
  }
  return out;
}

std::vector<InsertionEvent> correct_insertions_brute_force(const TokenSeq& y,
                                                           const TokenSeq& partial,
                                                           int vocab_size) {
  if (!is_subsequence(partial, y)) throw TrajectoryError("partial is not a subsequence of target");
  if (partial == y) return {InsertionEvent::eos()};
  std::vector<InsertionEvent> out;
  for (std::size_t p = 0; p <= partial.size(); ++p) {
    for (Token t = 0; t < vocab_size; ++t) {
      const auto ev = InsertionEvent::insert(static_cast<int>(p), t);
      if (is_subsequence(apply_insertion(partial, ev), y)) out.push_back(ev);
    }
  }
  return out;
}

Trajectory trajectory_from_order(const TokenSeq& y, std::span<const std::size_t> order) {
  if (order.size() != y.size()) throw TrajectoryError("order must cover every target position");
  Trajectory traj;
  std::vector<bool> placed(y.size(), false);
  for (std::size_t target_pos : order) {
    if (target_pos >= y.size() || placed[target_pos]) {
      throw TrajectoryError("order is not a permutation of target positions");
    }
    const auto pos =
        std::count(placed.begin(), placed.begin() + static_cast<std::ptrdiff_t>(target_pos), true);
    traj.events.push_back(InsertionEvent::insert(static_cast<int>(pos), y[target_pos]));
    placed[target_pos] = true;
  }
  traj.events.push_back(InsertionEvent::eos());
  return traj;
}

Trajectory sample_trajectory_uniform(const TokenSeq& y, Rng& rng) {
  std::vector<std::size_t> order(y.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  return trajectory_from_order(y, order);
}

Trajectory left_to_right_trajectory(const TokenSeq& y) {
  Trajectory traj;
  for (std::size_t i = 0; i < y.size(); ++i) {
    traj.events.push_back(InsertionEvent::insert(static_cast<int>(i), y[i]));
  }
  traj.events.push_back(InsertionEvent::eos());
  return traj;
}

double StepDistribution::prob(const InsertionEvent& ev) const {
  if (ev.is_eos()) return eos;
  if (ev.pos < 0 || ev.pos >= insert.rows() || ev.token < 0 || ev.token >= insert.cols())
    return 0.0;
  return insert(ev.pos, ev.token);
}

std::size_t sample_correct_event(std::span<const double> mass, Rng& rng, const TokenSeq& partial) {
  const std::size_t k = rng.categorical(mass);
  if (k == mass.size()) {
    throw DegenerateModelError("model assigns zero mass to every correct insertion at partial " +
                               seq_string(partial));
  }
  return k;
}

SampledTrajectory sample_trajectory_from_model(const TokenSeq& y, const TokenSeq& src,
                                               const StepProbFn& model, Rng& rng) {
  SampledTrajectory out;
  TokenSeq partial;
  while (true) {
    const auto correct = correct_insertions(y, partial);
    const StepDistribution dist = model(src, partial);
    std::vector<double> mass(correct.size());
    double total = 0.0;
    for (std::size_t i = 0; i < correct.size(); ++i) total += mass[i] = dist.prob(correct[i]);
    const std::size_t k = sample_correct_event(mass, rng, partial);
    out.trajectory.events.push_back(correct[k]);
    out.step_probs.push_back(mass[k] / total);
    if (correct[k].is_eos()) break;
    partial = apply_insertion(partial, correct[k]);
  }
  return out;
}

std::vector<Trajectory> enumerate_trajectories(const TokenSeq& y) {
  if (y.size() > kMaxEnumerateLength) {
    throw std::length_error("enumerate_trajectories: length " + std::to_string(y.size()) +
                            " exceeds " + std::to_string(kMaxEnumerateLength));
  }
  std::vector<Trajectory> out;
  TokenSeq partial;
  Trajectory prefix;
  enumerate_from(y, partial, prefix, out);
  return out;
}

double trajectory_probability(const Trajectory& traj, const TokenSeq& src,
                              const StepProbFn& model) {
  TokenSeq partial;
  double p = 1.0;
  for (const auto& ev : traj.events) {
    p *= model(src, partial).prob(ev);
    partial = apply_insertion(partial, ev);
  }
  return p;
}

double exact_marginal(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model) {
  if (y.size() > kMaxMarginalLength) {
    throw std::length_error("exact_marginal: length " + std::to_string(y.size()) + " exceeds " +
                            std::to_string(kMaxMarginalLength));
  }
  std::map<TokenSeq, double> level{{TokenSeq{}, 1.0}};
  for (std::size_t t = 0; t < y.size(); ++t) {
    std::map<TokenSeq, double> next;
    for (const auto& [state, mass] : level) {
      const StepDistribution dist = model(src, state);
      for (const auto& ev : correct_insertions(y, state)) {
        next[apply_insertion(state, ev)] += mass * dist.prob(ev);
      }
    }
    level = std::move(next);
  }
  return level.at(y) * model(src, y).eos;
}

TrajectoryBounds exact_bounds(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model) {
  if (y.size() > kMaxBoundsLength) {
    throw std::length_error("exact_bounds: length " + std::to_string(y.size()) + " exceeds " +
                            std::to_string(kMaxBoundsLength));
  }
  DistCache cache(src, model);
  double total = 0.0;
  double best = -std::numeric_limits<double>::infinity();
  double expected = 0.0;
  for (const Trajectory& traj : enumerate_trajectories(y)) {
    TokenSeq partial;
    double logp = 0.0, q = 1.0;
    for (const auto& ev : traj.events) {
      const StepDistribution& dist = cache.at(partial);
      double correct_mass = 0.0;
      for (const auto& c : correct_insertions(y, partial)) correct_mass += dist.prob(c);
      const double p = dist.prob(ev);
      logp += std::log(p);
      q = correct_mass > 0.0 ? q * p / correct_mass : 0.0;
      partial = apply_insertion(partial, ev);
    }
    total += std::exp(logp);
    best = std::max(best, logp);
    if (q > 0.0) expected += q * logp;
  }
  return {std::log(total), best, expected};
}

std::string format_trajectory(const Trajectory& traj, const Vocab* vocab) {
  std::string out;
  for (const auto& ev : traj.events) {
    if (!out.empty()) out += ' ';
    if (ev.is_eos()) {
      out += "EOS";
    } else {
      out += std::to_string(ev.pos);
      out += ':';
      out += vocab ? vocab->token(ev.token) : std::to_string(ev.token);
    }
  }
  return out;
}

Trajectory parse_trajectory(std::string_view line, const Vocab* vocab) {
  Trajectory traj;
  for (std::string_view item : split_whitespace(line)) {
    if (!traj.events.empty() && traj.events.back().is_eos()) {
      throw TrajectoryError("event after EOS in trajectory line");
    }
    if (item == "EOS") {
      traj.events.push_back(InsertionEvent::eos());
      continue;
    }
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) {
      throw TrajectoryError("malformed event '" + std::string(item) + "'");
    }
    int pos = 0;
    const auto pos_text = item.substr(0, colon);
    if (std::from_chars(pos_text.data(), pos_text.data() + pos_text.size(), pos).ec !=
        std::errc()) {
      throw TrajectoryError("malformed position in '" + std::string(item) + "'");
    }
    const auto tok_text = item.substr(colon + 1);
    Token tok = 0;
    if (vocab) {
      tok = vocab->id(tok_text);
    } else if (std::from_chars(tok_text.data(), tok_text.data() + tok_text.size(), tok).ec !=
               std::errc()) {
      throw TrajectoryError("malformed token id in '" + std::string(item) + "'");
    }
    traj.events.push_back(InsertionEvent::insert(pos, tok));
  }
  if (!traj.terminated()) throw TrajectoryError("trajectory line does not end with EOS");
  return traj;
}

}  // namespace intrus

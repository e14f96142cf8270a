#include "intrus/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace intrus {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Limits {
  int max_steps;  // rounds, counting the terminating one
  int max_out;    // longest output the model can represent
  int bound_steps;
};

Limits limits_for(const Model& model, const DecodeOptions& opt) {
  Limits lim;
  const int max_len = model.config().max_len;
  lim.max_steps = opt.max_steps > 0 ? opt.max_steps : 2 * max_len;
  lim.max_out = max_len - 1;
  if (opt.exact_length > lim.max_out) {
    throw LengthError("exact_length " + std::to_string(opt.exact_length) + " exceeds max_len - 1");
  }
  if (opt.exact_length >= 0 && opt.exact_length + 1 > lim.max_steps) {
    lim.max_steps = opt.exact_length + 1;
  }
  lim.bound_steps =
      opt.exact_length >= 0 ? opt.exact_length : std::min(lim.max_out, lim.max_steps - 1);
  lim.bound_steps = std::max(lim.bound_steps, 1);
  return lim;
}

bool may_insert(std::size_t len, const Limits& lim, const DecodeOptions& opt) {
  const int n = static_cast<int>(len);
  return n < lim.max_out && (opt.exact_length < 0 || n < opt.exact_length);
}

bool may_stop(std::size_t len, const DecodeOptions& opt) {
  return opt.exact_length < 0 || static_cast<int>(len) == opt.exact_length;
}

struct Candidate {
  std::size_t hyp;
  InsertionEvent event;
  double logp;
};

// Finished hypotheses rank by score, then by how early they finished, then by
// trajectory.
bool better_finished(const Hypothesis& a, const Hypothesis& b, LengthNorm norm) {
  const double sa = normalized_score(a.logp, a.steps, norm);
  const double sb = normalized_score(b.logp, b.steps, norm);
  if (sa != sb) return sa > sb;
  if (a.finished_round != b.finished_round) return a.finished_round < b.finished_round;
  return a.trajectory < b.trajectory;
}

bool better_active(const Hypothesis& a, const Hypothesis& b) {
  if (a.logp != b.logp) return a.logp > b.logp;
  return a.trajectory < b.trajectory;
}

DecodeResult finish(std::vector<Hypothesis> finished, const std::vector<Hypothesis>& active,
                    LengthNorm norm) {
  DecodeResult r;
  if (!finished.empty()) {
    std::sort(finished.begin(), finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
      return better_finished(a, b, norm);
    });
    const Hypothesis& best = finished.front();
    r.output = best.partial;
    r.trajectory = best.trajectory;
    r.logp = best.logp;
    r.score = normalized_score(best.logp, best.steps, norm);
  } else if (!active.empty()) {
    const Hypothesis& best = *std::min_element(active.begin(), active.end(), better_active);
    r.output = best.partial;
    r.trajectory = best.trajectory;
    r.logp = best.logp;
    r.score = normalized_score(best.logp, best.steps, norm);
    r.truncated = true;
  } else {
    r.truncated = true;
    r.score = kNegInf;
    r.logp = kNegInf;
  }
  r.finished = std::move(finished);
  return r;
}

// Expands every live hypothesis and keeps the `beam` best children.
template <typename Expand, typename Advance>
DecodeResult run_beam(const DecodeOptions& opt, const Limits& lim, Expand expand, Advance advance) {
  if (opt.beam < 1) throw std::invalid_argument("beam must be >= 1");
  std::vector<Hypothesis> active(1);
  std::vector<Hypothesis> finished;
  const auto k = static_cast<std::size_t>(opt.beam);

  for (int round = 0; round < lim.max_steps && !active.empty(); ++round) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < active.size(); ++h) expand(h, active[h], cands);
    const auto order = [&](const Candidate& a, const Candidate& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.hyp != b.hyp) return active[a.hyp].trajectory < active[b.hyp].trajectory;
      return a.event < b.event;
    };
    const std::size_t keep = std::min(k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      order);
    cands.resize(keep);

    std::vector<Hypothesis> next;
    for (const Candidate& c : cands) {
      Hypothesis h = active[c.hyp];
      h.trajectory.events.push_back(c.event);
      h.logp = c.logp;
      if (c.event.is_eos()) {
        h.finished = true;
        h.finished_round = round;
        finished.push_back(std::move(h));
      } else {
        h.partial = apply_insertion(h.partial, c.event);
        ++h.steps;
        next.push_back(std::move(h));
      }
    }
    advance(active, cands, next);
    active = std::move(next);

    if (!finished.empty() && !active.empty() && opt.length_norm == LengthNorm::BySteps) {
      double best = kNegInf;
      for (const auto& f : finished)
        best = std::max(best, normalized_score(f.logp, f.steps, opt.length_norm));
      double bound = kNegInf;
      for (const auto& a : active) bound = std::max(bound, a.logp / lim.bound_steps);
      if (bound <= best) break;
    } else if (!finished.empty() && !active.empty()) {
      // Unnormalized scores only decrease, so no live hypothesis can win.
      double best = kNegInf;
      for (const auto& f : finished) best = std::max(best, f.logp);
      double bound = kNegInf;
      for (const auto& a : active) bound = std::max(bound, a.logp);
      if (bound <= best) break;
    }
  }
  return finish(std::move(finished), active, opt.length_norm);
}

DecodeResult beam_insertion(const Model& model, const TokenSeq& src, const DecodeOptions& opt) {
  const Limits lim = limits_for(model, opt);
  const MemorySnapshot snapshot = encode_source(model, src);
  auto expand = [&](std::size_t h, const Hypothesis& hyp, std::vector<Candidate>& out) {
    Tape tape(false);
    ModelGraph g(model, tape);
    const Memory m = snapshot.bind(tape);
    const InsertionDistribution dist = g.insertion_distribution(m, hyp.partial);
    const Matrix& lp = dist.log_probs.value();
    if (may_insert(hyp.partial.size(), lim, opt)) {
      for (Eigen::Index r = 0; r < lp.rows(); ++r) {
        for (Eigen::Index c = 0; c < lp.cols(); ++c) {
          if (dist.mask(r, c) == 0 || c == reserved::kStop) continue;
          out.push_back({h, InsertionEvent::insert(static_cast<int>(r), static_cast<Token>(c)),
                         hyp.logp + lp(r, c)});
        }
      }
    }
    if (may_stop(hyp.partial.size(), opt)) {
      out.push_back({h, InsertionEvent::eos(), hyp.logp + dist.log_prob(InsertionEvent::eos())});
    }
  };
  auto advance = [](const std::vector<Hypothesis>&, const std::vector<Candidate>&,
                    std::vector<Hypothesis>&) {};
  return run_beam(opt, lim, expand, advance);
}

DecodeResult beam_baseline(const Model& model, const TokenSeq& src, const DecodeOptions& opt) {
  const Limits lim = limits_for(model, opt);
  const MemorySnapshot snapshot = encode_source(model, src);
  struct Cache {
    ModelGraph::BaselineState state;
    RowVector next;
  };
  auto feed = [&](Cache& cache, Token token) {
    Tape tape(false);
    ModelGraph g(model, tape);
    const Memory m = snapshot.bind(tape);
    cache.next = g.baseline_step(m, cache.state, token);
  };
  std::vector<Cache> caches(1);
  {
    Tape tape(false);
    ModelGraph g(model, tape);
    caches[0].state = g.baseline_start();
  }
  feed(caches[0], reserved::kBos);

  auto expand = [&](std::size_t h, const Hypothesis& hyp, std::vector<Candidate>& out) {
    const RowVector& lp = caches[h].next;
    const int at = static_cast<int>(hyp.partial.size());
    if (may_insert(hyp.partial.size(), lim, opt)) {
      for (Eigen::Index c = reserved::kCount; c < lp.cols(); ++c) {
        out.push_back({h, InsertionEvent::insert(at, static_cast<Token>(c)), hyp.logp + lp(c)});
      }
    }
    if (may_stop(hyp.partial.size(), opt)) {
      out.push_back({h, InsertionEvent::eos(), hyp.logp + lp(reserved::kStop)});
    }
  };
  auto advance = [&](const std::vector<Hypothesis>&, const std::vector<Candidate>& chosen,
                     std::vector<Hypothesis>&) {
    std::vector<Cache> next;
    for (const Candidate& c : chosen) {
      if (c.event.is_eos()) continue;
      Cache cache = caches[c.hyp];
      feed(cache, c.event.token);
      next.push_back(std::move(cache));
    }
    caches = std::move(next);
  };
  return run_beam(opt, lim, expand, advance);
}

}  // namespace

LengthNorm parse_length_norm(const std::string& name) {
  if (name == "off" || name == "none") return LengthNorm::Off;
  if (name == "steps" || name == "by_steps") return LengthNorm::BySteps;
  throw std::invalid_argument("unknown length normalization '" + name + "' (valid: off, steps)");
}

double normalized_score(double logp, int steps, LengthNorm norm) {
  if (norm == LengthNorm::Off) return logp;
  return logp / std::max(steps, 1);
}

DecodeResult beam_decode(const Model& model, const TokenSeq& src, const DecodeOptions& options) {
  return model.kind() == ModelKind::Insertion ? beam_insertion(model, src, options)
                                              : beam_baseline(model, src, options);
}

DecodeResult greedy_decode(const Model& model, const TokenSeq& src, int max_steps,
                           LengthNorm norm) {
  DecodeOptions opt;
  opt.max_steps = max_steps;
  opt.length_norm = norm;
  const Limits lim = limits_for(model, opt);
  const MemorySnapshot snapshot = encode_source(model, src);

  Hypothesis hyp;
  ModelGraph::BaselineState state;
  RowVector next;
  const bool baseline = model.kind() == ModelKind::LeftToRight;
  auto feed = [&](Token token) {
    Tape tape(false);
    ModelGraph g(model, tape);
    const Memory m = snapshot.bind(tape);
    if (state.keys.empty()) state = g.baseline_start();
    next = g.baseline_step(m, state, token);
  };
  if (baseline) feed(reserved::kBos);

  for (int round = 0; round < lim.max_steps; ++round) {
    InsertionEvent best = InsertionEvent::eos();
    double best_lp = kNegInf;
    const bool insert_ok = may_insert(hyp.partial.size(), lim, opt);
    if (baseline) {
      if (insert_ok) {
        for (Eigen::Index c = reserved::kCount; c < next.cols(); ++c) {
          if (next(c) > best_lp) {
            best_lp = next(c);
            best =
                InsertionEvent::insert(static_cast<int>(hyp.partial.size()), static_cast<Token>(c));
          }
        }
      }
      if (next(reserved::kStop) > best_lp) {
        best = InsertionEvent::eos();
        best_lp = next(reserved::kStop);
      }
    } else {
      Tape tape(false);
      ModelGraph g(model, tape);
      const Memory m = snapshot.bind(tape);
      const InsertionDistribution dist = g.insertion_distribution(m, hyp.partial);
      if (insert_ok) {
        best = dist.argmax();
        best_lp = dist.log_prob(best);
      } else {
        best = InsertionEvent::eos();
        best_lp = dist.log_prob(best);
      }
    }
    hyp.trajectory.events.push_back(best);
    hyp.logp += best_lp;
    if (best.is_eos()) {
      hyp.finished = true;
      hyp.finished_round = round;
      return finish({hyp}, {}, norm);
    }
    hyp.partial = apply_insertion(hyp.partial, best);
    ++hyp.steps;
    if (baseline) feed(best.token);
  }
  return finish({}, {hyp}, norm);
}

std::vector<DecodeResult> decode_all(const Model& model, const std::vector<TokenSeq>& sources,
                                     const DecodeOptions& options, int workers) {
  std::vector<DecodeResult> results(sources.size());
  const auto n = static_cast<std::size_t>(std::max(workers, 1));
  if (n == 1 || sources.size() < 2) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      results[i] = beam_decode(model, sources[i], options);
    }
    return results;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < n; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < sources.size(); i += n) {
          results[i] = beam_decode(model, sources[i], options);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

std::size_t count_duplicate_outputs(const std::vector<DecodeResult>& results) {
  std::size_t count = 0;
  for (const auto& r : results) {
    std::set<TokenSeq> seen;
    for (const auto& h : r.finished) {
      if (!seen.insert(h.partial).second) {
        ++count;
        break;
      }
    }
  }
  return count;
}

std::string format_decode_line(const DecodeResult& r, const Vocab& vocab) {
  char score[64];
  std::snprintf(score, sizeof score, "%.6f", r.score);
  return vocab.join(r.output) + '\t' + format_trajectory(r.trajectory, &vocab) + '\t' + score;
}

SlopeFit loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("slope fit needs at least two paired points");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0 || y[i] <= 0) throw std::invalid_argument("log-log fit needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(y[i]) - my);
  }
  if (sxx == 0) throw std::invalid_argument("slope fit needs distinct x values");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  if (x.size() > 2) {
    double sse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = std::log(y[i]) - (my + fit.slope * (std::log(x[i]) - mx));
      sse += e * e;
    }
    fit.std_error = std::sqrt(sse / (n - 2) / sxx);
  }
  return fit;
}

BenchReport bench_decode(const Model& insertion, const Model& baseline,
                         const std::vector<Example>& data, int beam, int repeats) {
  using Clock = std::chrono::steady_clock;
  std::map<int, std::pair<double, int>> ins, base;
  DecodeOptions opt;
  opt.beam = beam;
  auto time_ms = [&](const Model& m, const TokenSeq& src) {
    const auto t0 = Clock::now();
    for (int r = 0; r < repeats; ++r) beam_decode(m, src, opt);
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / repeats;
  };
  for (const Example& ex : data) {
    const int len = static_cast<int>(ex.tgt.size());
    opt.exact_length = len;
    auto& a = ins[len];
    a.first += time_ms(insertion, ex.src);
    a.second += 1;
    auto& b = base[len];
    b.first += time_ms(baseline, ex.src);
    b.second += 1;
  }
  BenchReport report;
  std::vector<double> lens, ti, tb;
  double slowdown = 0;
  for (const auto& [len, acc] : ins) {
    const auto& bacc = base.at(len);
    const double mi = acc.first / acc.second, mb = bacc.first / bacc.second;
    report.rows.push_back({len, "insertion", mi, acc.second});
    report.rows.push_back({len, "left_to_right", mb, bacc.second});
    if (len > 0) {
      lens.push_back(len);
      ti.push_back(mi);
      tb.push_back(mb);
    }
    slowdown += mi / mb;
  }
  if (!ins.empty()) report.mean_slowdown = slowdown / static_cast<double>(ins.size());
  if (lens.size() >= 2) {
    const SlopeFit fi = loglog_slope(lens, ti), fb = loglog_slope(lens, tb);
    report.insertion_slope = fi.slope;
    report.baseline_slope = fb.slope;
    report.slope_ci = 1.96 * std::sqrt(fi.std_error * fi.std_error + fb.std_error * fb.std_error);
  }
  return report;
}

std::string bench_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "length_bin,model,mean_ms,n\n";
  char buf[64];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%.4f", r.mean_ms);
    os << r.length_bin << ',' << r.model << ',' << buf << ',' << r.n << '\n';
  }
  return os.str();
}

}  // namespace intrus

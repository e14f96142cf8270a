#include "intrus/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>

namespace intrus {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t hash_seq(const TokenSeq& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Token t : s) {
    h ^= static_cast<std::uint64_t>(t) + 0x9e37;
    h *= 1099511628211ULL;
  }
  return h;
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

TokenSeq random_content(std::size_t len, int content, Rng& rng) {
  TokenSeq s(len);
  for (auto& t : s) t = reserved::kCount + static_cast<Token>(rng.uniform_int(content));
  return s;
}

// Scalar readout sum(out .* R) with a fixed random R, so that no gradient
// vanishes by symmetry.
Var readout(Tape& t, const Var& out, std::uint64_t seed) {
  Rng rng = Rng::derive({seed, 0x52});
  return ag::sum(ag::mul(out, t.constant(random_matrix(out.rows(), out.cols(), rng))));
}

std::string fmt(const char* pattern, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

ModelConfig tiny_config(int vocab_size, int max_len) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = 8;
  c.num_heads = 2;
  c.num_encoder_layers = 2;
  c.num_decoder_layers = 2;
  c.ffn_dim = 16;
  c.max_len = max_len;
  return c;
}

}  // namespace

StepDistribution StubModel::operator()(const TokenSeq&, const TokenSeq& partial) const {
  Rng rng = Rng::derive({seed_, hash_seq(partial), partial.size()});
  StepDistribution d;
  const auto slots = static_cast<Eigen::Index>(partial.size()) + 1;
  d.insert = Matrix::Zero(slots, vocab_size_);
  double total = 0.0;
  for (Eigen::Index r = 0; r < slots; ++r) {
    for (Eigen::Index c = reserved::kCount; c < vocab_size_; ++c) {
      total += d.insert(r, c) = std::exp(sharpness_ * rng.normal());
    }
  }
  d.eos = std::exp(sharpness_ * rng.normal());
  total += d.eos;
  d.insert /= total;
  d.eos /= total;
  return d;
}

StepProbFn StubModel::fn() const {
  return
      [self = *this](const TokenSeq& src, const TokenSeq& partial) { return self(src, partial); };
}

StepProbFn concentrated_model(const TokenSeq& y, int vocab_size) {
  return [y, vocab_size](const TokenSeq&, const TokenSeq& partial) {
    StepDistribution d;
    const auto slots = static_cast<Eigen::Index>(partial.size()) + 1;
    d.insert = Matrix::Zero(slots, vocab_size);
    const bool prefix =
        partial.size() <= y.size() && std::equal(partial.begin(), partial.end(), y.begin());
    if (prefix && partial.size() == y.size()) {
      d.eos = 1.0;
    } else if (prefix) {
      d.insert(slots - 1, y[partial.size()]) = 1.0;
    } else {
      d.insert.rightCols(vocab_size - reserved::kCount).setConstant(1.0);
      d.eos = 1.0;
      const double total = d.insert.sum() + d.eos;
      d.insert /= total;
      d.eos /= total;
    }
    return d;
  };
}

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).norm() / scale;
}

double gradient_check(const GraphFn& f, const std::vector<Matrix>& inputs, double h) {
  Tape tape(true);
  std::vector<Var> vars;
  for (const Matrix& m : inputs) vars.push_back(tape.variable(m));
  const Var out = f(tape, vars);
  tape.backward(out);

  auto eval = [&](const std::vector<Matrix>& xs) {
    Tape t(false);
    std::vector<Var> vs;
    for (const Matrix& m : xs) vs.push_back(t.variable(m));
    return f(t, vs).scalar();
  };
  double worst = 0.0;
  std::vector<Matrix> xs = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix numeric(inputs[i].rows(), inputs[i].cols());
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      const double orig = xs[i].data()[j];
      xs[i].data()[j] = orig + h;
      const double up = eval(xs);
      xs[i].data()[j] = orig - h;
      const double down = eval(xs);
      xs[i].data()[j] = orig;
      numeric.data()[j] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(tape.grad(vars[i]), numeric));
  }
  return worst;
}

std::vector<OpGradient> check_op_gradients(std::uint64_t seed) {
  Rng rng = Rng::derive({seed, 0x4f50});
  auto rnd = [&](Eigen::Index r, Eigen::Index c) { return random_matrix(r, c, rng); };
  auto away_from_zero = [&](Eigen::Index r, Eigen::Index c) {
    Matrix m = rnd(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double& v = m.data()[i];
      v = (v >= 0 ? 1.0 : -1.0) * (0.1 + std::abs(v));
    }
    return m;
  };
  Matrix mask = Matrix::Ones(3, 5);
  mask(0, 1) = mask(1, 0) = mask(1, 4) = mask(2, 2) = 0.0;
  Matrix pick = Matrix::Zero(3, 5);
  pick(0, 2) = pick(1, 1) = pick(1, 3) = pick(2, 0) = 1.0;
  const std::vector<int> ids{2, 0, 3, 2};

  std::vector<OpGradient> out;
  auto check = [&](const std::string& name, GraphFn f, std::vector<Matrix> inputs) {
    out.push_back({name, gradient_check(f, inputs)});
  };
  auto R = [seed](Tape& t, const Var& v) { return readout(t, v, seed); };

  check("matmul", [&](Tape& t, const auto& v) { return R(t, ag::matmul(v[0], v[1])); },
        {rnd(3, 4), rnd(4, 2)});
  check("transpose", [&](Tape& t, const auto& v) { return R(t, ag::transpose(v[0])); },
        {rnd(3, 4)});
  check("add", [&](Tape& t, const auto& v) { return R(t, v[0] + v[1]); }, {rnd(3, 4), rnd(3, 4)});
  check("sub", [&](Tape& t, const auto& v) { return R(t, v[0] - v[1]); }, {rnd(3, 4), rnd(3, 4)});
  check("mul", [&](Tape& t, const auto& v) { return R(t, ag::mul(v[0], v[1])); },
        {rnd(3, 4), rnd(3, 4)});
  check("scale", [&](Tape& t, const auto& v) { return R(t, ag::scale(v[0], -1.7)); }, {rnd(3, 4)});
  check("add_row", [&](Tape& t, const auto& v) { return R(t, ag::add_row(v[0], v[1])); },
        {rnd(3, 4), rnd(1, 4)});
  check("add_col", [&](Tape& t, const auto& v) { return R(t, ag::add_col(v[0], v[1])); },
        {rnd(3, 4), rnd(3, 1)});
  check("relu", [&](Tape& t, const auto& v) { return R(t, ag::relu(v[0])); },
        {away_from_zero(3, 4)});
  check("layer_norm",
        [&](Tape& t, const auto& v) { return R(t, ag::layer_norm(v[0], v[1], v[2])); },
        {rnd(3, 5), rnd(1, 5), rnd(1, 5)});
  check("softmax_rows", [&](Tape& t, const auto& v) { return R(t, ag::softmax(v[0], 1)); },
        {rnd(3, 4)});
  check("softmax_cols", [&](Tape& t, const auto& v) { return R(t, ag::softmax(v[0], 0)); },
        {rnd(3, 4)});
  check("log_softmax_rows", [&](Tape& t, const auto& v) { return R(t, ag::log_softmax(v[0], 1)); },
        {rnd(3, 4)});
  check("log_softmax_cols", [&](Tape& t, const auto& v) { return R(t, ag::log_softmax(v[0], 0)); },
        {rnd(3, 4)});
  check("masked_log_softmax",
        [&](Tape& t, const auto& v) { return R(t, ag::masked_log_softmax(v[0], mask)); },
        {rnd(3, 5)});
  check(
      "embedding",
      [&](Tape& t, const auto& v) { return R(t, ag::embedding(v[0], std::span<const int>(ids))); },
      {rnd(4, 3)});
  check("cross_entropy",
        [&](Tape&, const auto& v) { return ag::cross_entropy_from_log_probs(v[0], pick); },
        {rnd(3, 5)});
  check("select", [&](Tape&, const auto& v) { return ag::select(v[0], 1, 2); }, {rnd(3, 4)});
  check("sum", [&](Tape& t, const auto& v) { return ag::sum(ag::mul(v[0], v[0])) + R(t, v[0]); },
        {rnd(3, 4)});
  check("add_n",
        [&](Tape& t, const auto& v) {
          std::vector<Var> terms{v[0], v[1], v[0]};
          return R(t, ag::add_n(terms));
        },
        {rnd(2, 3), rnd(2, 3)});
  check("reshape", [&](Tape& t, const auto& v) { return R(t, ag::reshape(v[0], 2, 6)); },
        {rnd(3, 4)});
  check("concat_cols",
        [&](Tape& t, const auto& v) {
          std::vector<Var> parts{v[0], v[1]};
          return R(t, ag::concat_cols(parts));
        },
        {rnd(3, 2), rnd(3, 4)});
  check("concat_rows",
        [&](Tape& t, const auto& v) {
          std::vector<Var> parts{v[0], v[1]};
          return R(t, ag::concat_rows(parts));
        },
        {rnd(2, 3), rnd(1, 3)});
  check("slice_cols", [&](Tape& t, const auto& v) { return R(t, ag::slice_cols(v[0], 1, 2)); },
        {rnd(3, 4)});
  check("slice_rows", [&](Tape& t, const auto& v) { return R(t, ag::slice_rows(v[0], 1, 2)); },
        {rnd(3, 4)});
  check("dropout",
        [&](Tape& t, const auto& v) {
          Rng drop(seed);
          return R(t, ag::dropout(v[0], 0.3, drop));
        },
        {rnd(3, 4)});
  return out;
}

double check_model_gradient(ModelKind kind, std::uint64_t seed, double h) {
  const int vocab = 8;
  Model model(kind, tiny_config(vocab, 8), seed);
  Rng rng = Rng::derive({seed, 0x4d47});
  const TokenSeq src = random_content(3, vocab - reserved::kCount, rng);
  const TokenSeq y = random_content(3, vocab - reserved::kCount, rng);
  const Trajectory traj = sample_trajectory_uniform(y, rng);
  auto objective = [&]() {
    return kind == ModelKind::Insertion ? trajectory_log_prob(model, src, traj)
                                        : baseline_log_prob(model, src, y);
  };

  Gradients grads = model.params().zero_gradients();
  {
    Tape tape(true);
    ModelGraph g(model, tape);
    const Memory m = g.prepare_memory(src);
    const Var out =
        kind == ModelKind::Insertion ? g.trajectory_log_prob(m, traj) : g.baseline_log_prob(m, y);
    tape.backward(out);
    tape.collect_gradients(grads);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Matrix& value = model.params()[i].value;
    Matrix numeric(value.rows(), value.cols());
    for (Eigen::Index j = 0; j < value.size(); ++j) {
      const double orig = value.data()[j];
      value.data()[j] = orig + h;
      const double up = objective();
      value.data()[j] = orig - h;
      const double down = objective();
      value.data()[j] = orig;
      numeric.data()[j] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(grads[i], numeric));
  }
  return worst;
}

EnumerationReport check_marginal_vs_enumeration(int instances, std::uint64_t seed,
                                                std::size_t max_len) {
  const auto t0 = Clock::now();
  EnumerationReport rep;
  const int content = 3;
  for (int i = 0; i < instances; ++i) {
    Rng rng = Rng::derive({seed, 0x454e, static_cast<std::uint64_t>(i)});
    const std::size_t len = 1 + rng.uniform_int(max_len);
    const TokenSeq y = random_content(len, content, rng);
    const StubModel stub(rng.next_u64(), reserved::kCount + content);
    const StepProbFn fn = stub.fn();
    const auto trajs = enumerate_trajectories(y);
    double factorial = 1;
    for (std::size_t k = 2; k <= len; ++k) factorial *= static_cast<double>(k);
    if (static_cast<double>(trajs.size()) != factorial) ++rep.count_mismatches;
    double sum = 0.0;
    for (const auto& t : trajs) sum += trajectory_probability(t, {}, fn);
    const double dp = exact_marginal(y, {}, fn);
    rep.max_rel_error = std::max(rep.max_rel_error, std::abs(dp - sum) / sum);
    ++rep.instances;
  }
  rep.seconds = seconds_since(t0);
  return rep;
}

BoundsReport check_bound_ordering(int models, std::uint64_t seed, std::size_t max_len) {
  BoundsReport rep;
  rep.min_gap_max_minus_expected = std::numeric_limits<double>::infinity();
  rep.min_gap_marginal_minus_max = std::numeric_limits<double>::infinity();
  const int content = 3;
  for (int i = 0; i < models; ++i) {
    Rng rng = Rng::derive({seed, 0x424e, static_cast<std::uint64_t>(i)});
    const TokenSeq y = random_content(1 + rng.uniform_int(max_len), content, rng);
    const StubModel stub(rng.next_u64(), reserved::kCount + content, 2.0);
    const TrajectoryBounds b = exact_bounds(y, {}, stub.fn());
    const double g1 = b.max_traj_logp - b.expected_logp;
    const double g2 = b.marginal_logp - b.max_traj_logp;
    // Rounding slack only: the three quantities are computed from the same products.
    const double tol = 1e-12 * std::max(1.0, std::abs(b.marginal_logp));
    if (g1 < -tol || g2 < -tol) ++rep.violations;
    rep.min_gap_max_minus_expected = std::min(rep.min_gap_max_minus_expected, g1);
    rep.min_gap_marginal_minus_max = std::min(rep.min_gap_marginal_minus_max, g2);
    ++rep.models;
  }
  const TokenSeq y{4, 5, 4, 6};
  const TrajectoryBounds t = exact_bounds(y, {}, concentrated_model(y, reserved::kCount + content));
  rep.tight_spread = std::max({t.marginal_logp, t.max_traj_logp, t.expected_logp}) -
                     std::min({t.marginal_logp, t.max_traj_logp, t.expected_logp});
  return rep;
}

double check_normalization(int draws, int max_partial, std::uint64_t seed) {
  const int vocab = 10;
  double worst = 0.0;
  for (int d = 0; d < draws; ++d) {
    Model model(ModelKind::Insertion, tiny_config(vocab, max_partial + 2),
                Rng::derive({seed, 0x4e4f, static_cast<std::uint64_t>(d)}).next_u64());
    Rng rng = Rng::derive({seed, 0x4e50, static_cast<std::uint64_t>(d)});
    const TokenSeq src = random_content(1 + rng.uniform_int(5), vocab - reserved::kCount, rng);
    const MemorySnapshot mem = encode_source(model, src);
    for (int len = 0; len <= max_partial; ++len) {
      const TokenSeq partial =
          random_content(static_cast<std::size_t>(len), vocab - reserved::kCount, rng);
      Tape tape(false);
      ModelGraph g(model, tape);
      const InsertionDistribution dist = g.insertion_distribution(mem.bind(tape), partial);
      worst = std::max(worst, std::abs(dist.probabilities().total() - 1.0));
    }
  }
  return worst;
}

ExhaustiveResult exhaustive_argmax(const Model& model, const TokenSeq& src, LengthNorm norm) {
  const MemorySnapshot mem = encode_source(model, src);
  const std::size_t max_out = static_cast<std::size_t>(model.config().max_len - 1);
  std::map<TokenSeq, std::pair<Matrix, Matrix>> cache;
  auto dist_at = [&](const TokenSeq& partial) -> const std::pair<Matrix, Matrix>& {
    auto it = cache.find(partial);
    if (it == cache.end()) {
      Tape tape(false);
      ModelGraph g(model, tape);
      const InsertionDistribution d = g.insertion_distribution(mem.bind(tape), partial);
      it = cache.emplace(partial, std::make_pair(d.log_probs.value(), d.mask)).first;
    }
    return it->second;
  };

  ExhaustiveResult best;
  best.score = -std::numeric_limits<double>::infinity();
  bool found = false;
  Trajectory prefix;
  std::function<void(const TokenSeq&, double)> walk = [&](const TokenSeq& partial, double logp) {
    const auto& [lp, mask] = dist_at(partial);
    const auto last = lp.rows() - 1;
    {
      prefix.events.push_back(InsertionEvent::eos());
      const double total = logp + lp(last, reserved::kStop);
      const double score = normalized_score(total, static_cast<int>(partial.size()), norm);
      ++best.trajectories;
      // Same preference as beam search: score, then fewer steps, then trajectory order.
      const bool better =
          !found || score > best.score ||
          (score == best.score &&
           (prefix.insertions() < best.trajectory.insertions() ||
            (prefix.insertions() == best.trajectory.insertions() && prefix < best.trajectory)));
      if (better) {
        best.score = score;
        best.trajectory = prefix;
        found = true;
      }
      prefix.events.pop_back();
    }
    if (partial.size() >= max_out) return;
    for (Eigen::Index r = 0; r < lp.rows(); ++r) {
      for (Eigen::Index c = 0; c < lp.cols(); ++c) {
        if (mask(r, c) == 0 || c == reserved::kStop) continue;
        const InsertionEvent ev =
            InsertionEvent::insert(static_cast<int>(r), static_cast<Token>(c));
        prefix.events.push_back(ev);
        walk(apply_insertion(partial, ev), logp + lp(r, c));
        prefix.events.pop_back();
      }
    }
  };
  walk({}, 0.0);
  return best;
}

SearchReport check_search(int instances, std::uint64_t seed, LengthNorm norm) {
  const int content = 4;
  SearchReport rep;
  for (int i = 0; i < instances; ++i) {
    Rng rng = Rng::derive({seed, 0x5345, static_cast<std::uint64_t>(i)});
    const Model model(ModelKind::Insertion, tiny_config(reserved::kCount + content, 5),
                      rng.next_u64());
    const TokenSeq src = random_content(1 + rng.uniform_int(4), content, rng);
    const ExhaustiveResult ex = exhaustive_argmax(model, src, norm);
    DecodeOptions opt;
    opt.beam = static_cast<int>(ex.trajectories);
    opt.length_norm = norm;
    const DecodeResult beam = beam_decode(model, src, opt);
    if (beam.trajectory == ex.trajectory) ++rep.beam_matches_exhaustive;
    opt.beam = 1;
    const DecodeResult b1 = beam_decode(model, src, opt);
    const DecodeResult greedy = greedy_decode(model, src, 0, norm);
    if (b1.trajectory == greedy.trajectory && b1.output == greedy.output)
      ++rep.greedy_matches_beam1;
    ++rep.instances;
  }
  return rep;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"gradients",     "enumeration", "bounds",
                                              "normalization", "search",      "oracles"};
  return names;
}

std::vector<CheckResult> run_suite(const std::string& suite, std::uint64_t seed) {
  if (std::find(suite_names().begin(), suite_names().end(), suite) == suite_names().end()) {
    std::string valid;
    for (const auto& n : suite_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown suite '" + suite + "' (valid: " + valid + ")");
  }
  const bool all = suite == "oracles";
  std::vector<CheckResult> out;
  auto timed = [&](const std::string& name, auto body) {
    const auto t0 = Clock::now();
    CheckResult r{name, false, "", 0.0};
    try {
      body(r);
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = seconds_since(t0);
    out.push_back(std::move(r));
  };

  if (all || suite == "gradients") {
    timed("op gradients", [&](CheckResult& r) {
      double worst = 0.0;
      std::string worst_op;
      for (std::uint64_t s = 0; s < 3; ++s) {
        for (const auto& g : check_op_gradients(seed + s)) {
          if (g.error >= worst) {
            worst = g.error;
            worst_op = g.op;
          }
        }
      }
      r.passed = worst < 1e-4;
      r.detail = fmt("max relative error %.3g", worst) + " (" + worst_op + ")";
    });
    timed("model gradients", [&](CheckResult& r) {
      const double a = check_model_gradient(ModelKind::Insertion, seed);
      const double b = check_model_gradient(ModelKind::LeftToRight, seed);
      r.passed = a < 1e-4 && b < 1e-4;
      r.detail = fmt("insertion %.3g", a) + fmt(", left_to_right %.3g", b);
    });
  }
  if (all || suite == "enumeration") {
    timed("marginal vs enumeration", [&](CheckResult& r) {
      const EnumerationReport rep = check_marginal_vs_enumeration(200, seed);
      r.passed = rep.max_rel_error < 1e-12 && rep.count_mismatches == 0 && rep.seconds < 30.0;
      r.detail = fmt("max relative error %.3g", rep.max_rel_error) + ", count mismatches " +
                 std::to_string(rep.count_mismatches);
    });
  }
  if (all || suite == "bounds") {
    timed("bound ordering", [&](CheckResult& r) {
      const BoundsReport rep = check_bound_ordering(100, seed);
      r.passed = rep.violations == 0 && rep.tight_spread < 1e-12;
      r.detail = std::to_string(rep.violations) + " violations" +
                 fmt(", concentrated-model spread %.3g", rep.tight_spread);
    });
  }
  if (all || suite == "normalization") {
    timed("normalization", [&](CheckResult& r) {
      const double dev = check_normalization(50, 10, seed);
      r.passed = dev < 1e-9;
      r.detail = fmt("max |sum - 1| %.3g", dev);
    });
  }
  if (all || suite == "search") {
    timed("beam vs exhaustive", [&](CheckResult& r) {
      const SearchReport rep = check_search(100, seed);
      r.passed =
          rep.beam_matches_exhaustive == rep.instances && rep.greedy_matches_beam1 == rep.instances;
      r.detail = std::to_string(rep.beam_matches_exhaustive) + "/" + std::to_string(rep.instances) +
                 " exhaustive, " + std::to_string(rep.greedy_matches_beam1) + "/" +
                 std::to_string(rep.instances) + " greedy";
    });
  }
  return out;
}

}  // namespace intrus

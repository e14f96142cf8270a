#include "intrus/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "intrus/bleu.hpp"
#include "intrus/inference.hpp"
#include "json.hpp"

namespace intrus {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kExampleStream = 0x4558;

const std::vector<std::pair<TrainMode, std::string>>& mode_table() {
  static const std::vector<std::pair<TrainMode, std::string>> table = {
      {TrainMode::Default, "default"},
      {TrainMode::Argmax, "argmax"},
      {TrainMode::PretrainL2RThenDefault, "pretrain_l2r_then_default"},
      {TrainMode::NoPretrain, "no_pretrain"},
      {TrainMode::OnlyPretrainUniform, "only_pretrain_uniform"},
      {TrainMode::OnlyPretrainL2R, "only_pretrain_l2r"},
      {TrainMode::BaselineL2R, "baseline_l2r"},
  };
  return table;
}

struct ConstrainedHyp {
  TokenSeq partial;
  Trajectory trajectory;
  double logp = 0.0;
};

}  // namespace

std::string to_string(TrainMode mode) {
  for (const auto& [m, name] : mode_table()) {
    if (m == mode) return name;
  }
  return "unknown";
}

const std::vector<std::string>& train_mode_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& entry : mode_table()) out.push_back(entry.second);
    return out;
  }();
  return names;
}

TrainMode parse_train_mode(const std::string& name) {
  for (const auto& [m, n] : mode_table()) {
    if (n == name) return m;
  }
  std::string valid;
  for (const auto& n : train_mode_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown training mode '" + name + "' (valid: " + valid + ")");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
  if (pretrain_steps < 0) fail("pretrain_steps must be >= 0");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (total_steps < 0) fail("total_steps must be >= 0");
  if (base_lr <= 0) fail("base_lr must be positive");
  if (batch_tokens < 1) fail("batch_tokens must be >= 1");
  if (beam_for_argmax < 1) fail("beam_for_argmax must be >= 1");
  if (clip_norm <= 0) fail("clip_norm must be positive");
  if (eval_every < 0 || checkpoint_every < 0) fail("intervals must be >= 0");
  if (val_beam < 1) fail("val_beam must be >= 1");
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::transformer_base() {
  TrainConfig c;
  c.pretrain_steps = 100000;
  c.total_steps = 300000;
  c.base_lr = 1.4e-3;
  c.warmup_steps = 16000;
  c.batch_tokens = 4000;
  c.eval_every = 5000;
  c.checkpoint_every = 10000;
  return c;
}

bool in_pretraining(const TrainConfig& cfg, int step) {
  switch (cfg.mode) {
    case TrainMode::OnlyPretrainUniform:
    case TrainMode::OnlyPretrainL2R:
      return true;
    case TrainMode::NoPretrain:
    case TrainMode::BaselineL2R:
      return false;
    default:
      return step <= cfg.pretrain_steps;
  }
}

TrajectorySource source_for(const TrainConfig& cfg, int step) {
  const bool pre = in_pretraining(cfg, step);
  switch (cfg.mode) {
    case TrainMode::Default:
    case TrainMode::NoPretrain:
      return pre ? TrajectorySource::Uniform : TrajectorySource::Model;
    case TrainMode::Argmax:
      return pre ? TrajectorySource::Uniform : TrajectorySource::Argmax;
    case TrainMode::PretrainL2RThenDefault:
      return pre ? TrajectorySource::LeftToRight : TrajectorySource::Model;
    case TrainMode::OnlyPretrainUniform:
      return TrajectorySource::Uniform;
    case TrainMode::OnlyPretrainL2R:
    case TrainMode::BaselineL2R:
      return TrajectorySource::LeftToRight;
  }
  return TrajectorySource::Model;
}

Trajectory argmax_trajectory(const TokenSeq& y, int beam, const EventScorer& score) {
  if (beam < 1) throw std::invalid_argument("beam must be >= 1");
  std::vector<ConstrainedHyp> active(1);
  struct Cand {
    std::size_t hyp;
    InsertionEvent event;
    double logp;
  };
  // Every trajectory in T*(y) has |y| insertions, so all hypotheses end together.
  for (std::size_t round = 0; round <= y.size(); ++round) {
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const auto events = correct_insertions(y, active[h].partial);
      const auto lps = score(active[h].partial, events);
      for (std::size_t i = 0; i < events.size(); ++i) {
        cands.push_back({h, events[i], active[h].logp + lps[i]});
      }
    }
    const std::size_t keep = std::min(static_cast<std::size_t>(beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.hyp != b.hyp)
                          return active[a.hyp].trajectory < active[b.hyp].trajectory;
                        return a.event < b.event;
                      });
    cands.resize(keep);
    std::vector<ConstrainedHyp> next;
    for (const Cand& c : cands) {
      ConstrainedHyp h = active[c.hyp];
      h.trajectory.events.push_back(c.event);
      h.logp = c.logp;
      if (c.event.is_eos()) return h.trajectory;  // best-first, so the first Eos wins
      h.partial = apply_insertion(h.partial, c.event);
      next.push_back(std::move(h));
    }
    active = std::move(next);
  }
  throw std::logic_error("constrained beam ended without a complete trajectory");
}

Trajectory argmax_trajectory(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model,
                             int beam) {
  return argmax_trajectory(y, beam, [&](const TokenSeq& partial, const auto& events) {
    const StepDistribution d = model(src, partial);
    std::vector<double> out;
    for (const auto& ev : events) out.push_back(std::log(d.prob(ev)));
    return out;
  });
}

Trajectory argmax_trajectory(const Model& model, const MemorySnapshot& memory, const TokenSeq& y,
                             int beam) {
  return argmax_trajectory(y, beam, [&](const TokenSeq& partial, const auto& events) {
    Tape tape(false);
    ModelGraph g(model, tape);
    const InsertionDistribution d = g.insertion_distribution(memory.bind(tape), partial);
    std::vector<double> out;
    for (const auto& ev : events) out.push_back(d.log_prob(ev));
    return out;
  });
}

StepLoss step_loss(ModelGraph& g, const Memory& memory, const TokenSeq& y, TrajectorySource source,
                   Rng& rng, int beam) {
  if (y.empty()) throw std::invalid_argument("step_loss needs a nonempty target");
  StepLoss out;
  std::vector<Var> terms;
  if (source == TrajectorySource::Model) {
    TokenSeq partial;
    while (true) {
      const auto correct = correct_insertions(y, partial);
      const InsertionDistribution dist = g.insertion_distribution(memory, partial);
      ++out.model_selections;
      std::vector<double> mass(correct.size());
      for (std::size_t i = 0; i < correct.size(); ++i)
        mass[i] = std::exp(dist.log_prob(correct[i]));
      const InsertionEvent ev = correct[sample_correct_event(mass, rng, partial)];
      terms.push_back(ag::cross_entropy_from_log_probs(dist.log_probs, dist.event_mask(correct)));
      out.trajectory.events.push_back(ev);
      if (ev.is_eos()) break;
      partial = apply_insertion(partial, ev);
    }
    out.loss = ag::add_n(terms);
    return out;
  }

  switch (source) {
    case TrajectorySource::Uniform:
      out.trajectory = sample_trajectory_uniform(y, rng);
      break;
    case TrajectorySource::LeftToRight:
      out.trajectory = left_to_right_trajectory(y);
      break;
    case TrajectorySource::Argmax:
      out.trajectory = argmax_trajectory(g.model(), MemorySnapshot::of(memory), y, beam);
      out.model_selections = static_cast<int>(y.size()) + 1;
      break;
    case TrajectorySource::Model:
      break;
  }
  TokenSeq partial;
  for (const InsertionEvent& ev : out.trajectory.events) {
    const auto correct = correct_insertions(y, partial);
    const InsertionDistribution dist = g.insertion_distribution(memory, partial);
    terms.push_back(ag::cross_entropy_from_log_probs(dist.log_probs, dist.event_mask(correct)));
    partial = apply_insertion(partial, ev);
  }
  out.loss = ag::add_n(terms);
  return out;
}

double learning_rate(const TrainConfig& cfg, int step) {
  const double s = std::max(step, 1);
  return cfg.base_lr * std::min(1.0 / std::sqrt(s), s * std::pow(cfg.warmup_steps, -1.5));
}

AdamState::AdamState(const ParameterSet& params) {
  for (const Parameter& p : params) {
    m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

void adam_update(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
                 const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_update: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].allFinite()) {
      throw NumericError("non-finite gradient for parameter " + params[i].name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double c2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i].cwiseAbs2();
    params[i].value.array() -=
        lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.adam_eps);
  }
}

double clip_global_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (Matrix& g : grads) g *= max_norm / norm;
  }
  return norm;
}

Validation validate_model(const Model& model, const std::vector<Example>& data, int beam,
                          int max_examples) {
  const std::size_t n = max_examples > 0
                            ? std::min(data.size(), static_cast<std::size_t>(max_examples))
                            : data.size();
  std::vector<TokenSeq> hyps, refs;
  DecodeOptions opt;
  opt.beam = beam;
  for (std::size_t i = 0; i < n; ++i) {
    const DecodeResult r =
        beam == 1 ? greedy_decode(model, data[i].src) : beam_decode(model, data[i].src, opt);
    hyps.push_back(r.output);
    refs.push_back(data[i].tgt);
  }
  Validation v;
  if (n == 0) return v;
  v.accuracy = sequence_accuracy(hyps, refs);
  v.bleu = corpus_bleu(hyps, refs);
  return v;
}

TrainResult train(Model& model, const std::vector<Example>& train_data,
                  const std::vector<Example>& valid_data, const TrainConfig& cfg,
                  const TrainOutputs& out) {
  cfg.validate();
  if (train_data.empty()) throw std::invalid_argument("training set is empty");
  const bool baseline = cfg.mode == TrainMode::BaselineL2R;
  if (baseline != (model.kind() == ModelKind::LeftToRight)) {
    throw std::invalid_argument("mode " + to_string(cfg.mode) + " does not match a " +
                                to_string(model.kind()) + " model");
  }
  if (!out.checkpoint_dir.empty()) std::filesystem::create_directories(out.checkpoint_dir);

  AdamState adam(model.params());
  std::vector<std::size_t> order(train_data.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  TrainResult result;

  auto emit = [&](const nlohmann::ordered_json& j) {
    if (out.metrics) *out.metrics << j.dump() << '\n' << std::flush;
  };
  auto run_validation = [&](int step) {
    const Validation v = validate_model(model, valid_data, cfg.val_beam, cfg.max_val_examples);
    result.val_accuracy = v.accuracy;
    result.val_bleu = v.bleu;
    nlohmann::ordered_json j;
    j["step"] = step;
    j["phase"] = "valid";
    j["val_accuracy"] = v.accuracy;
    j["val_bleu"] = v.bleu;
    emit(j);
    if (out.on_validation) out.on_validation(step, v.accuracy, v.bleu);
    return v;
  };

  for (int step = 1; step <= cfg.total_steps; ++step) {
    const TrajectorySource source = source_for(cfg, step);
    Gradients grads = model.params().zero_gradients();
    double loss_sum = 0.0;
    int examples = 0, tokens = 0;
    while (tokens < cfg.batch_tokens) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = Rng::derive({cfg.seed, kShuffleStream, epoch++});
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t index = order[cursor++];
      const Example& ex = train_data[index];
      const auto step_key = static_cast<std::uint64_t>(step);
      Rng rng = Rng::derive({cfg.seed, kExampleStream, step_key, index});
      Rng dropout_rng = Rng::derive({cfg.seed, kExampleStream, step_key, index, 1});
      Tape tape(true);
      ModelGraph g(model, tape, &dropout_rng);
      const Memory memory = g.prepare_memory(ex.src);
      Var loss;
      if (baseline) {
        loss = ag::scale(g.baseline_log_prob(memory, ex.tgt), -1.0);
      } else {
        StepLoss sl = step_loss(g, memory, ex.tgt, source, rng, cfg.beam_for_argmax);
        loss = sl.loss;
        result.model_selections += static_cast<std::uint64_t>(sl.model_selections);
      }
      tape.backward(loss);
      tape.collect_gradients(grads);
      loss_sum += loss.scalar();
      ++examples;
      tokens += static_cast<int>(ex.tgt.size()) + 1;
    }
    for (Matrix& gm : grads) gm /= examples;
    clip_global_norm(grads, cfg.clip_norm);
    const double lr = learning_rate(cfg, step);
    adam_update(model.params(), grads, adam, lr, cfg);
    result.steps = step;

    nlohmann::ordered_json j;
    j["step"] = step;
    j["phase"] = in_pretraining(cfg, step) ? "pretrain" : "main";
    j["loss"] = loss_sum / examples;
    j["lr"] = lr;
    j["examples"] = examples;
    emit(j);

    if (!out.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        step % cfg.checkpoint_every == 0) {
      save_model(out.checkpoint_dir + "/step-" + std::to_string(step) + ".ckpt", model);
    }
    const bool last = step == cfg.total_steps;
    if (!valid_data.empty() && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || last)) {
      const Validation v = run_validation(step);
      if (cfg.target_val_accuracy > 0 && v.accuracy >= cfg.target_val_accuracy) break;
    }
  }
  if (!out.checkpoint_dir.empty()) save_model(out.checkpoint_dir + "/final.ckpt", model);
  return result;
}

}  // namespace intrus

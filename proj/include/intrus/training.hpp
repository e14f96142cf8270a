#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "intrus/model.hpp"
#include "intrus/tasks.hpp"

namespace intrus {

enum class TrainMode {
  Default,
  Argmax,
  PretrainL2RThenDefault,
  NoPretrain,
  OnlyPretrainUniform,
  OnlyPretrainL2R,
  BaselineL2R,
};

std::string to_string(TrainMode mode);
// Throws std::invalid_argument listing the valid names.
TrainMode parse_train_mode(const std::string& name);
const std::vector<std::string>& train_mode_names();

struct TrainConfig {
  TrainMode mode = TrainMode::Default;
  int pretrain_steps = 2000;
  int total_steps = 20000;
  double base_lr = 0.05;
  int warmup_steps = 500;
  int batch_tokens = 64;
  int beam_for_argmax = 4;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int eval_every = 500;
  int val_beam = 1;
  int max_val_examples = 200;
  int checkpoint_every = 0;  // 0 keeps only the final checkpoint
  // Stop once validation sequence accuracy reaches this; <= 0 disables.
  double target_val_accuracy = 0.0;

  void validate() const;
  static TrainConfig desk();
  static TrainConfig transformer_base();
};

// Where a step's trajectory comes from.
enum class TrajectorySource { Uniform, LeftToRight, Model, Argmax };

// Trajectory source of `mode` at a 1-based step; BaselineL2R has none.
TrajectorySource source_for(const TrainConfig& cfg, int step);
bool in_pretraining(const TrainConfig& cfg, int step);

struct StepLoss {
  Var loss;
  Trajectory trajectory;
  int model_selections = 0;  // distributions consulted to choose the trajectory
};

// -sum_t log sum_{ev in correct(y, partial_t)} p(ev | partial_t) along one
// trajectory, Eos step included. `memory` must live on g's tape.
StepLoss step_loss(ModelGraph& g, const Memory& memory, const TokenSeq& y, TrajectorySource source,
                   Rng& rng, int beam = 4);

// Log-probabilities of the given events at one partial output.
using EventScorer =
    std::function<std::vector<double>(const TokenSeq& partial, const std::vector<InsertionEvent>&)>;

// Beam search restricted to correct insertions, scored by cumulative log-prob.
Trajectory argmax_trajectory(const TokenSeq& y, int beam, const EventScorer& score);
Trajectory argmax_trajectory(const TokenSeq& y, const TokenSeq& src, const StepProbFn& model,
                             int beam);
Trajectory argmax_trajectory(const Model& model, const MemorySnapshot& memory, const TokenSeq& y,
                             int beam);

double learning_rate(const TrainConfig& cfg, int step);

struct AdamState {
  int step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  explicit AdamState(const ParameterSet& params);
};

// One Adam step with learning rate `lr`. Throws NumericError naming the first
// parameter with a non-finite gradient.
void adam_update(ParameterSet& params, const Gradients& grads, AdamState& state, double lr,
                 const TrainConfig& cfg);

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before scaling.
double clip_global_norm(Gradients& grads, double max_norm);

struct TrainOutputs {
  std::ostream* metrics = nullptr;  // JSON lines
  std::string checkpoint_dir;       // empty: no checkpoints
  // Invoked after every validation with (step, accuracy, bleu).
  std::function<void(int, double, double)> on_validation;
};

struct TrainResult {
  int steps = 0;
  double val_accuracy = 0.0;
  double val_bleu = 0.0;
  std::uint64_t model_selections = 0;
};

struct Validation {
  double accuracy = 0.0;
  double bleu = 0.0;
};
Validation validate_model(const Model& model, const std::vector<Example>& data, int beam,
                          int max_examples);

TrainResult train(Model& model, const std::vector<Example>& train_data,
                  const std::vector<Example>& valid_data, const TrainConfig& cfg,
                  const TrainOutputs& out = {});

}  // namespace intrus

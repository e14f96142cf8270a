#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "intrus/autograd.hpp"
#include "intrus/trajectory.hpp"
#include "intrus/vocab.hpp"

namespace intrus {

struct ModelConfig {
  int vocab_size = 0;
  int model_dim = 64;
  int num_heads = 2;
  int num_encoder_layers = 2;
  int num_decoder_layers = 2;
  int ffn_dim = 128;
  int max_len = 32;
  double dropout = 0.0;

  void validate() const;
  std::map<std::string, std::string> to_meta() const;
  static ModelConfig from_meta(const std::map<std::string, std::string>& meta);

  static ModelConfig desk(int vocab_size);
  static ModelConfig transformer_base(int vocab_size);
};

enum class ModelKind { Insertion, LeftToRight };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct LengthError : std::length_error {
  using std::length_error::length_error;
};

// Parameter layout of one model. Both kinds share the encoder layout; the
// insertion decoder adds the position vector w_loc and the token matrix
// W_tok, the baseline only an output projection.
class Model {
 public:
  Model(ModelKind kind, const ModelConfig& config, std::uint64_t seed);

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  struct Attention {
    std::size_t wq, wk, wv, wo;
  };
  struct FeedForward {
    std::size_t w1, b1, w2, b2;
  };
  struct Norm {
    std::size_t gain, bias;
  };
  struct EncoderLayer {
    Norm norm_attn;
    Attention self_attn;
    Norm norm_ffn;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Norm norm_self;
    Attention self_attn;
    Norm norm_cross;
    Attention cross_attn;
    Norm norm_ffn;
    FeedForward ffn;
  };

  std::size_t enc_embed = 0, dec_embed = 0;
  std::vector<EncoderLayer> encoder;
  Norm enc_final{};
  std::vector<DecoderLayer> decoder;
  Norm dec_final{};
  std::size_t w_loc = 0;  // d x 1, insertion model only
  std::size_t w_tok = 0;  // d x V (insertion) or output projection (baseline)

 private:
  ModelKind kind_;
  ModelConfig config_;
  ParameterSet params_;
};

// Encoder output plus the per-layer cross-attention keys and values, which
// depend only on the source and are reused for every decoder step.
struct Memory {
  Var states;
  std::vector<Var> keys;
  std::vector<Var> values;
};

// Tape-free copy of a Memory. Decoding loops rebuild a small tape per step
// and bind the source side to it as constants.
struct MemorySnapshot {
  Matrix states;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;

  static MemorySnapshot of(const Memory& memory);
  Memory bind(Tape& tape) const;
};

MemorySnapshot encode_source(const Model& model, const TokenSeq& src);

// Joint log-probabilities over (slot, token) for one partial output. Row
// `slots() - 1` is the trailing end slot; the terminating event is the
// <stop> token at that slot. Entries with mask == 0 are impossible events.
struct InsertionDistribution {
  Var log_probs;
  Matrix mask;

  Eigen::Index slots() const { return mask.rows(); }
  std::pair<Eigen::Index, Eigen::Index> cell(const InsertionEvent& ev) const;
  double log_prob(const InsertionEvent& ev) const;
  StepDistribution probabilities() const;
  // 0/1 grid marking the given events.
  Matrix event_mask(std::span<const InsertionEvent> events) const;
  // Event with the highest log-probability; ties go to the smallest event.
  InsertionEvent argmax() const;
};

// Model forward passes recorded on one tape. Parameters are read in place;
// gradients come back through Tape::collect_gradients().
class ModelGraph {
 public:
  // With `dropout_rng` null the graph runs in eval mode.
  ModelGraph(const Model& model, Tape& tape, Rng* dropout_rng = nullptr);

  Tape& tape() { return tape_; }
  const Model& model() const { return model_; }

  Var encode(const TokenSeq& src);
  Memory prepare_memory(const TokenSeq& src);

  // Decoder input rows: token embeddings plus absolute positional encodings
  // of the partial with the trailing end-slot sentinel.
  Var insertion_inputs(const TokenSeq& partial);
  InsertionDistribution insertion_distribution(const Memory& memory, const TokenSeq& partial);
  Var trajectory_log_prob(const Memory& memory, const Trajectory& traj);

  // Teacher-forced log-probabilities of the causal baseline: row i is the
  // distribution after reading <bos> y_0 .. y_{i-1}.
  Var baseline_log_probs(const Memory& memory, const TokenSeq& y);
  Var baseline_log_prob(const Memory& memory, const TokenSeq& y);

  // Incremental baseline decoding with cached self-attention keys/values.
  struct BaselineState {
    std::vector<Matrix> keys;  // per layer, (steps x d)
    std::vector<Matrix> values;
    int steps = 0;
  };
  BaselineState baseline_start() const;
  // Feeds one token and returns the next-token log-probabilities (1 x V).
  RowVector baseline_step(const Memory& memory, BaselineState& state, Token token);

 private:
  Var p(std::size_t index);
  Var norm(const Var& x, const Model::Norm& n);
  Var attention(const Var& query_in, const Var& keys, const Var& values, const Model::Attention& a,
                const Matrix* additive_mask);
  Var feed_forward(const Var& x, const Model::FeedForward& f);
  Var maybe_dropout(const Var& x);
  Var embed(std::size_t table, const TokenSeq& ids, Eigen::Index first_position);
  Matrix token_mask(Eigen::Index rows, bool stop_in_last_row_only) const;

  const Model& model_;
  Tape& tape_;
  Rng* dropout_rng_;
  std::vector<std::optional<Var>> bound_;
};

// Convenience wrappers evaluating on a fresh grad-free tape.
InsertionDistribution evaluate_insertion(const Model& model, Tape& tape, const TokenSeq& src,
                                         const TokenSeq& partial);
double trajectory_log_prob(const Model& model, const TokenSeq& src, const Trajectory& traj);
double baseline_log_prob(const Model& model, const TokenSeq& src, const TokenSeq& y);

// The insertion model viewed as a StepProbFn for the exact oracles.
StepProbFn as_step_fn(const Model& model);

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace intrus

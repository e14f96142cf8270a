#include "intrus/model.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "intrus/checkpoint.hpp"

namespace intrus {
namespace {

constexpr double kMaskedScore = -1e9;

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

int parse_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw std::runtime_error("model manifest lacks '" + key + "'");
  return std::stoi(it->second);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (vocab_size <= reserved::kCount) fail("vocab_size must exceed the reserved tokens");
  if (model_dim < 1 || num_heads < 1) fail("model_dim and num_heads must be positive");
  if (model_dim % num_heads != 0) fail("model_dim must be divisible by num_heads");
  if (num_encoder_layers < 0 || num_decoder_layers < 0 || ffn_dim < 1) fail("bad layer sizes");
  if (max_len < 2) fail("max_len must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_meta() const {
  return {{"vocab_size", std::to_string(vocab_size)},
          {"model_dim", std::to_string(model_dim)},
          {"num_heads", std::to_string(num_heads)},
          {"num_encoder_layers", std::to_string(num_encoder_layers)},
          {"num_decoder_layers", std::to_string(num_decoder_layers)},
          {"ffn_dim", std::to_string(ffn_dim)},
          {"max_len", std::to_string(max_len)},
          {"dropout", format_double(dropout)}};
}

ModelConfig ModelConfig::from_meta(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  c.vocab_size = parse_int(meta, "vocab_size");
  c.model_dim = parse_int(meta, "model_dim");
  c.num_heads = parse_int(meta, "num_heads");
  c.num_encoder_layers = parse_int(meta, "num_encoder_layers");
  c.num_decoder_layers = parse_int(meta, "num_decoder_layers");
  c.ffn_dim = parse_int(meta, "ffn_dim");
  c.max_len = parse_int(meta, "max_len");
  auto it = meta.find("dropout");
  c.dropout = it == meta.end() ? 0.0 : std::stod(it->second);
  c.validate();
  return c;
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::transformer_base(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = 512;
  c.num_heads = 8;
  c.num_encoder_layers = 6;
  c.num_decoder_layers = 6;
  c.ffn_dim = 2048;
  c.max_len = 256;
  c.dropout = 0.1;
  return c;
}

std::string to_string(ModelKind kind) {
  return kind == ModelKind::Insertion ? "insertion" : "left_to_right";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "insertion") return ModelKind::Insertion;
  if (name == "left_to_right") return ModelKind::LeftToRight;
  throw std::invalid_argument("unknown model kind: " + name);
}

Model::Model(ModelKind kind, const ModelConfig& config, std::uint64_t seed)
    : kind_(kind), config_(config) {
  config_.validate();
  Rng rng(seed);
  const Eigen::Index d = config_.model_dim, f = config_.ffn_dim, v = config_.vocab_size;
  const double s_dd = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_df = std::sqrt(2.0 / static_cast<double>(d + f));

  auto norm = [&](const std::string& name) {
    return Norm{params_.add(name + ".gain", Matrix::Ones(1, d)),
                params_.add(name + ".bias", Matrix::Zero(1, d))};
  };
  auto attn = [&](const std::string& name) {
    Attention a;
    a.wq = params_.add(name + ".wq", random_normal(d, d, s_dd, rng));
    a.wk = params_.add(name + ".wk", random_normal(d, d, s_dd, rng));
    a.wv = params_.add(name + ".wv", random_normal(d, d, s_dd, rng));
    a.wo = params_.add(name + ".wo", random_normal(d, d, s_dd, rng));
    return a;
  };
  auto ffn = [&](const std::string& name) {
    FeedForward fw;
    fw.w1 = params_.add(name + ".w1", random_normal(d, f, s_df, rng));
    fw.b1 = params_.add(name + ".b1", Matrix::Zero(1, f));
    fw.w2 = params_.add(name + ".w2", random_normal(f, d, s_df, rng));
    fw.b2 = params_.add(name + ".b2", Matrix::Zero(1, d));
    return fw;
  };

  enc_embed = params_.add("enc.embed", random_normal(v, d, s_dd, rng));
  for (int l = 0; l < config_.num_encoder_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    EncoderLayer layer;
    layer.norm_attn = norm(pre + ".norm_attn");
    layer.self_attn = attn(pre + ".self");
    layer.norm_ffn = norm(pre + ".norm_ffn");
    layer.ffn = ffn(pre + ".ffn");
    encoder.push_back(layer);
  }
  enc_final = norm("enc.final");

  dec_embed = params_.add("dec.embed", random_normal(v, d, s_dd, rng));
  for (int l = 0; l < config_.num_decoder_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.norm_self = norm(pre + ".norm_self");
    layer.self_attn = attn(pre + ".self");
    layer.norm_cross = norm(pre + ".norm_cross");
    layer.cross_attn = attn(pre + ".cross");
    layer.norm_ffn = norm(pre + ".norm_ffn");
    layer.ffn = ffn(pre + ".ffn");
    decoder.push_back(layer);
  }
  dec_final = norm("dec.final");

  if (kind_ == ModelKind::Insertion) {
    w_loc = params_.add("head.w_loc", random_normal(d, 1, s_dd, rng));
    w_tok = params_.add("head.w_tok", random_normal(d, v, s_dd, rng));
  } else {
    w_tok = params_.add("head.out", random_normal(d, v, s_dd, rng));
  }
}

std::pair<Eigen::Index, Eigen::Index> InsertionDistribution::cell(const InsertionEvent& ev) const {
  if (ev.is_eos()) return {slots() - 1, reserved::kStop};
  return {ev.pos, ev.token};
}

double InsertionDistribution::log_prob(const InsertionEvent& ev) const {
  const auto [r, c] = cell(ev);
  if (r < 0 || r >= mask.rows() || c < 0 || c >= mask.cols() || mask(r, c) == 0) {
    return -std::numeric_limits<double>::infinity();
  }
  if (!ev.is_eos() && c == reserved::kStop) return -std::numeric_limits<double>::infinity();
  return log_probs.value()(r, c);
}

StepDistribution InsertionDistribution::probabilities() const {
  StepDistribution d;
  const Matrix& lp = log_probs.value();
  d.insert = (lp.array().exp() * mask.array()).matrix();
  d.insert.col(reserved::kStop).setZero();
  d.eos = std::exp(lp(slots() - 1, reserved::kStop));
  return d;
}

Matrix InsertionDistribution::event_mask(std::span<const InsertionEvent> events) const {
  Matrix m = Matrix::Zero(mask.rows(), mask.cols());
  for (const auto& ev : events) {
    const auto [r, c] = cell(ev);
    if (r < 0 || r >= mask.rows() || c < 0 || c >= mask.cols() || mask(r, c) == 0) {
      throw std::out_of_range("event outside the insertion distribution");
    }
    m(r, c) = 1.0;
  }
  return m;
}

InsertionEvent InsertionDistribution::argmax() const {
  const Matrix& lp = log_probs.value();
  InsertionEvent best = InsertionEvent::eos();
  double best_lp = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < lp.rows(); ++r) {
    for (Eigen::Index c = 0; c < lp.cols(); ++c) {
      if (mask(r, c) == 0 || c == reserved::kStop) continue;
      if (lp(r, c) > best_lp) {
        best_lp = lp(r, c);
        best = InsertionEvent::insert(static_cast<int>(r), static_cast<Token>(c));
      }
    }
  }
  if (lp(lp.rows() - 1, reserved::kStop) > best_lp) best = InsertionEvent::eos();
  return best;
}

ModelGraph::ModelGraph(const Model& model, Tape& tape, Rng* dropout_rng)
    : model_(model), tape_(tape), dropout_rng_(dropout_rng), bound_(model.params().size()) {}

Var ModelGraph::p(std::size_t index) {
  auto& slot = bound_[index];
  if (!slot) slot = tape_.param(model_.params()[index], index);
  return *slot;
}

Var ModelGraph::norm(const Var& x, const Model::Norm& n) {
  return ag::layer_norm(x, p(n.gain), p(n.bias));
}

Var ModelGraph::maybe_dropout(const Var& x) {
  if (dropout_rng_ == nullptr || model_.config().dropout <= 0.0) return x;
  return ag::dropout(x, model_.config().dropout, *dropout_rng_);
}

Var ModelGraph::attention(const Var& q, const Var& k, const Var& v, const Model::Attention& a,
                          const Matrix* additive_mask) {
  const int heads = model_.config().num_heads;
  const Eigen::Index dh = model_.config().model_dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::optional<Var> mask;
  if (additive_mask) mask = tape_.constant(*additive_mask);
  auto head = [&](const Var& qh, const Var& kh, const Var& vh) {
    Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt);
    if (mask) scores = ag::add(scores, *mask);
    return ag::matmul(ag::softmax(scores, 1), vh);
  };
  Var merged;
  if (heads == 1) {
    merged = head(q, k, v);
  } else {
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      outs.push_back(head(ag::slice_cols(q, h * dh, dh), ag::slice_cols(k, h * dh, dh),
                          ag::slice_cols(v, h * dh, dh)));
    }
    merged = ag::concat_cols(outs);
  }
  return ag::matmul(merged, p(a.wo));
}

Var ModelGraph::feed_forward(const Var& x, const Model::FeedForward& f) {
  Var h = ag::relu(ag::add_row(ag::matmul(x, p(f.w1)), p(f.b1)));
  return ag::add_row(ag::matmul(h, p(f.w2)), p(f.b2));
}

Var ModelGraph::embed(std::size_t table, const TokenSeq& ids, Eigen::Index first_position) {
  const Eigen::Index d = model_.config().model_dim;
  Var e = ag::scale(ag::embedding(p(table), ids), std::sqrt(static_cast<double>(d)));
  Matrix pe = sinusoidal_positions(first_position + static_cast<Eigen::Index>(ids.size()), d)
                  .bottomRows(static_cast<Eigen::Index>(ids.size()));
  return ag::add(e, tape_.constant(std::move(pe)));
}

Matrix ModelGraph::token_mask(Eigen::Index rows, bool stop_in_last_row_only) const {
  Matrix m = Matrix::Ones(rows, model_.config().vocab_size);
  m.col(reserved::kPad).setZero();
  m.col(reserved::kBos).setZero();
  m.col(reserved::kSlot).setZero();
  if (stop_in_last_row_only) {
    m.col(reserved::kStop).setZero();
    m(rows - 1, reserved::kStop) = 1.0;
  }
  return m;
}

Var ModelGraph::encode(const TokenSeq& src) {
  const auto& cfg = model_.config();
  if (static_cast<int>(src.size()) > cfg.max_len) {
    throw LengthError("source length " + std::to_string(src.size()) + " exceeds max_len " +
                      std::to_string(cfg.max_len));
  }
  const TokenSeq ids = src.empty() ? TokenSeq{reserved::kBos} : src;
  Var x = maybe_dropout(embed(model_.enc_embed, ids, 0));
  for (const auto& layer : model_.encoder) {
    Var h = norm(x, layer.norm_attn);
    Var a = attention(ag::matmul(h, p(layer.self_attn.wq)), ag::matmul(h, p(layer.self_attn.wk)),
                      ag::matmul(h, p(layer.self_attn.wv)), layer.self_attn, nullptr);
    x = ag::add(x, maybe_dropout(a));
    x = ag::add(x, maybe_dropout(feed_forward(norm(x, layer.norm_ffn), layer.ffn)));
  }
  return norm(x, model_.enc_final);
}

Memory ModelGraph::prepare_memory(const TokenSeq& src) {
  Memory m;
  m.states = encode(src);
  for (const auto& layer : model_.decoder) {
    m.keys.push_back(ag::matmul(m.states, p(layer.cross_attn.wk)));
    m.values.push_back(ag::matmul(m.states, p(layer.cross_attn.wv)));
  }
  return m;
}

Var ModelGraph::insertion_inputs(const TokenSeq& partial) {
  const auto& cfg = model_.config();
  if (static_cast<int>(partial.size()) >= cfg.max_len) {
    throw LengthError("partial length " + std::to_string(partial.size()) +
                      " leaves no room for the end slot under max_len " +
                      std::to_string(cfg.max_len));
  }
  TokenSeq ids = partial;
  ids.push_back(reserved::kSlot);
  return embed(model_.dec_embed, ids, 0);
}

InsertionDistribution ModelGraph::insertion_distribution(const Memory& memory,
                                                         const TokenSeq& partial) {
  if (model_.kind() != ModelKind::Insertion) {
    throw std::logic_error("insertion_distribution on a left-to-right model");
  }
  Var x = maybe_dropout(insertion_inputs(partial));
  for (std::size_t l = 0; l < model_.decoder.size(); ++l) {
    const auto& layer = model_.decoder[l];
    Var h = norm(x, layer.norm_self);
    Var a = attention(ag::matmul(h, p(layer.self_attn.wq)), ag::matmul(h, p(layer.self_attn.wk)),
                      ag::matmul(h, p(layer.self_attn.wv)), layer.self_attn, nullptr);
    x = ag::add(x, maybe_dropout(a));
    h = norm(x, layer.norm_cross);
    Var c = attention(ag::matmul(h, p(layer.cross_attn.wq)), memory.keys[l], memory.values[l],
                      layer.cross_attn, nullptr);
    x = ag::add(x, maybe_dropout(c));
    x = ag::add(x, maybe_dropout(feed_forward(norm(x, layer.norm_ffn), layer.ffn)));
  }
  Var states = norm(x, model_.dec_final);
  Var pos_logp = ag::log_softmax(ag::matmul(states, p(model_.w_loc)), 0);
  Matrix mask = token_mask(states.rows(), true);
  Var tok_logp = ag::masked_log_softmax(ag::matmul(states, p(model_.w_tok)), mask);
  return {ag::add_col(tok_logp, pos_logp), std::move(mask)};
}

Var ModelGraph::trajectory_log_prob(const Memory& memory, const Trajectory& traj) {
  if (!traj.terminated()) throw TrajectoryError("trajectory does not end with EOS");
  std::vector<Var> terms;
  TokenSeq partial;
  for (const auto& ev : traj.events) {
    InsertionDistribution dist = insertion_distribution(memory, partial);
    if (!std::isfinite(dist.log_prob(ev))) {
      throw TrajectoryError("trajectory event outside the model's event space");
    }
    const auto [r, c] = dist.cell(ev);
    terms.push_back(ag::select(dist.log_probs, r, c));
    partial = apply_insertion(partial, ev);
  }
  return ag::add_n(terms);
}

Var ModelGraph::baseline_log_probs(const Memory& memory, const TokenSeq& y) {
  if (model_.kind() != ModelKind::LeftToRight) {
    throw std::logic_error("baseline_log_probs on an insertion model");
  }
  const auto& cfg = model_.config();
  if (static_cast<int>(y.size()) + 1 > cfg.max_len) {
    throw LengthError("target length " + std::to_string(y.size()) + " exceeds max_len - 1");
  }
  TokenSeq ids{reserved::kBos};
  ids.insert(ids.end(), y.begin(), y.end());
  const auto n = static_cast<Eigen::Index>(ids.size());
  Matrix causal = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) causal(i, j) = kMaskedScore;

  Var x = maybe_dropout(embed(model_.dec_embed, ids, 0));
  for (std::size_t l = 0; l < model_.decoder.size(); ++l) {
    const auto& layer = model_.decoder[l];
    Var h = norm(x, layer.norm_self);
    Var a = attention(ag::matmul(h, p(layer.self_attn.wq)), ag::matmul(h, p(layer.self_attn.wk)),
                      ag::matmul(h, p(layer.self_attn.wv)), layer.self_attn, &causal);
    x = ag::add(x, maybe_dropout(a));
    h = norm(x, layer.norm_cross);
    Var c = attention(ag::matmul(h, p(layer.cross_attn.wq)), memory.keys[l], memory.values[l],
                      layer.cross_attn, nullptr);
    x = ag::add(x, maybe_dropout(c));
    x = ag::add(x, maybe_dropout(feed_forward(norm(x, layer.norm_ffn), layer.ffn)));
  }
  Var states = norm(x, model_.dec_final);
  return ag::masked_log_softmax(ag::matmul(states, p(model_.w_tok)), token_mask(n, false));
}

Var ModelGraph::baseline_log_prob(const Memory& memory, const TokenSeq& y) {
  Var lp = baseline_log_probs(memory, y);
  std::vector<Var> terms;
  for (std::size_t i = 0; i <= y.size(); ++i) {
    const Token next = i < y.size() ? y[i] : reserved::kStop;
    terms.push_back(ag::select(lp, static_cast<Eigen::Index>(i), next));
  }
  return ag::add_n(terms);
}

ModelGraph::BaselineState ModelGraph::baseline_start() const {
  BaselineState s;
  const auto d = model_.config().model_dim;
  s.keys.assign(model_.decoder.size(), Matrix(0, d));
  s.values.assign(model_.decoder.size(), Matrix(0, d));
  return s;
}

RowVector ModelGraph::baseline_step(const Memory& memory, BaselineState& state, Token token) {
  if (state.steps >= model_.config().max_len) {
    throw LengthError("baseline decoding exceeded max_len");
  }
  Var x = embed(model_.dec_embed, TokenSeq{token}, state.steps);
  for (std::size_t l = 0; l < model_.decoder.size(); ++l) {
    const auto& layer = model_.decoder[l];
    Var h = norm(x, layer.norm_self);
    Var q = ag::matmul(h, p(layer.self_attn.wq));
    Matrix& keys = state.keys[l];
    Matrix& values = state.values[l];
    keys.conservativeResize(keys.rows() + 1, Eigen::NoChange);
    values.conservativeResize(values.rows() + 1, Eigen::NoChange);
    keys.row(keys.rows() - 1) = ag::matmul(h, p(layer.self_attn.wk)).value();
    values.row(values.rows() - 1) = ag::matmul(h, p(layer.self_attn.wv)).value();
    Var a = attention(q, tape_.constant(keys), tape_.constant(values), layer.self_attn, nullptr);
    x = ag::add(x, a);
    h = norm(x, layer.norm_cross);
    Var c = attention(ag::matmul(h, p(layer.cross_attn.wq)), memory.keys[l], memory.values[l],
                      layer.cross_attn, nullptr);
    x = ag::add(x, c);
    x = ag::add(x, feed_forward(norm(x, layer.norm_ffn), layer.ffn));
  }
  ++state.steps;
  Var states = norm(x, model_.dec_final);
  Var lp = ag::masked_log_softmax(ag::matmul(states, p(model_.w_tok)), token_mask(1, false));
  return lp.value().row(0);
}

MemorySnapshot MemorySnapshot::of(const Memory& memory) {
  MemorySnapshot s;
  s.states = memory.states.value();
  for (const Var& k : memory.keys) s.keys.push_back(k.value());
  for (const Var& v : memory.values) s.values.push_back(v.value());
  return s;
}

Memory MemorySnapshot::bind(Tape& tape) const {
  Memory m;
  m.states = tape.constant(states);
  for (const Matrix& k : keys) m.keys.push_back(tape.constant(k));
  for (const Matrix& v : values) m.values.push_back(tape.constant(v));
  return m;
}

MemorySnapshot encode_source(const Model& model, const TokenSeq& src) {
  Tape tape(false);
  ModelGraph g(model, tape);
  return MemorySnapshot::of(g.prepare_memory(src));
}

InsertionDistribution evaluate_insertion(const Model& model, Tape& tape, const TokenSeq& src,
                                         const TokenSeq& partial) {
  ModelGraph g(model, tape);
  Memory m = g.prepare_memory(src);
  return g.insertion_distribution(m, partial);
}

double trajectory_log_prob(const Model& model, const TokenSeq& src, const Trajectory& traj) {
  Tape tape(false);
  ModelGraph g(model, tape);
  Memory m = g.prepare_memory(src);
  return g.trajectory_log_prob(m, traj).scalar();
}

double baseline_log_prob(const Model& model, const TokenSeq& src, const TokenSeq& y) {
  Tape tape(false);
  ModelGraph g(model, tape);
  Memory m = g.prepare_memory(src);
  return g.baseline_log_prob(m, y).scalar();
}

StepProbFn as_step_fn(const Model& model) {
  return [&model](const TokenSeq& src, const TokenSeq& partial) {
    Tape tape(false);
    return evaluate_insertion(model, tape, src, partial).probabilities();
  };
}

void save_model(const std::string& path, const Model& model) {
  auto meta = model.config().to_meta();
  meta["kind"] = to_string(model.kind());
  write_checkpoint(path, model.params(), meta);
}

Model load_model(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  auto it = ckpt.meta.find("kind");
  if (it == ckpt.meta.end()) throw std::runtime_error("checkpoint lacks model kind: " + path);
  Model model(parse_model_kind(it->second), ModelConfig::from_meta(ckpt.meta), 0);
  load_parameters(ckpt, model.params());
  return model;
}

}  // namespace intrus

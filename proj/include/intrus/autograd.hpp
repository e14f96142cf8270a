#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "intrus/rng.hpp"
#include "intrus/tensor.hpp"

namespace intrus {

// A named trainable tensor.
struct Parameter {
  std::string name;
  Matrix value;
};

// Per-parameter adjoints, index-aligned with a ParameterSet.
using Gradients = std::vector<Matrix>;

// Ordered collection of parameters. Order is the checkpoint order and the
// order in which optimizer state is laid out.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }

  // Index of a named parameter; throws std::out_of_range when absent.
  std::size_t index_of(const std::string& name) const;

  Gradients zero_gradients() const;
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic reverse-mode tape, rebuilt for every forward pass. A tape created
// with grad disabled records values only and is used for inference.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf whose gradient is readable through grad() after backward().
  Var variable(Matrix value);
  // Leaf reading a parameter value in place. `index` is its slot in the
  // owning ParameterSet; see collect_gradients().
  Var param(const Parameter& parameter, std::size_t index);

  const Matrix& value(const Var& v) const;
  // Gradient of a leaf or interior node; zero-filled if nothing flowed to it.
  Matrix grad(const Var& v) const;

  void backward(const Var& loss);
  // Adds the adjoints of all parameter leaves into grads[index].
  void collect_gradients(Gradients& grads) const;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  // Appends an op result. `backward` receives the node's adjoint and must
  // push contributions to parents via accumulate().
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Matrix value, std::span<const Var> parents, BackwardFn backward);

  template <typename Expr>
  void accumulate(const Var& target, const Expr& contribution) {
    Node& n = nodes_[target.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = contribution;
    } else {
      n.grad.noalias() += contribution;
    }
  }

  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    std::size_t param_index = kNoParam;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;

    const Matrix& get() const { return external ? *external : value; }
  };

  static constexpr std::size_t kNoParam = static_cast<std::size_t>(-1);

  bool grad_enabled_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// Differentiable ops. All operands must live on the same tape.
namespace ag {

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// x (r x c) plus a 1 x c row repeated over the leading dimension.
Var add_row(const Var& x, const Var& row);
// x (r x c) plus an r x 1 column repeated across columns.
Var add_col(const Var& x, const Var& col);
Var relu(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var softmax(const Var& x, int axis = 1);
Var log_softmax(const Var& x, int axis = 1);
// Row-wise log-softmax over entries with mask != 0; masked entries read 0
// and receive no gradient. Every row needs at least one unmasked entry.
Var masked_log_softmax(const Var& x, const Matrix& mask);
Var embedding(const Var& table, std::span<const int> ids);
// -log sum_{mask != 0} exp(logp): the negative log-probability of a set of events.
Var cross_entropy_from_log_probs(const Var& logp, const Matrix& mask);
Var select(const Var& x, Eigen::Index row, Eigen::Index col);
Var sum(const Var& x);
Var add_n(std::span<const Var> terms);
Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
Var dropout(const Var& x, double rate, Rng& rng);

}  // namespace ag

inline Var operator+(const Var& a, const Var& b) { return ag::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ag::sub(a, b); }

}  // namespace intrus

#include "intrus/autograd.hpp"

#include <stdexcept>

namespace intrus {

std::size_t ParameterSet::add(std::string name, Matrix value) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return params_.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

Gradients ParameterSet::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  return g;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("scalar() on " + shape_string(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  if (!value.allFinite()) throw NumericError("non-finite constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  if (!value.allFinite()) throw NumericError("non-finite variable");
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& parameter, std::size_t index) {
  Node n;
  n.external = &parameter.value;
  n.param_index = index;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::value(const Var& v) const {
  if (v.tape() != this) throw std::logic_error("variable belongs to another tape");
  return nodes_[v.id()].get();
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.get().rows(), n.get().cols());
  return n.grad;
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn backward) {
  if (!value.allFinite()) throw NumericError("non-finite value produced by forward op");
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error("operands live on different tapes");
    if (nodes_[p.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
  if (!grad_enabled_) throw std::logic_error("backward() on a tape with grad disabled");
  if (backward_done_) throw std::logic_error("backward() called twice on the same tape");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(lv));
  }
  backward_done_ = true;
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
}

void Tape::collect_gradients(Gradients& grads) const {
  for (const Node& n : nodes_) {
    if (n.param_index == kNoParam || n.grad.size() == 0) continue;
    if (n.param_index >= grads.size()) throw std::out_of_range("gradient buffer too small");
    Matrix& g = grads[n.param_index];
    if (g.size() == 0) {
      g = n.grad;
    } else {
      g += n.grad;
    }
  }
}

namespace ag {
namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  if (!(a.rows() == b.rows() && a.cols() == b.cols()))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (!(a.cols() == b.rows()))
    throw ShapeError("matmul: inner dimensions " + shape_string(a.value()) + " x " +
                     shape_string(b.value()));
  Tape& t = *a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  return a.tape()->record(a.value().transpose(), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a},
                          [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_row(const Var& x, const Var& row) {
  if (!(row.rows() == 1 && row.cols() == x.cols()))
    throw ShapeError("add_row: " + shape_string(x.value()) + " + " + shape_string(row.value()));
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape()->record(std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var add_col(const Var& x, const Var& col) {
  if (!(col.cols() == 1 && col.rows() == x.rows()))
    throw ShapeError("add_col: " + shape_string(x.value()) + " + " + shape_string(col.value()));
  Matrix out = x.value().colwise() + col.value().col(0);
  return x.tape()->record(std::move(out), {x, col}, [x, col](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (t.requires_grad(col)) t.accumulate(col, g.rowwise().sum());
  });
}

Var relu(const Var& x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, (x.value().array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index n = x.cols();
  if (!(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n))
    throw ShapeError("layer_norm: gain/bias must be 1 x " + std::to_string(n));
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                            const Matrix& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        t.accumulate(x, dx);
      });
}

Var softmax(const Var& x, int axis) {
  if (!(axis == 0 || axis == 1)) throw ShapeError("softmax: axis must be 0 or 1");
  Matrix y = intrus::softmax(x.value(), axis);
  Matrix y_copy = y;
  return x.tape()->record(std::move(y), {x},
                          [x, y = std::move(y_copy), axis](Tape& t, const Matrix& g) {
                            Matrix gy = g.cwiseProduct(y);
                            if (axis == 1) {
                              Eigen::VectorXd s = gy.rowwise().sum();
                              t.accumulate(x, gy - (y.array().colwise() * s.array()).matrix());
                            } else {
                              RowVector s = gy.colwise().sum();
                              t.accumulate(x, gy - (y.array().rowwise() * s.array()).matrix());
                            }
                          });
}

Var log_softmax(const Var& x, int axis) {
  if (!(axis == 0 || axis == 1)) throw ShapeError("log_softmax: axis must be 0 or 1");
  Matrix y = intrus::log_softmax(x.value(), axis);
  Matrix p = y.array().exp().matrix();
  return x.tape()->record(std::move(y), {x}, [x, p = std::move(p), axis](Tape& t, const Matrix& g) {
    if (axis == 1) {
      Eigen::VectorXd s = g.rowwise().sum();
      t.accumulate(x, g - (p.array().colwise() * s.array()).matrix());
    } else {
      RowVector s = g.colwise().sum();
      t.accumulate(x, g - (p.array().rowwise() * s.array()).matrix());
    }
  });
}

Var masked_log_softmax(const Var& x, const Matrix& mask) {
  const Matrix& xv = x.value();
  if (!(mask.rows() == xv.rows() && mask.cols() == xv.cols()))
    throw ShapeError("masked_log_softmax: mask shape");
  Matrix y = Matrix::Zero(xv.rows(), xv.cols());
  Matrix p = Matrix::Zero(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double lse = masked_logsumexp(xv.row(r), mask.row(r));
    if (!std::isfinite(lse))
      throw ShapeError("masked_log_softmax: row " + std::to_string(r) + " fully masked");
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      if (mask(r, c) == 0) continue;
      y(r, c) = xv(r, c) - lse;
      p(r, c) = std::exp(y(r, c));
    }
  }
  return x.tape()->record(std::move(y), {x}, [x, p = std::move(p), mask](Tape& t, const Matrix& g) {
    Matrix gm = g.cwiseProduct(mask);
    Eigen::VectorXd s = gm.rowwise().sum();
    t.accumulate(x, gm - (p.array().colwise() * s.array()).matrix());
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) +
                              " outside vocabulary of size " + std::to_string(tv.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table},
                              [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
                                Matrix dt = Matrix::Zero(table.rows(), table.cols());
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  dt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                                }
                                t.accumulate(table, dt);
                              });
}

Var cross_entropy_from_log_probs(const Var& logp, const Matrix& mask) {
  const Matrix& lv = logp.value();
  if (!(mask.rows() == lv.rows() && mask.cols() == lv.cols()))
    throw ShapeError("cross_entropy: mask shape");
  const double lse = masked_logsumexp(lv, mask);
  if (!std::isfinite(lse)) throw NumericError("cross_entropy: empty or zero-mass selection");
  Matrix out(1, 1);
  out(0, 0) = -lse;
  return logp.tape()->record(std::move(out), {logp}, [logp, mask, lse](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(mask.rows(), mask.cols());
    const Matrix& lv = logp.value();
    for (Eigen::Index r = 0; r < d.rows(); ++r)
      for (Eigen::Index c = 0; c < d.cols(); ++c)
        if (mask(r, c) != 0) d(r, c) = -g(0, 0) * std::exp(lv(r, c) - lse);
    t.accumulate(logp, d);
  });
}

Var select(const Var& x, Eigen::Index row, Eigen::Index col) {
  if (!(row >= 0 && row < x.rows() && col >= 0 && col < x.cols()))
    throw ShapeError("select: index out of range");
  Matrix out(1, 1);
  out(0, 0) = x.value()(row, col);
  return x.tape()->record(std::move(out), {x}, [x, row, col](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d(row, col) = g(0, 0);
    t.accumulate(x, d);
  });
}

Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  Matrix out = terms[0].value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    if (!(terms[i].rows() == out.rows() && terms[i].cols() == out.cols()))
      throw ShapeError("add_n: shape mismatch");
    out += terms[i].value();
  }
  std::vector<Var> parents(terms.begin(), terms.end());
  Tape& tape = *terms[0].tape();
  return tape.record(std::move(out), std::span<const Var>(parents),
                     [parents](Tape& t, const Matrix& g) {
                       for (const Var& p : parents) t.accumulate(p, g);
                     });
}

Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  if (!(rows * cols == x.value().size())) throw ShapeError("reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols()));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const Var& p : parts) {
    if (!(p.rows() == rows)) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), std::span<const Var>(parents),
                                 [parents](Tape& t, const Matrix& g) {
                                   Eigen::Index at = 0;
                                   for (const Var& p : parents) {
                                     t.accumulate(p, g.middleCols(at, p.cols()));
                                     at += p.cols();
                                   }
                                 });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const Var& p : parts) {
    if (!(p.cols() == cols)) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), std::span<const Var>(parents),
                                 [parents](Tape& t, const Matrix& g) {
                                   Eigen::Index at = 0;
                                   for (const Var& p : parents) {
                                     t.accumulate(p, g.middleRows(at, p.rows()));
                                     at += p.rows();
                                   }
                                 });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (!(start >= 0 && count >= 0 && start + count <= x.cols()))
    throw ShapeError("slice_cols: out of range");
  Matrix out = x.value().middleCols(start, count);
  return x.tape()->record(std::move(out), {x}, [x, start, count](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d.middleCols(start, count) = g;
    t.accumulate(x, d);
  });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (!(start >= 0 && count >= 0 && start + count <= x.rows()))
    throw ShapeError("slice_rows: out of range");
  Matrix out = x.value().middleRows(start, count);
  return x.tape()->record(std::move(out), {x}, [x, start, count](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(x.rows(), x.cols());
    d.middleRows(start, count) = g;
    t.accumulate(x, d);
  });
}

Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (!(rate < 1.0)) throw ShapeError("dropout: rate must be < 1");
  Matrix keep(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() < rate ? 0.0 : s;
  Matrix out = x.value().cwiseProduct(keep);
  return x.tape()->record(std::move(out), {x},
                          [x, keep = std::move(keep)](Tape& t, const Matrix& g) {
                            t.accumulate(x, g.cwiseProduct(keep));
                          });
}

}  // namespace ag
}  // namespace intrus

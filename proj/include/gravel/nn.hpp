#pragma once

// Reverse-mode differentiation for the handful of dense blocks the models
// use. A Tape records each primitive's output and a backward closure; calling
// backward() replays the closures in reverse and accumulates into the
// ParamTensor gradients that were touched.

#include "gravel/core.hpp"
#include "gravel/graph.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gravel::nn {

struct ParamTensor {
  std::string name;
  Matrix value;
  Matrix grad;

  ParamTensor() = default;
  ParamTensor(std::string name, Index rows, Index cols)
      : name(std::move(name)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}
  ParamTensor(std::string name, Matrix init)
      : name(std::move(name)), value(std::move(init)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  void zero_grad() { grad.setZero(); }
};

class Tape;

/// Handle to a recorded node. Valid for the lifetime of its tape.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Backward closure: receives the node's upstream gradient, its own forward
  /// value, and the tape (to accumulate into parent gradients via grad_of).
  using Backward = std::function<void(const Matrix& upstream, const Matrix& output, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var push(Matrix value, Backward backward);

  const Matrix& value(const Var& v) const { return nodes_.at(v.id()).value; }
  /// Gradient buffer of a node, allocated on first use.
  Matrix& grad_of(const Var& v);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and replays in reverse.
  void backward(const Var& root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

enum class Activation { None, Relu };
/// Message direction for one bipartite layer.
enum class Direction { ItemsToUsers, UsersToItems };

/// Whole parameter as a tape node; backward accumulates into param.grad.
Var param(Tape& tape, ParamTensor& p);

/// Row gather; backward scatters additively.
Var embedding_lookup(Tape& tape, ParamTensor& table, std::span<const Index> indices);

/// x * W + b (b broadcast over rows), optionally followed by relu.
Var affine(Tape& tape, const Var& x, ParamTensor& weight, ParamTensor& bias, Activation activation);

/// Node rows are [local users; local items]. Every node becomes
/// relu((h + sum of incoming neighbor rows) * W); with ItemsToUsers only user
/// rows receive messages, with UsersToItems only item rows do.
Var message_pass_layer(Tape& tape, const Var& node_feats, Index num_local_users,
                       std::span<const LocalEdge> edges, Direction direction, ParamTensor& weight);

Var concat_rows(Tape& tape, const Var& top, const Var& bottom);
Var gather_rows(Tape& tape, const Var& x, std::span<const Index> rows);
/// Dot product of every row of `rows` with the single row `vec`: n x 1.
Var row_dots(Tape& tape, const Var& rows, const Var& vec);
/// Per-row dot product of two equal-shape matrices: n x 1.
Var rowwise_dot(Tape& tape, const Var& a, const Var& b);
/// Adds the 1x1 `scalar` to every entry of `x`.
Var add_scalar(Tape& tape, const Var& x, const Var& scalar);
Var sum(Tape& tape, const Var& x);
Var mean(Tape& tape, const Var& x);

/// Mean of -log(sigmoid(pos - neg)) over equal-length column vectors.
Var bpr_loss(Tape& tape, const Var& pos_scores, const Var& neg_scores);

/// Numerically stable softplus(-x) = -log(sigmoid(x)).
Real neg_log_sigmoid(Real x);
Real sigmoid(Real x);

struct TensorCheck {
  std::string name;
  Real max_rel_error = 0.0;
  Real max_abs_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  Real max_rel_error = 0.0;
  bool passed() const;
};

/// Compares tape gradients against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) entry by entry. The relative error of an
/// entry is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<ParamTensor* const> params, Real eps, Real tol,
                           Real abs_floor = 1e-6);

}  // namespace gravel::nn

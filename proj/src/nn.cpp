#include "gravel/nn.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace gravel::nn {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Var Tape::push(Matrix value, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_of(const Var& v) {
  Node& node = nodes_.at(v.id());
  if (node.grad.size() == 0) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward root must be 1x1");
  grad_of(root).setOnes();
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.size() == 0) continue;
    node.backward(node.grad, node.value, *this);
  }
}

Var param(Tape& tape, ParamTensor& p) {
  return tape.push(p.value, [&p](const Matrix& up, const Matrix&, Tape&) { p.grad += up; });
}

Var embedding_lookup(Tape& tape, ParamTensor& table, std::span<const Index> indices) {
  Matrix out(static_cast<Index>(indices.size()), table.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Index idx = indices[r];
    if (idx < 0 || idx >= table.rows()) {
      throw std::out_of_range(fmt::format("embedding index {} out of range for '{}' with {} rows", idx,
                                          table.name, table.rows()));
    }
    out.row(static_cast<Index>(r)) = table.value.row(idx);
  }
  std::vector<Index> saved(indices.begin(), indices.end());
  return tape.push(std::move(out), [&table, saved = std::move(saved)](const Matrix& up, const Matrix&, Tape&) {
    for (std::size_t r = 0; r < saved.size(); ++r) table.grad.row(saved[r]) += up.row(static_cast<Index>(r));
  });
}

Var affine(Tape& tape, const Var& x, ParamTensor& weight, ParamTensor& bias, Activation activation) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw std::invalid_argument(fmt::format("affine shape mismatch: x {}x{}, W {}x{}, b {}x{}", x.rows(),
                                            x.cols(), weight.rows(), weight.cols(), bias.rows(), bias.cols()));
  }
  Matrix out = x.value() * weight.value;
  out.rowwise() += bias.value.row(0);
  const bool relu = activation == Activation::Relu;
  if (relu) out = out.cwiseMax(0.0);
  return tape.push(std::move(out), [x, &weight, &bias, relu](const Matrix& up, const Matrix& output, Tape& t) {
    Matrix g = up;
    if (relu) g = (output.array() > 0.0).select(g, 0.0);
    weight.grad.noalias() += x.value().transpose() * g;
    bias.grad.row(0) += g.colwise().sum();
    t.grad_of(x).noalias() += g * weight.value.transpose();
  });
}

namespace {

// Self feature plus the sum of incoming neighbor rows.
Matrix aggregate(const Matrix& h, Index num_local_users, std::span<const LocalEdge> edges, Direction direction) {
  Matrix agg = h;
  for (const LocalEdge& e : edges) {
    const Index u = e.user;
    const Index i = num_local_users + e.item;
    if (direction == Direction::ItemsToUsers) {
      agg.row(u) += h.row(i);
    } else {
      agg.row(i) += h.row(u);
    }
  }
  return agg;
}

}  // namespace

Var message_pass_layer(Tape& tape, const Var& node_feats, Index num_local_users,
                       std::span<const LocalEdge> edges, Direction direction, ParamTensor& weight) {
  const Matrix& h = node_feats.value();
  if (h.cols() != weight.rows()) throw std::invalid_argument("message_pass_layer: feature width != W rows");
  for (const LocalEdge& e : edges) {
    if (e.user < 0 || e.user >= num_local_users || e.item < 0 || num_local_users + e.item >= h.rows()) {
      throw std::out_of_range("message_pass_layer: edge references a missing local node");
    }
  }
  Matrix agg = aggregate(h, num_local_users, edges, direction);
  Matrix out = (agg * weight.value).cwiseMax(0.0);
  std::vector<LocalEdge> saved(edges.begin(), edges.end());
  return tape.push(std::move(out), [node_feats, num_local_users, saved = std::move(saved), direction, &weight,
                                    agg = std::move(agg)](const Matrix& up, const Matrix& output, Tape& t) {
    const Matrix g = (output.array() > 0.0).select(up, 0.0);
    weight.grad.noalias() += agg.transpose() * g;
    const Matrix g_agg = g * weight.value.transpose();
    Matrix& g_h = t.grad_of(node_feats);
    g_h += g_agg;
    for (const LocalEdge& e : saved) {
      const Index u = e.user;
      const Index i = num_local_users + e.item;
      if (direction == Direction::ItemsToUsers) {
        g_h.row(i) += g_agg.row(u);
      } else {
        g_h.row(u) += g_agg.row(i);
      }
    }
  });
}

Var concat_rows(Tape& tape, const Var& top, const Var& bottom) {
  if (top.cols() != bottom.cols() && top.rows() > 0 && bottom.rows() > 0) {
    throw std::invalid_argument("concat_rows: column mismatch");
  }
  const Index cols = top.rows() > 0 ? top.cols() : bottom.cols();
  Matrix out(top.rows() + bottom.rows(), cols);
  if (top.rows() > 0) out.topRows(top.rows()) = top.value();
  if (bottom.rows() > 0) out.bottomRows(bottom.rows()) = bottom.value();
  const Index split = top.rows();
  return tape.push(std::move(out), [top, bottom, split](const Matrix& up, const Matrix&, Tape& t) {
    if (split > 0) t.grad_of(top) += up.topRows(split);
    if (up.rows() - split > 0) t.grad_of(bottom) += up.bottomRows(up.rows() - split);
  });
}

Var gather_rows(Tape& tape, const Var& x, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.rows()) throw std::out_of_range("gather_rows: row out of range");
    out.row(static_cast<Index>(r)) = x.value().row(rows[r]);
  }
  std::vector<Index> saved(rows.begin(), rows.end());
  return tape.push(std::move(out), [x, saved = std::move(saved)](const Matrix& up, const Matrix&, Tape& t) {
    Matrix& g = t.grad_of(x);
    for (std::size_t r = 0; r < saved.size(); ++r) g.row(saved[r]) += up.row(static_cast<Index>(r));
  });
}

Var row_dots(Tape& tape, const Var& rows, const Var& vec) {
  if (vec.rows() != 1 || vec.cols() != rows.cols()) throw std::invalid_argument("row_dots: shape mismatch");
  Matrix out = rows.value() * vec.value().transpose();
  return tape.push(std::move(out), [rows, vec](const Matrix& up, const Matrix&, Tape& t) {
    t.grad_of(rows).noalias() += up * vec.value();
    t.grad_of(vec).noalias() += up.transpose() * rows.value();
  });
}

Var rowwise_dot(Tape& tape, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("rowwise_dot: shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return tape.push(std::move(out), [a, b](const Matrix& up, const Matrix&, Tape& t) {
    const Eigen::VectorXd g = up.col(0);
    t.grad_of(a) += (b.value().array().colwise() * g.array()).matrix();
    t.grad_of(b) += (a.value().array().colwise() * g.array()).matrix();
  });
}

Var add_scalar(Tape& tape, const Var& x, const Var& scalar) {
  if (scalar.rows() != 1 || scalar.cols() != 1) throw std::invalid_argument("add_scalar: scalar must be 1x1");
  Matrix out = x.value().array() + scalar.value()(0, 0);
  return tape.push(std::move(out), [x, scalar](const Matrix& up, const Matrix&, Tape& t) {
    t.grad_of(x) += up;
    t.grad_of(scalar)(0, 0) += up.sum();
  });
}

Var sum(Tape& tape, const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return tape.push(std::move(out), [x](const Matrix& up, const Matrix&, Tape& t) {
    t.grad_of(x).array() += up(0, 0);
  });
}

Var mean(Tape& tape, const Var& x) {
  const auto n = static_cast<Real>(x.value().size());
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  return tape.push(std::move(out), [x, n](const Matrix& up, const Matrix&, Tape& t) {
    t.grad_of(x).array() += up(0, 0) / n;
  });
}

Real neg_log_sigmoid(Real x) {
  // -log(sigmoid(x)) = log1p(exp(-x)) for x >= 0, and -x + log1p(exp(x)) otherwise.
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

Real sigmoid(Real x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

Var bpr_loss(Tape& tape, const Var& pos_scores, const Var& neg_scores) {
  if (pos_scores.rows() != neg_scores.rows() || pos_scores.cols() != 1 || neg_scores.cols() != 1) {
    throw std::invalid_argument("bpr_loss: score vectors must be equal-length columns");
  }
  const Index n = pos_scores.rows();
  if (n == 0) throw std::invalid_argument("bpr_loss: empty batch");
  Matrix out(1, 1);
  Real total = 0.0;
  for (Index r = 0; r < n; ++r) total += neg_log_sigmoid(pos_scores.value()(r, 0) - neg_scores.value()(r, 0));
  out(0, 0) = total / static_cast<Real>(n);
  return tape.push(std::move(out), [pos_scores, neg_scores, n](const Matrix& up, const Matrix&, Tape& t) {
    Matrix& gp = t.grad_of(pos_scores);
    Matrix& gn = t.grad_of(neg_scores);
    const Real scale = up(0, 0) / static_cast<Real>(n);
    for (Index r = 0; r < n; ++r) {
      // d/dx [-log sigmoid(x)] = -sigmoid(-x)
      const Real d = -sigmoid(-(pos_scores.value()(r, 0) - neg_scores.value()(r, 0))) * scale;
      gp(r, 0) += d;
      gn(r, 0) -= d;
    }
  });
}

bool GradCheckReport::passed() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const TensorCheck& c) { return c.passed; });
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn, std::span<ParamTensor* const> params,
                           Real eps, Real tol, Real abs_floor) {
  auto evaluate = [&]() {
    Tape tape;
    const Real loss = loss_fn(tape).value()(0, 0);
    if (!std::isfinite(loss)) throw std::runtime_error("grad_check: loss is not finite");
    return loss;
  };

  for (ParamTensor* p : params) p->zero_grad();
  {
    Tape tape;
    const Var loss = loss_fn(tape);
    if (!std::isfinite(loss.value()(0, 0))) throw std::runtime_error("grad_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (ParamTensor* p : params) {
    TensorCheck check{p->name};
    const Matrix analytic = p->grad;
    for (Index r = 0; r < p->rows(); ++r) {
      for (Index c = 0; c < p->cols(); ++c) {
        const Real saved = p->value(r, c);
        p->value(r, c) = saved + eps;
        const Real plus = evaluate();
        p->value(r, c) = saved - eps;
        const Real minus = evaluate();
        p->value(r, c) = saved;
        const Real numeric = (plus - minus) / (2.0 * eps);
        const Real a = analytic(r, c);
        const Real abs_err = std::abs(a - numeric);
        const Real rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
        check.max_abs_error = std::max(check.max_abs_error, abs_err);
        check.max_rel_error = std::max(check.max_rel_error, rel_err);
      }
    }
    check.passed = check.max_rel_error <= tol;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.tensors.push_back(std::move(check));
  }
  for (ParamTensor* p : params) p->grad = Matrix::Zero(p->rows(), p->cols());
  return report;
}

}  // namespace gravel::nn

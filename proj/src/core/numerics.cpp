// SPDX-License-Identifier: Apache-2.0

#include "numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "errors.hpp"

namespace cdnet::num {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

void require_same_shape(const char* op, Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                        shape_str(b.value()));
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }

Real Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar(): node is " + shape_str(v));
  return v(0, 0);
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

Var Tape::constant(Matrix value) {
  if (!value.allFinite()) throw ContractError("non-finite constant entered the tape");
  return record(std::move(value), nullptr);
}

Var Tape::param(Parameter& p) {
  if (!p.value.allFinite()) throw ContractError("parameter '" + p.name + "' is not finite");
  Var v = record(p.value, nullptr);
  nodes_.back().sink = &p;
  return v;
}

Var Tape::record(Matrix value, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(int id, const Matrix& grad) {
  Matrix& g = nodes_[static_cast<std::size_t>(id)].grad;
  if (g.size() == 0) {
    g = grad;
  } else {
    g += grad;
  }
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward(): loss recorded on another tape");
  if (loss.value().size() != 1) throw ContractError("backward(): loss must be 1x1");
  if (!loss.value().allFinite()) throw ContractError("backward(): loss is not finite");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[static_cast<std::size_t>(loss.id())].grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.sink != nullptr) {
      if (n.sink->grad.rows() != n.value.rows() || n.sink->grad.cols() != n.value.cols()) {
        n.sink->grad = n.grad;
      } else {
        n.sink->grad += n.grad;
      }
    }
  }
}

Var linear(Var x, Var M, std::optional<Var> b) {
  require_same_tape(x, M);
  if (x.cols() != M.cols()) {
    throw ContractError("linear: input " + shape_str(x.value()) + " vs matrix " +
                        shape_str(M.value()));
  }
  Matrix out = x.value() * M.value().transpose();
  int bid = -1;
  if (b) {
    require_same_tape(x, *b);
    if (b->rows() != 1 || b->cols() != M.rows()) {
      throw ContractError("linear: bias " + shape_str(b->value()) + " for output width " +
                          std::to_string(M.rows()));
    }
    out.rowwise() += b->value().row(0);
    bid = b->id();
  }
  const int xid = x.id();
  const int mid = M.id();
  return x.tape().record(std::move(out), [xid, mid, bid](Tape& t, const Matrix& g) {
    t.accumulate(xid, g * t.value(mid));
    t.accumulate(mid, g.transpose() * t.value(xid));
    if (bid >= 0) t.accumulate(bid, g.colwise().sum());
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  const int aid = a.id();
  const int bid = b.id();
  return a.tape().record(a.value() + b.value(), [aid, bid](Tape& t, const Matrix& g) {
    t.accumulate(aid, g);
    t.accumulate(bid, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  const int aid = a.id();
  const int bid = b.id();
  return a.tape().record(a.value() - b.value(), [aid, bid](Tape& t, const Matrix& g) {
    t.accumulate(aid, g);
    t.accumulate(bid, -g);
  });
}

Var scale(Var a, Real c) {
  const int aid = a.id();
  return a.tape().record(a.value() * c,
                         [aid, c](Tape& t, const Matrix& g) { t.accumulate(aid, g * c); });
}

Var relu(Var x) {
  const int xid = x.id();
  return x.tape().record(x.value().cwiseMax(Real(0)), [xid](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(xid);
    t.accumulate(xid, (xv.array() > Real(0)).select(g, Real(0)));
  });
}

Var prelu(Var x, Var slope) {
  require_same_tape(x, slope);
  if (slope.value().size() != 1) throw ContractError("prelu: slope must be 1x1");
  const Real a = slope.scalar();
  const Matrix& xv = x.value();
  Matrix out = (xv.array() >= Real(0)).select(xv, xv * a);
  const int xid = x.id();
  const int sid = slope.id();
  return x.tape().record(std::move(out), [xid, sid](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(xid);
    const Real a = t.value(sid)(0, 0);
    const auto pos = xv.array() >= Real(0);
    t.accumulate(xid, pos.select(g, g * a));
    Matrix ds(1, 1);
    ds(0, 0) = pos.select(Real(0), g.array() * xv.array()).sum();
    t.accumulate(sid, ds);
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows()) throw ContractError("concat_cols: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int aid = a.id();
  const int bid = b.id();
  const Index ac = a.cols();
  const Index bc = b.cols();
  return a.tape().record(std::move(out), [aid, bid, ac, bc](Tape& t, const Matrix& g) {
    t.accumulate(aid, g.leftCols(ac));
    t.accumulate(bid, g.rightCols(bc));
  });
}

Var scale_rows(Var p, Var alpha) {
  require_same_tape(p, alpha);
  if (alpha.cols() != 1 || alpha.rows() != p.rows()) {
    throw ContractError("scale_rows: weights " + shape_str(alpha.value()) + " for rows of " +
                        shape_str(p.value()));
  }
  Matrix out = alpha.value().col(0).asDiagonal() * p.value();
  const int pid = p.id();
  const int aid = alpha.id();
  return p.tape().record(std::move(out), [pid, aid](Tape& t, const Matrix& g) {
    const Matrix& pv = t.value(pid);
    const Matrix& av = t.value(aid);
    t.accumulate(pid, av.col(0).asDiagonal() * g);
    Matrix da = (g.array() * pv.array()).rowwise().sum().matrix();
    t.accumulate(aid, da);
  });
}

Var take_rows(Var x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw ContractError("take_rows: range out of bounds");
  }
  const int xid = x.id();
  const Index rows = x.rows();
  const Index cols = x.cols();
  return x.tape().record(x.value().middleRows(begin, count),
                         [xid, begin, count, rows, cols](Tape& t, const Matrix& g) {
                           Matrix full = Matrix::Zero(rows, cols);
                           full.middleRows(begin, count) = g;
                           t.accumulate(xid, full);
                         });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& v : parts) {
    require_same_tape(parts.front(), v);
    if (v.cols() != cols) throw ContractError("concat_rows: column count mismatch");
    rows += v.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index r = 0;
  for (const Var& v : parts) {
    out.middleRows(r, v.rows()) = v.value();
    spans.emplace_back(v.id(), v.rows());
    r += v.rows();
  }
  return parts.front().tape().record(std::move(out), [spans](Tape& t, const Matrix& g) {
    Index r = 0;
    for (const auto& [id, n] : spans) {
      t.accumulate(id, g.middleRows(r, n));
      r += n;
    }
  });
}

Var group_mean(Var x, Index groups, Index group_size) {
  if (groups <= 0 || group_size <= 0) throw ContractError("group_mean: empty group");
  if (x.rows() != groups * group_size) {
    throw ContractError("group_mean: " + std::to_string(x.rows()) + " rows is not " +
                        std::to_string(groups) + " groups of " + std::to_string(group_size));
  }
  const Matrix& xv = x.value();
  Matrix out(groups, xv.cols());
  for (Index gi = 0; gi < groups; ++gi) {
    out.row(gi) = xv.middleRows(gi * group_size, group_size).colwise().sum() /
                  static_cast<Real>(group_size);
  }
  const int xid = x.id();
  return x.tape().record(std::move(out), [xid, groups, group_size](Tape& t, const Matrix& g) {
    Matrix dx(groups * group_size, g.cols());
    for (Index gi = 0; gi < groups; ++gi) {
      for (Index k = 0; k < group_size; ++k) {
        dx.row(gi * group_size + k) = g.row(gi) / static_cast<Real>(group_size);
      }
    }
    t.accumulate(xid, dx);
  });
}

Var pairwise_sq_dist(Var q, Var c) {
  require_same_tape(q, c);
  if (q.cols() != c.cols()) throw ContractError("pairwise_sq_dist: feature width mismatch");
  const Matrix& qv = q.value();
  const Matrix& cv = c.value();
  // Direct differences rather than the |q|^2 - 2qc + |c|^2 expansion so that
  // coincident points give exactly zero.
  Matrix out(qv.rows(), cv.rows());
  for (Index i = 0; i < qv.rows(); ++i) {
    for (Index n = 0; n < cv.rows(); ++n) {
      out(i, n) = (qv.row(i) - cv.row(n)).squaredNorm();
    }
  }
  const int qid = q.id();
  const int cid = c.id();
  return q.tape().record(std::move(out), [qid, cid](Tape& t, const Matrix& g) {
    const Matrix& qv = t.value(qid);
    const Matrix& cv = t.value(cid);
    // d/dq_i = 2 sum_n g_in (q_i - c_n); d/dc_n = -2 sum_i g_in (q_i - c_n)
    Matrix dq = 2 * (g.rowwise().sum().asDiagonal() * qv - g * cv);
    Matrix dc = 2 * (g.colwise().sum().transpose().asDiagonal() * cv - g.transpose() * qv);
    t.accumulate(qid, dq);
    t.accumulate(cid, dc);
  });
}

Var sqrt_elem(Var x) {
  if ((x.value().array() < Real(0)).any()) throw ContractError("sqrt_elem: negative input");
  Matrix out = x.value().array().sqrt().matrix();
  const int xid = x.id();
  const int self = static_cast<int>(x.tape().size());
  return x.tape().record(std::move(out), [xid, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix dx = (y.array() > Real(0)).select(g.array() / (2 * y.array()), Real(0)).matrix();
    t.accumulate(xid, dx);
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& lv = logits.value();
  const Index n = lv.rows();
  const Index classes = lv.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw ContractError("softmax_cross_entropy: empty batch");
  Matrix prob(n, classes);
  Real total = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(y) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
    const Real m = lv.row(i).maxCoeff();
    const auto shifted = (lv.row(i).array() - m).eval();
    const Real z = shifted.exp().sum();
    prob.row(i) = shifted.exp() / z;
    total += std::log(z) - shifted(y);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<Real>(n);
  if (!out.allFinite()) throw ContractError("softmax_cross_entropy: non-finite result");
  std::vector<int> ys(labels.begin(), labels.end());
  const int lid = logits.id();
  return logits.tape().record(std::move(out), [lid, prob = std::move(prob), ys = std::move(ys)](
                                                  Tape& t, const Matrix& g) {
    Matrix d = prob;
    for (std::size_t i = 0; i < ys.size(); ++i) d(static_cast<Index>(i), ys[i]) -= 1;
    d *= g(0, 0) / static_cast<Real>(ys.size());
    t.accumulate(lid, d);
  });
}

Real softmax_cross_entropy_value(std::span<const Real> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ContractError("softmax_cross_entropy: label out of range");
  }
  const Real m = *std::max_element(logits.begin(), logits.end());
  Real z = 0;
  for (Real l : logits) z += std::exp(l - m);
  return std::log(z) - (logits[static_cast<std::size_t>(label)] - m);
}

Var squared_l2(Var u, Var v) {
  require_same_shape("squared_l2", u, v);
  return sum_squares(sub(u, v));
}

Var sum_squares(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().squaredNorm();
  const int xid = x.id();
  return x.tape().record(std::move(out), [xid](Tape& t, const Matrix& g) {
    t.accumulate(xid, t.value(xid) * (2 * g(0, 0)));
  });
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<Parameter* const> params, Real eps, Real tol, Real floor) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.scalar())) throw ContractError("grad_check: loss is not finite");
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    const Real v = loss_fn(tape).scalar();
    if (!std::isfinite(v)) throw ContractError("grad_check: perturbed loss is not finite");
    return v;
  };
  const Real base = eval();
  GradCheckReport report;
  for (Parameter* p : params) {
    GradCheckEntry e;
    e.name = p->name;
    const Matrix analytic = p->grad;
    for (Index k = 0; k < p->value.size(); ++k) {
      Real& theta = p->value.data()[k];
      const Real saved = theta;
      theta = saved + eps;
      const Real up = eval();
      theta = saved - eps;
      const Real down = eval();
      theta = saved;
      const Real numeric = (up - down) / (2 * eps);
      const Real a = analytic.data()[k];
      auto rel = [&](Real n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };
      Real err = rel(numeric);
      if (err > tol) {
        // A ReLU/PReLU kink inside [theta - eps, theta + eps] spoils the
        // central difference but leaves the side holding theta intact.
        const Real side = std::min(rel((up - base) / eps), rel((base - down) / eps));
        if (side <= kOneSidedTol) {
          ++e.kinks;
          continue;
        }
      }
      if (err > e.max_rel_error || k == 0) {
        e.max_rel_error = err;
        e.worst_index = k;
        e.analytic = a;
        e.numeric = numeric;
      }
    }
    if (e.max_rel_error > tol) report.failures.push_back(e.name);
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.kinks += e.kinks;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace cdnet::num

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cdnet::num {

#ifdef CDNET_REAL_FLOAT
using Real = float;
#else
using Real = double;
#endif

using Index = Eigen::Index;
// Rows are samples, columns are features. A single vector is a 1-row matrix.
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr const char* real_dtype() { return sizeof(Real) == 8 ? "f64" : "f32"; }

// A learnable array together with its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  // Value of a 1x1 node.
  [[nodiscard]] Real scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records primitive operations for reverse-mode differentiation of a scalar.
// Parameters enter through param(); each use of the returned Var contributes
// its own partial derivative, and backward() sums them into Parameter::grad.
// A tape is single-threaded.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf without gradient.
  Var constant(Matrix value);
  // Leaf whose gradient is added into `p.grad` by backward().
  Var param(Parameter& p);

  Var record(Matrix value, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var loss);

  void accumulate(int id, const Matrix& grad);

  [[nodiscard]] const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  // Gradient reaching a node during the last backward(); empty if none.
  [[nodiscard]] const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* sink = nullptr;
  };
  std::vector<Node> nodes_;
};

// x * M^T (+ b). x: n x in, M: out x in, b: 1 x out.
Var linear(Var x, Var M, std::optional<Var> b = std::nullopt);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, Real c);
Var relu(Var x);
// max(x,0) + a*min(x,0) with a single shared slope (1x1 Var). Slope 1 at x = 0.
Var prelu(Var x, Var slope);
Var concat_cols(Var a, Var b);
// Row i of p multiplied by alpha(i, 0).
Var scale_rows(Var p, Var alpha);
Var take_rows(Var x, Index begin, Index count);
// Stacks rows of all inputs (equal column counts).
Var concat_rows(std::span<const Var> parts);
// Means of consecutive row groups: x has groups*group_size rows.
Var group_mean(Var x, Index groups, Index group_size);
// Squared Euclidean distance between every row of q and every row of c (m x N).
Var pairwise_sq_dist(Var q, Var c);
// Elementwise sqrt; derivative at 0 taken as 0.
Var sqrt_elem(Var x);
// Mean over rows of -log softmax(logits_i)[labels_i], max-subtracted.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
// Sum of (u - v)^2 over all entries.
Var squared_l2(Var u, Var v);
Var sum_squares(Var x);

// Plain-value helpers (no tape).
Real softmax_cross_entropy_value(std::span<const Real> logits, int label);
bool all_finite(const Matrix& m);

struct GradCheckEntry {
  std::string name;
  Real max_rel_error = 0;
  Index worst_index = 0;
  Real analytic = 0;
  Real numeric = 0;
  int kinks = 0;  // entries skipped because a kink lies within eps
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  Real max_rel_error = 0;
  std::vector<std::string> failures;  // names of entries exceeding tol
  int kinks = 0;
  [[nodiscard]] bool passed() const { return failures.empty(); }
};

// Compares tape gradients against central differences
// (f(t+eps) - f(t-eps)) / (2 eps). The error of one entry is
// |a - n| / max(|a|, |n|, floor). `loss_fn` must build the loss on the tape
// it receives from the current parameter values.
//
// An entry whose central difference misses but whose analytic value agrees
// with one one-sided difference (within kOneSidedTol) straddles a kink of a
// piecewise-linear activation; it is counted in `kinks` instead of scored.
inline constexpr Real kOneSidedTol = 1e-3;
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<Parameter* const> params, Real eps, Real tol,
                           Real floor = 1e-4);

}  // namespace cdnet::num

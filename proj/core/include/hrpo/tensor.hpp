// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hrpo/rng.hpp"

namespace hrpo {

// Thrown when an operation's preconditions are violated (shape mismatch,
// unknown kind, non-scalar backward seed, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Row-major shape. Rank 0 denotes a scalar (numel 1).
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; empty means "all zero"
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape that recorded this tensor, if any
};

// Value handle over a shared dense buffer. Immutable after creation except
// for gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from_data(Shape s, std::vector<double> d, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor uniform(Shape s, double lo, double hi, Rng& rng, bool requires_grad = false);

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  // Rank <= 2 helpers: a rank-1 tensor is treated as a single row.
  int rows() const;
  int cols() const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::span<const double> values() const { return impl_->data; }
  double value() const;  // scalar convenience
  double at(std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(int r, int c) const { return impl_->data[static_cast<std::size_t>(r) * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool grad_allocated() const { return !impl_->grad.empty(); }
  void ensure_grad();
  void zero_grad();
  double* grad() {
    ensure_grad();
    return impl_->grad.data();
  }
  // Gradient view; empty span when no gradient has been accumulated.
  std::span<const double> grad_view() const { return impl_->grad; }
  double grad_at(std::int64_t i) const { return impl_->grad.empty() ? 0.0 : impl_->grad[static_cast<std::size_t>(i)]; }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
  friend Tensor make_op_output(Tape* tape, Shape shape, std::span<const Tensor> inputs);
};

// Kernel kinds understood by apply(). The dispatcher exists so tests and the
// gradcheck harness can enumerate every adjoint rule uniformly.
enum class OpKind {
  MatMul,        // [m x k] . [k x n]
  MatMulNT,      // [m x k] . [n x k]^T
  Add,           // same shape
  AddBias,       // [m x n] + row broadcast [n]
  Mul,           // elementwise
  Sigmoid,
  Softplus,
  Exp,
  Log,
  Sqrt,
  Softmax,       // per row, max-subtracted
  LogSoftmax,    // per row
  L2Norm,        // scalar, floored at 1e-12
  LayerNorm,     // rows of x with gain/bias
  MaskedAttnScores,  // causal q.k^T / sqrt(d)
  GatherRows,    // rows of a matrix by an index tensor
  PickPerRow,    // one column per row by an index tensor
  DivByScalar,   // elementwise division by a scalar tensor
  Mean,
  Sum,
};

OpKind op_kind_from_string(std::string_view name);
std::string_view op_kind_name(OpKind kind);
// Every kind apply() accepts, in a stable order (for enumeration in checks).
std::span<const OpKind> all_op_kinds();

// Define-by-run tape. Records one node per operation; backward replays
// adjoints in reverse order. A tape is confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = seed and pulls adjoints back to every reachable
  // tensor with requires_grad. Leaves keep accumulating across backward calls
  // until zero_grad().
  void backward(const Tensor& loss, double seed = 1.0);

  struct Node {
    Tensor out;
    std::vector<Tensor> inputs;
    std::function<void(Node&)> pull;
  };

  void record(Tensor out, std::vector<Tensor> inputs, std::function<void(Node&)> pull);

 private:
  std::vector<Node> nodes_;
};

// --- recorded operations ---------------------------------------------------
// All ops run eagerly; when `tape` is non-null and any operand requires grad,
// the adjoint rule is recorded. Passing tape == nullptr gives the plain
// forward math on the same code path (used by sampling-time rollouts).

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor add_bias(Tape* tape, const Tensor& a, const Tensor& bias);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor affine(Tape* tape, const Tensor& a, double k, double c);  // k*a + c
Tensor sigmoid(Tape* tape, const Tensor& a);
Tensor softplus(Tape* tape, const Tensor& a);
Tensor exp(Tape* tape, const Tensor& a);
Tensor log(Tape* tape, const Tensor& a);
Tensor sqrt(Tape* tape, const Tensor& a);
Tensor softmax_rows(Tape* tape, const Tensor& a);
Tensor log_softmax_rows(Tape* tape, const Tensor& a);
Tensor l2_norm(Tape* tape, const Tensor& a);
Tensor layer_norm_rows(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor masked_attn_scores(Tape* tape, const Tensor& q, const Tensor& k, double scale);
// Incremental attention over a list of cached chunks (each [t_i x d]).
Tensor attn_scores_over(Tape* tape, const Tensor& q, std::span<const Tensor> key_chunks,
                        double scale);
Tensor attn_mix_over(Tape* tape, const Tensor& weights, std::span<const Tensor> value_chunks);
Tensor gather_rows(Tape* tape, const Tensor& m, std::span<const int> ids);
Tensor slice_cols(Tape* tape, const Tensor& m, int c0, int c1);
Tensor concat_cols(Tape* tape, std::span<const Tensor> parts);
Tensor pick_per_row(Tape* tape, const Tensor& m, std::span<const int> col_ids);
Tensor concat_scalars(Tape* tape, std::span<const Tensor> xs);
Tensor div_by_scalar(Tape* tape, const Tensor& a, const Tensor& s);
Tensor mean(Tape* tape, const Tensor& a);
Tensor sum(Tape* tape, const Tensor& a);

// Uniform dispatcher over the kernel kinds above. Index-carrying kinds
// (GatherRows, PickPerRow) read ids from a plain tensor operand. Unknown or
// malformed kinds raise ContractViolation.
Tensor apply(Tape* tape, OpKind kind, std::span<const Tensor> operands);

namespace testing {
// Deliberately corrupts the sigmoid adjoint so mutation-sanity tests can
// confirm the finite-difference harness reports failures.
extern bool flip_sigmoid_adjoint;
}  // namespace testing

}  // namespace hrpo

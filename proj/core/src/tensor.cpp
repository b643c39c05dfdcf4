// SPDX-License-Identifier: Apache-2.0
#include "hrpo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hrpo {

namespace testing {
bool flip_sigmoid_adjoint = false;
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ContractViolation(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

Tensor new_tensor(Shape s) {
  const auto n = static_cast<std::size_t>(shape_numel(s));
  return Tensor::from_data(std::move(s), std::vector<double>(n));
}

bool any_requires_grad(std::span<const Tensor> ins) {
  for (const Tensor& t : ins)
    if (t.requires_grad()) return true;
  return false;
}

// Records the node when a tape is active and gradients can flow.
void maybe_record(Tape* tape, Tensor& out, std::vector<Tensor> ins,
                  std::function<void(Tape::Node&)> pull) {
  if (tape == nullptr || !any_requires_grad(ins)) return;
  out.set_requires_grad(true);
  out.impl()->tape = tape;
  tape->record(out, std::move(ins), std::move(pull));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

constexpr double kNormFloor = 1e-12;
constexpr double kMaskValue = -1e30;

std::vector<int> ids_from_tensor(const Tensor& t) {
  std::vector<int> ids(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(std::llround(t.data()[i]));
  return ids;
}

}  // namespace

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  return from_data(std::move(s), {}, requires_grad);
}

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(s));
  return from_data(std::move(s), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from_data(Shape s, std::vector<double> d, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(s));
  if (d.empty()) d.assign(n, 0.0);
  check(d.size() == n, "tensor data length does not match shape " + shape_str(s));
  impl->shape = std::move(s);
  impl->data = std::move(d);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::uniform(Shape s, double lo, double hi, Rng& rng, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(s));
  std::vector<double> d(n);
  for (auto& v : d) v = rng.uniform(lo, hi);
  return from_data(std::move(s), std::move(d), requires_grad);
}

int Tensor::rows() const {
  const Shape& s = impl_->shape;
  if (s.size() == 2) return s[0];
  if (s.size() <= 1) return 1;
  fail("rows() on rank>2 tensor " + shape_str(s));
}

int Tensor::cols() const {
  const Shape& s = impl_->shape;
  if (s.size() == 2) return s[1];
  if (s.size() == 1) return s[0];
  if (s.empty()) return 1;
  fail("cols() on rank>2 tensor " + shape_str(s));
}

double Tensor::value() const {
  check(numel() == 1, "value() requires a scalar, got " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

// --- Tape ----------------------------------------------------------------------

void Tape::record(Tensor out, std::vector<Tensor> inputs, std::function<void(Node&)> pull) {
  nodes_.push_back(Node{std::move(out), std::move(inputs), std::move(pull)});
}

void Tape::backward(const Tensor& loss, double seed) {
  check(loss.valid() && loss.numel() == 1, "backward requires a scalar loss");
  check(loss.impl()->tape == this, "loss was not recorded on this tape");
  // Clear intermediate adjoints from any previous backward on this tape so a
  // second call does not double-count; leaf gradients keep accumulating.
  for (Node& n : nodes_)
    if (n.out.grad_allocated()) n.out.zero_grad();
  loss.impl()->grad.assign(1, seed);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out.grad_allocated()) it->pull(*it);
  }
}

// --- ops -------------------------------------------------------------------------

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.rank() <= 2 && b.rank() == 2, "matmul expects matrices");
  const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  check(k == k2, "matmul shape mismatch " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  Tensor out = new_tensor({m, n});
  const double* A = a.data();
  const double* B = b.data();
  double* C = out.data();
  for (int i = 0; i < m; ++i) {
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = A[static_cast<std::size_t>(i) * k + kk];
      const double* brow = B + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  maybe_record(tape, out, {a, b}, [m, k, n](Tape::Node& node) {
    const double* g = node.out.grad();
    const Tensor& ta = node.inputs[0];
    const Tensor& tb = node.inputs[1];
    if (ta.requires_grad()) {
      double* da = node.inputs[0].grad();
      const double* B = tb.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double* grow = g + static_cast<std::size_t>(i) * n;
          const double* brow = B + static_cast<std::size_t>(kk) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[static_cast<std::size_t>(i) * k + kk] += acc;
        }
    }
    if (tb.requires_grad()) {
      double* db = node.inputs[1].grad();
      const double* A = ta.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double av = A[static_cast<std::size_t>(i) * k + kk];
          const double* grow = g + static_cast<std::size_t>(i) * n;
          double* drow = db + static_cast<std::size_t>(kk) * n;
          for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
    }
  });
  return out;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.rank() <= 2 && b.rank() == 2, "matmul_nt expects matrices");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  check(k == b.cols(),
        "matmul_nt shape mismatch " + shape_str(a.shape()) + " . " + shape_str(b.shape()) + "^T");
  Tensor out = new_tensor({m, n});
  const double* A = a.data();
  const double* B = b.data();
  double* C = out.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = B + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
  maybe_record(tape, out, {a, b}, [m, k, n](Tape::Node& node) {
    const double* g = node.out.grad();
    const Tensor& ta = node.inputs[0];
    const Tensor& tb = node.inputs[1];
    if (ta.requires_grad()) {
      double* da = node.inputs[0].grad();
      const double* B = tb.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * n;
        double* darow = da + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
          const double gv = grow[j];
          const double* brow = B + static_cast<std::size_t>(j) * k;
          for (int kk = 0; kk < k; ++kk) darow[kk] += gv * brow[kk];
        }
      }
    }
    if (tb.requires_grad()) {
      double* db = node.inputs[1].grad();
      const double* A = ta.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * n;
        const double* arow = A + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
          const double gv = grow[j];
          double* dbrow = db + static_cast<std::size_t>(j) * k;
          for (int kk = 0; kk < k; ++kk) dbrow[kk] += gv * arow[kk];
        }
      }
    }
  });
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = new_tensor(a.shape());
  const std::size_t n = out.impl()->data.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  maybe_record(tape, out, {a, b}, [n](Tape::Node& node) {
    const double* g = node.out.grad();
    for (int s = 0; s < 2; ++s) {
      if (!node.inputs[s].requires_grad()) continue;
      double* d = node.inputs[s].grad();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }
  });
  return out;
}

Tensor add_bias(Tape* tape, const Tensor& a, const Tensor& bias) {
  check(bias.rank() == 1 && bias.cols() == a.cols(), "add_bias expects a [cols] bias vector");
  const int m = a.rows(), n = a.cols();
  Tensor out = new_tensor(a.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<std::size_t>(i) * n + j] =
          a.data()[static_cast<std::size_t>(i) * n + j] + bias.data()[j];
  maybe_record(tape, out, {a, bias}, [m, n](Tape::Node& node) {
    const double* g = node.out.grad();
    if (node.inputs[0].requires_grad()) {
      double* da = node.inputs[0].grad();
      for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) da[i] += g[i];
    }
    if (node.inputs[1].requires_grad()) {
      double* db = node.inputs[1].grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) db[j] += g[static_cast<std::size_t>(i) * n + j];
    }
  });
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = new_tensor(a.shape());
  const std::size_t n = out.impl()->data.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  maybe_record(tape, out, {a, b}, [n](Tape::Node& node) {
    const double* g = node.out.grad();
    const double* av = node.inputs[0].data();
    const double* bv = node.inputs[1].data();
    if (node.inputs[0].requires_grad()) {
      double* da = node.inputs[0].grad();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bv[i];
    }
    if (node.inputs[1].requires_grad()) {
      double* db = node.inputs[1].grad();
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * av[i];
    }
  });
  return out;
}

Tensor affine(Tape* tape, const Tensor& a, double k, double c) {
  Tensor out = new_tensor(a.shape());
  const std::size_t n = out.impl()->data.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = k * a.data()[i] + c;
  maybe_record(tape, out, {a}, [n, k](Tape::Node& node) {
    const double* g = node.out.grad();
    double* da = node.inputs[0].grad();
    for (std::size_t i = 0; i < n; ++i) da[i] += k * g[i];
  });
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise(Tape* tape, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = new_tensor(a.shape());
  const std::size_t n = out.impl()->data.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
  maybe_record(tape, out, {a}, [n, bwd](Tape::Node& node) {
    const double* g = node.out.grad();
    const double* x = node.inputs[0].data();
    const double* y = node.out.data();
    double* da = node.inputs[0].grad();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bwd(x[i], y[i]);
  });
  return out;
}

}  // namespace

Tensor sigmoid(Tape* tape, const Tensor& a) {
  return elementwise(
      tape, a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) {
        const double d = y * (1.0 - y);
        return testing::flip_sigmoid_adjoint ? -d : d;
      });
}

Tensor softplus(Tape* tape, const Tensor& a) {
  return elementwise(
      tape, a, [](double x) { return stable_softplus(x); },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor exp(Tape* tape, const Tensor& a) {
  return elementwise(
      tape, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(Tape* tape, const Tensor& a) {
  return elementwise(
      tape, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(Tape* tape, const Tensor& a) {
  return elementwise(
      tape, a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor softmax_rows(Tape* tape, const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  check(n >= 1, "softmax over empty row");
  Tensor out = new_tensor(a.shape());
  for (int i = 0; i < m; ++i) {
    const double* x = a.data() + static_cast<std::size_t>(i) * n;
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  maybe_record(tape, out, {a}, [m, n](Tape::Node& node) {
    const double* g = node.out.grad();
    const double* y = node.out.data();
    double* da = node.inputs[0].grad();
    for (int i = 0; i < m; ++i) {
      const double* gr = g + static_cast<std::size_t>(i) * n;
      const double* yr = y + static_cast<std::size_t>(i) * n;
      double* dr = da + static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_rows(Tape* tape, const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  check(n >= 1, "log_softmax over empty row");
  Tensor out = new_tensor(a.shape());
  for (int i = 0; i < m; ++i) {
    const double* x = a.data() + static_cast<std::size_t>(i) * n;
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  maybe_record(tape, out, {a}, [m, n](Tape::Node& node) {
    const double* g = node.out.grad();
    const double* y = node.out.data();
    double* da = node.inputs[0].grad();
    for (int i = 0; i < m; ++i) {
      const double* gr = g + static_cast<std::size_t>(i) * n;
      const double* yr = y + static_cast<std::size_t>(i) * n;
      double* dr = da + static_cast<std::size_t>(i) * n;
      double gsum = 0.0;
      for (int j = 0; j < n; ++j) gsum += gr[j];
      for (int j = 0; j < n; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
    }
  });
  return out;
}

Tensor l2_norm(Tape* tape, const Tensor& a) {
  double ss = 0.0;
  for (std::size_t i = 0; i < a.impl()->data.size(); ++i) ss += a.data()[i] * a.data()[i];
  const double nrm = std::sqrt(ss);
  Tensor out = Tensor::scalar(std::max(nrm, kNormFloor));
  maybe_record(tape, out, {a}, [nrm](Tape::Node& node) {
    if (nrm <= kNormFloor) return;  // clamped branch has zero slope
    const double g = node.out.grad()[0];
    const double* x = node.inputs[0].data();
    double* da = node.inputs[0].grad();
    const std::size_t n = node.inputs[0].impl()->data.size();
    for (std::size_t i = 0; i < n; ++i) da[i] += g * x[i] / nrm;
  });
  return out;
}

Tensor layer_norm_rows(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  const int m = x.rows(), n = x.cols();
  check(gain.numel() == n && bias.numel() == n, "layer_norm gain/bias must have [cols] entries");
  Tensor out = new_tensor(x.shape());
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<std::size_t>(i) * n;
    double* yr = out.data() + static_cast<std::size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) yr[j] = gain.data()[j] * (xr[j] - mu) * inv + bias.data()[j];
  }
  maybe_record(tape, out, {x, gain, bias}, [m, n, eps](Tape::Node& node) {
    const Tensor& tx = node.inputs[0];
    const Tensor& tg = node.inputs[1];
    const double* g = node.out.grad();
    for (int i = 0; i < m; ++i) {
      const double* xr = tx.data() + static_cast<std::size_t>(i) * n;
      const double* gr = g + static_cast<std::size_t>(i) * n;
      double mu = 0.0;
      for (int j = 0; j < n; ++j) mu += xr[j];
      mu /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      if (tg.requires_grad()) {
        double* dg = node.inputs[1].grad();
        for (int j = 0; j < n; ++j) dg[j] += gr[j] * (xr[j] - mu) * inv;
      }
      if (node.inputs[2].requires_grad()) {
        double* db = node.inputs[2].grad();
        for (int j = 0; j < n; ++j) db[j] += gr[j];
      }
      if (tx.requires_grad()) {
        double* dx = node.inputs[0].grad();
        const double* gv = tg.data();
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double dxhat = gr[j] * gv[j];
          const double xhat = (xr[j] - mu) * inv;
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        for (int j = 0; j < n; ++j) {
          const double dxhat = gr[j] * gv[j];
          const double xhat = (xr[j] - mu) * inv;
          dx[static_cast<std::size_t>(i) * n + j] +=
              inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
      }
    }
  });
  return out;
}

Tensor masked_attn_scores(Tape* tape, const Tensor& q, const Tensor& k, double scale) {
  const int t = q.rows(), d = q.cols();
  check(k.rows() == t && k.cols() == d, "masked_attn_scores expects q,k of equal shape");
  Tensor out = new_tensor({t, t});
  for (int i = 0; i < t; ++i) {
    const double* qr = q.data() + static_cast<std::size_t>(i) * d;
    double* orow = out.data() + static_cast<std::size_t>(i) * t;
    for (int j = 0; j < t; ++j) {
      if (j > i) {
        orow[j] = kMaskValue;
        continue;
      }
      const double* kr = k.data() + static_cast<std::size_t>(j) * d;
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += qr[c] * kr[c];
      orow[j] = acc * scale;
    }
  }
  maybe_record(tape, out, {q, k}, [t, d, scale](Tape::Node& node) {
    const double* g = node.out.grad();
    const Tensor& tq = node.inputs[0];
    const Tensor& tk = node.inputs[1];
    for (int i = 0; i < t; ++i) {
      const double* gr = g + static_cast<std::size_t>(i) * t;
      for (int j = 0; j <= i; ++j) {
        const double gv = gr[j] * scale;
        if (gv == 0.0) continue;
        if (tq.requires_grad()) {
          double* dq = node.inputs[0].grad() + static_cast<std::size_t>(i) * d;
          const double* kr = tk.data() + static_cast<std::size_t>(j) * d;
          for (int c = 0; c < d; ++c) dq[c] += gv * kr[c];
        }
        if (tk.requires_grad()) {
          double* dk = node.inputs[1].grad() + static_cast<std::size_t>(j) * d;
          const double* qr = tq.data() + static_cast<std::size_t>(i) * d;
          for (int c = 0; c < d; ++c) dk[c] += gv * qr[c];
        }
      }
    }
  });
  return out;
}

Tensor attn_scores_over(Tape* tape, const Tensor& q, std::span<const Tensor> key_chunks,
                        double scale) {
  check(q.rows() == 1, "attn_scores_over expects a single query row");
  const int d = q.cols();
  int total = 0;
  for (const Tensor& c : key_chunks) {
    check(c.cols() == d, "key chunk width mismatch");
    total += c.rows();
  }
  check(total >= 1, "attn_scores_over with no keys");
  Tensor out = new_tensor({1, total});
  {
    const double* qr = q.data();
    double* o = out.data();
    int pos = 0;
    for (const Tensor& c : key_chunks)
      for (int r = 0; r < c.rows(); ++r) {
        const double* kr = c.data() + static_cast<std::size_t>(r) * d;
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += qr[j] * kr[j];
        o[pos++] = acc * scale;
      }
  }
  std::vector<Tensor> ins;
  ins.reserve(key_chunks.size() + 1);
  ins.push_back(q);
  for (const Tensor& c : key_chunks) ins.push_back(c);
  maybe_record(tape, out, std::move(ins), [d, scale](Tape::Node& node) {
    const double* g = node.out.grad();
    const Tensor& tq = node.inputs[0];
    const double* qr = tq.data();
    int pos = 0;
    for (std::size_t ci = 1; ci < node.inputs.size(); ++ci) {
      Tensor& c = node.inputs[ci];
      for (int r = 0; r < c.rows(); ++r, ++pos) {
        const double gv = g[pos] * scale;
        if (gv == 0.0) continue;
        if (tq.requires_grad()) {
          double* dq = node.inputs[0].grad();
          const double* kr = c.data() + static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) dq[j] += gv * kr[j];
        }
        if (c.requires_grad()) {
          double* dk = c.grad() + static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) dk[j] += gv * qr[j];
        }
      }
    }
  });
  return out;
}

Tensor attn_mix_over(Tape* tape, const Tensor& weights, std::span<const Tensor> value_chunks) {
  check(weights.rows() == 1, "attn_mix_over expects a single weight row");
  int total = 0;
  int d = -1;
  for (const Tensor& c : value_chunks) {
    if (d < 0) d = c.cols();
    check(c.cols() == d, "value chunk width mismatch");
    total += c.rows();
  }
  check(total == weights.cols(), "attn_mix_over weight length mismatch");
  Tensor out = new_tensor({1, d});
  {
    const double* w = weights.data();
    double* o = out.data();
    int pos = 0;
    for (const Tensor& c : value_chunks)
      for (int r = 0; r < c.rows(); ++r, ++pos) {
        const double wv = w[pos];
        const double* vr = c.data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) o[j] += wv * vr[j];
      }
  }
  std::vector<Tensor> ins;
  ins.reserve(value_chunks.size() + 1);
  ins.push_back(weights);
  for (const Tensor& c : value_chunks) ins.push_back(c);
  maybe_record(tape, out, std::move(ins), [d](Tape::Node& node) {
    const double* g = node.out.grad();
    const Tensor& tw = node.inputs[0];
    const double* w = tw.data();
    int pos = 0;
    for (std::size_t ci = 1; ci < node.inputs.size(); ++ci) {
      Tensor& c = node.inputs[ci];
      for (int r = 0; r < c.rows(); ++r, ++pos) {
        const double* vr = c.data() + static_cast<std::size_t>(r) * d;
        if (tw.requires_grad()) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j) acc += g[j] * vr[j];
          node.inputs[0].grad()[pos] += acc;
        }
        if (c.requires_grad()) {
          double* dv = c.grad() + static_cast<std::size_t>(r) * d;
          const double wv = w[pos];
          for (int j = 0; j < d; ++j) dv[j] += wv * g[j];
        }
      }
    }
  });
  return out;
}

Tensor gather_rows(Tape* tape, const Tensor& m, std::span<const int> ids) {
  check(m.rank() == 2, "gather_rows expects a matrix");
  const int rows = m.rows(), colsn = m.cols();
  for (int id : ids)
    check(id >= 0 && id < rows, "gather_rows index " + std::to_string(id) + " out of range [0," +
                                    std::to_string(rows) + ")");
  Tensor out = new_tensor({static_cast<int>(ids.size()), colsn});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(m.data() + static_cast<std::size_t>(ids[i]) * colsn, colsn,
                out.data() + i * colsn);
  std::vector<int> idv(ids.begin(), ids.end());
  maybe_record(tape, out, {m}, [idv = std::move(idv), colsn](Tape::Node& node) {
    const double* g = node.out.grad();
    double* dm = node.inputs[0].grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* drow = dm + static_cast<std::size_t>(idv[i]) * colsn;
      const double* grow = g + i * colsn;
      for (int j = 0; j < colsn; ++j) drow[j] += grow[j];
    }
  });
  return out;
}

Tensor slice_cols(Tape* tape, const Tensor& m, int c0, int c1) {
  check(m.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= m.cols(), "slice_cols bounds invalid");
  const int rows = m.rows(), colsn = m.cols(), w = c1 - c0;
  Tensor out = new_tensor({rows, w});
  for (int i = 0; i < rows; ++i)
    std::copy_n(m.data() + static_cast<std::size_t>(i) * colsn + c0, w,
                out.data() + static_cast<std::size_t>(i) * w);
  maybe_record(tape, out, {m}, [rows, colsn, c0, w](Tape::Node& node) {
    const double* g = node.out.grad();
    double* dm = node.inputs[0].grad();
    for (int i = 0; i < rows; ++i) {
      double* drow = dm + static_cast<std::size_t>(i) * colsn + c0;
      const double* grow = g + static_cast<std::size_t>(i) * w;
      for (int j = 0; j < w; ++j) drow[j] += grow[j];
    }
  });
  return out;
}

Tensor concat_cols(Tape* tape, std::span<const Tensor> parts) {
  check(!parts.empty(), "concat_cols of nothing");
  const int rows = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    check(p.rows() == rows, "concat_cols row mismatch");
    total += p.cols();
  }
  Tensor out = new_tensor({rows, total});
  int off = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < rows; ++i)
      std::copy_n(p.data() + static_cast<std::size_t>(i) * p.cols(), p.cols(),
                  out.data() + static_cast<std::size_t>(i) * total + off);
    off += p.cols();
  }
  std::vector<Tensor> ins(parts.begin(), parts.end());
  maybe_record(tape, out, std::move(ins), [rows, total](Tape::Node& node) {
    const double* g = node.out.grad();
    int off = 0;
    for (Tensor& p : node.inputs) {
      const int w = p.cols();
      if (p.requires_grad()) {
        double* dp = p.grad();
        for (int i = 0; i < rows; ++i) {
          const double* grow = g + static_cast<std::size_t>(i) * total + off;
          double* drow = dp + static_cast<std::size_t>(i) * w;
          for (int j = 0; j < w; ++j) drow[j] += grow[j];
        }
      }
      off += w;
    }
  });
  return out;
}

Tensor pick_per_row(Tape* tape, const Tensor& m, std::span<const int> col_ids) {
  check(m.rank() == 2 && static_cast<int>(col_ids.size()) == m.rows(),
        "pick_per_row needs one column id per row");
  const int colsn = m.cols();
  for (int id : col_ids) check(id >= 0 && id < colsn, "pick_per_row column out of range");
  Tensor out = new_tensor({static_cast<int>(col_ids.size())});
  for (std::size_t i = 0; i < col_ids.size(); ++i)
    out.data()[i] = m.data()[i * colsn + static_cast<std::size_t>(col_ids[i])];
  std::vector<int> idv(col_ids.begin(), col_ids.end());
  maybe_record(tape, out, {m}, [idv = std::move(idv), colsn](Tape::Node& node) {
    const double* g = node.out.grad();
    double* dm = node.inputs[0].grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      dm[i * colsn + static_cast<std::size_t>(idv[i])] += g[i];
  });
  return out;
}

Tensor concat_scalars(Tape* tape, std::span<const Tensor> xs) {
  check(!xs.empty(), "concat_scalars of nothing");
  Tensor out = new_tensor({static_cast<int>(xs.size())});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    check(xs[i].numel() == 1, "concat_scalars expects scalars");
    out.data()[i] = xs[i].data()[0];
  }
  std::vector<Tensor> ins(xs.begin(), xs.end());
  maybe_record(tape, out, std::move(ins), [](Tape::Node& node) {
    const double* g = node.out.grad();
    for (std::size_t i = 0; i < node.inputs.size(); ++i)
      if (node.inputs[i].requires_grad()) node.inputs[i].grad()[0] += g[i];
  });
  return out;
}

Tensor div_by_scalar(Tape* tape, const Tensor& a, const Tensor& s) {
  check(s.numel() == 1, "div_by_scalar expects a scalar divisor");
  const double sv = s.data()[0];
  Tensor out = new_tensor(a.shape());
  const std::size_t n = out.impl()->data.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / sv;
  maybe_record(tape, out, {a, s}, [n, sv](Tape::Node& node) {
    const double* g = node.out.grad();
    if (node.inputs[0].requires_grad()) {
      double* da = node.inputs[0].grad();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] / sv;
    }
    if (node.inputs[1].requires_grad()) {
      const double* y = node.out.data();
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += g[i] * y[i];
      node.inputs[1].grad()[0] += -acc / sv;
    }
  });
  return out;
}

Tensor mean(Tape* tape, const Tensor& a) {
  const std::size_t n = a.impl()->data.size();
  check(n >= 1, "mean of empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  maybe_record(tape, out, {a}, [n](Tape::Node& node) {
    const double g = node.out.grad()[0] / static_cast<double>(n);
    double* da = node.inputs[0].grad();
    for (std::size_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

Tensor sum(Tape* tape, const Tensor& a) {
  const std::size_t n = a.impl()->data.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  maybe_record(tape, out, {a}, [n](Tape::Node& node) {
    const double g = node.out.grad()[0];
    double* da = node.inputs[0].grad();
    for (std::size_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

// --- apply() dispatcher ----------------------------------------------------------

namespace {

constexpr std::pair<OpKind, std::string_view> kOpNames[] = {
    {OpKind::MatMul, "matmul"},
    {OpKind::MatMulNT, "matmul_nt"},
    {OpKind::Add, "add"},
    {OpKind::AddBias, "add_bias"},
    {OpKind::Mul, "mul"},
    {OpKind::Sigmoid, "sigmoid"},
    {OpKind::Softplus, "softplus"},
    {OpKind::Exp, "exp"},
    {OpKind::Log, "log"},
    {OpKind::Sqrt, "sqrt"},
    {OpKind::Softmax, "softmax"},
    {OpKind::LogSoftmax, "log_softmax"},
    {OpKind::L2Norm, "l2_norm"},
    {OpKind::LayerNorm, "layer_norm"},
    {OpKind::MaskedAttnScores, "masked_attn_scores"},
    {OpKind::GatherRows, "gather_rows"},
    {OpKind::PickPerRow, "pick_per_row"},
    {OpKind::DivByScalar, "div_by_scalar"},
    {OpKind::Mean, "mean"},
    {OpKind::Sum, "sum"},
};

constexpr OpKind kAllKinds[] = {
    OpKind::MatMul,   OpKind::MatMulNT, OpKind::Add,        OpKind::AddBias,
    OpKind::Mul,      OpKind::Sigmoid,  OpKind::Softplus,   OpKind::Exp,
    OpKind::Log,      OpKind::Sqrt,     OpKind::Softmax,    OpKind::LogSoftmax,
    OpKind::L2Norm,   OpKind::LayerNorm, OpKind::MaskedAttnScores, OpKind::GatherRows,
    OpKind::PickPerRow, OpKind::DivByScalar, OpKind::Mean,  OpKind::Sum,
};

}  // namespace

OpKind op_kind_from_string(std::string_view name) {
  for (const auto& [kind, n] : kOpNames)
    if (n == name) return kind;
  fail("unknown operation kind '" + std::string(name) + "'");
}

std::string_view op_kind_name(OpKind kind) {
  for (const auto& [k, n] : kOpNames)
    if (k == kind) return n;
  fail("unnamed operation kind");
}

std::span<const OpKind> all_op_kinds() { return kAllKinds; }

Tensor apply(Tape* tape, OpKind kind, std::span<const Tensor> ops) {
  const auto want = [&](std::size_t n) {
    check(ops.size() == n, std::string(op_kind_name(kind)) + " expects " + std::to_string(n) +
                               " operands, got " + std::to_string(ops.size()));
  };
  switch (kind) {
    case OpKind::MatMul:
      want(2);
      return matmul(tape, ops[0], ops[1]);
    case OpKind::MatMulNT:
      want(2);
      return matmul_nt(tape, ops[0], ops[1]);
    case OpKind::Add:
      want(2);
      return add(tape, ops[0], ops[1]);
    case OpKind::AddBias:
      want(2);
      return add_bias(tape, ops[0], ops[1]);
    case OpKind::Mul:
      want(2);
      return mul(tape, ops[0], ops[1]);
    case OpKind::Sigmoid:
      want(1);
      return sigmoid(tape, ops[0]);
    case OpKind::Softplus:
      want(1);
      return softplus(tape, ops[0]);
    case OpKind::Exp:
      want(1);
      return exp(tape, ops[0]);
    case OpKind::Log:
      want(1);
      return log(tape, ops[0]);
    case OpKind::Sqrt:
      want(1);
      return sqrt(tape, ops[0]);
    case OpKind::Softmax:
      want(1);
      return softmax_rows(tape, ops[0]);
    case OpKind::LogSoftmax:
      want(1);
      return log_softmax_rows(tape, ops[0]);
    case OpKind::L2Norm:
      want(1);
      return l2_norm(tape, ops[0]);
    case OpKind::LayerNorm:
      want(3);
      return layer_norm_rows(tape, ops[0], ops[1], ops[2]);
    case OpKind::MaskedAttnScores:
      want(2);
      return masked_attn_scores(tape, ops[0], ops[1], 1.0 / std::sqrt(double(ops[0].cols())));
    case OpKind::GatherRows: {
      want(2);
      const auto ids = ids_from_tensor(ops[1]);
      return gather_rows(tape, ops[0], ids);
    }
    case OpKind::PickPerRow: {
      want(2);
      const auto ids = ids_from_tensor(ops[1]);
      return pick_per_row(tape, ops[0], ids);
    }
    case OpKind::DivByScalar:
      want(2);
      return div_by_scalar(tape, ops[0], ops[1]);
    case OpKind::Mean:
      want(1);
      return mean(tape, ops[0]);
    case OpKind::Sum:
      want(1);
      return sum(tape, ops[0]);
  }
  fail("unknown operation kind");
}

}  // namespace hrpo

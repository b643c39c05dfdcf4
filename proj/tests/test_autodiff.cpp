// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <doctest.h>

#include "hrpo/gradcheck.hpp"
#include "hrpo/rng.hpp"
#include "hrpo/tensor.hpp"

using namespace hrpo;

namespace {

double weighted_objective(Tape* tape, OpKind kind, std::span<const Tensor> ops,
                          const Tensor& weights, Tensor* out_loss = nullptr) {
  Tensor out = apply(tape, kind, ops);
  Tensor loss = sum(tape, mul(tape, out, weights));
  if (out_loss) *out_loss = loss;
  return loss.value();
}

}  // namespace

TEST_CASE("analytic kernel values") {
  Tensor z = Tensor::from_data({2}, {0.0, 0.0});
  Tensor sm = softmax_rows(nullptr, z);
  CHECK(sm.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sm.at(1) == doctest::Approx(0.5).epsilon(1e-12));

  CHECK(sigmoid(nullptr, Tensor::scalar(0.0)).value() == doctest::Approx(0.5));
  CHECK(softplus(nullptr, Tensor::scalar(0.0)).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // identity matmul
  Rng rng(7);
  Tensor a = Tensor::uniform({3, 3}, -2.0, 2.0, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  Tensor prod = matmul(nullptr, eye, a);
  for (int i = 0; i < 9; ++i) CHECK(prod.at(i) == doctest::Approx(a.at(i)).epsilon(1e-15));
}

TEST_CASE("backward on sum gives ones and sigmoid'(0) = 1/4") {
  Tape tape;
  Tensor x = Tensor::from_data({4}, {1.0, -2.0, 3.0, 0.5}, true);
  Tensor loss = sum(&tape, x);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad_at(i) == doctest::Approx(1.0));

  Tape tape2;
  Tensor w = Tensor::scalar(0.0, true);
  Tensor s = sigmoid(&tape2, w);
  tape2.backward(s);
  CHECK(w.grad_at(0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
  Tape tape;
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  Tensor y = affine(&tape, x, 2.0, 0.0);
  CHECK_THROWS_AS(tape.backward(y), ContractViolation);

  Tensor off_tape = Tensor::scalar(1.0, true);
  CHECK_THROWS_AS(tape.backward(off_tape), ContractViolation);
}

TEST_CASE("apply rejects shape mismatches and wrong arity") {
  Rng rng(3);
  Tensor a = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
  Tensor b = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(matmul(nullptr, a, b), ContractViolation);
  CHECK_THROWS_AS(add(nullptr, a, Tensor::zeros({2, 2})), ContractViolation);
  std::vector<Tensor> one{a};
  CHECK_THROWS_AS(apply(nullptr, OpKind::Add, one), ContractViolation);
  CHECK_THROWS_AS(op_kind_from_string("definitely_not_a_kernel"), ContractViolation);
}

TEST_CASE("every kernel adjoint matches central differences") {
  Rng rng(0xadadadULL);
  for (OpKind kind : all_op_kinds()) {
    CAPTURE(op_kind_name(kind));
    std::vector<Tensor> ops;
    switch (kind) {
      case OpKind::MatMul:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true), Tensor::uniform({3, 2}, -2, 2, rng, true)};
        break;
      case OpKind::MatMulNT:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true), Tensor::uniform({4, 3}, -2, 2, rng, true)};
        break;
      case OpKind::Add:
      case OpKind::Mul:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true), Tensor::uniform({2, 3}, -2, 2, rng, true)};
        break;
      case OpKind::AddBias:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true), Tensor::uniform({3}, -2, 2, rng, true)};
        break;
      case OpKind::Log:
      case OpKind::Sqrt:
        ops = {Tensor::uniform({2, 3}, 0.3, 2.0, rng, true)};
        break;
      case OpKind::Sigmoid:
      case OpKind::Softplus:
      case OpKind::Exp:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true)};
        break;
      case OpKind::Softmax:
      case OpKind::LogSoftmax:
        ops = {Tensor::uniform({2, 5}, -2, 2, rng, true)};
        break;
      case OpKind::L2Norm:
        ops = {Tensor::uniform({5}, -2, 2, rng, true)};
        break;
      case OpKind::LayerNorm:
        ops = {Tensor::uniform({2, 5}, -2, 2, rng, true), Tensor::uniform({5}, 0.5, 1.5, rng, true),
               Tensor::uniform({5}, -0.5, 0.5, rng, true)};
        break;
      case OpKind::MaskedAttnScores:
        ops = {Tensor::uniform({3, 4}, -2, 2, rng, true), Tensor::uniform({3, 4}, -2, 2, rng, true)};
        break;
      case OpKind::GatherRows:
        ops = {Tensor::uniform({4, 3}, -2, 2, rng, true), Tensor::from_data({3}, {0, 2, 2})};
        break;
      case OpKind::PickPerRow:
        ops = {Tensor::uniform({3, 4}, -2, 2, rng, true), Tensor::from_data({3}, {1, 0, 3})};
        break;
      case OpKind::DivByScalar:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true), Tensor::uniform({}, 0.5, 2.0, rng, true)};
        break;
      case OpKind::Mean:
      case OpKind::Sum:
        ops = {Tensor::uniform({2, 3}, -2, 2, rng, true)};
        break;
    }
    Tensor weights;
    {
      Tape probe;
      Tensor out = apply(&probe, kind, ops);
      weights = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
      if (kind == OpKind::MaskedAttnScores)
        for (int i = 0; i < out.rows(); ++i)
          for (int j = i + 1; j < out.cols(); ++j)
            weights.data()[static_cast<std::size_t>(i) * out.cols() + j] = 0.0;
    }
    for (const Tensor& t : ops) t.impl()->grad.clear();
    Tape tape;
    Tensor loss;
    weighted_objective(&tape, kind, ops, weights, &loss);
    tape.backward(loss);

    const auto f = [&]() {
      Tape t;
      return weighted_objective(&t, kind, ops, weights);
    };
    for (std::size_t ti = 0; ti < ops.size(); ++ti) {
      if (!ops[ti].requires_grad()) continue;
      for (std::int64_t e = 0; e < ops[ti].numel(); ++e) {
        const double analytic = ops[ti].grad_at(e);
        const double numeric = finite_difference_grad(f, ops[ti], e, 1e-6);
        CAPTURE(ti);
        CAPTURE(e);
        CHECK(grads_close(analytic, numeric, 1e-6, 1e-8));
      }
    }
  }
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
  Rng rng(41);
  Tensor x = Tensor::uniform({2, 4}, -1, 1, rng);
  Tensor w1 = Tensor::uniform({4, 5}, -1, 1, rng, true);
  Tensor b1 = Tensor::uniform({5}, -0.5, 0.5, rng, true);
  Tensor w2 = Tensor::uniform({5, 3}, -1, 1, rng, true);
  Tensor b2 = Tensor::uniform({3}, -0.5, 0.5, rng, true);

  const auto model = [&](Tape* tape) {
    Tensor h = sigmoid(tape, add_bias(tape, matmul(tape, x, w1), b1));
    Tensor out = add_bias(tape, matmul(tape, h, w2), b2);
    return mean(tape, mul(tape, out, out));
  };
  Tape tape;
  Tensor loss = model(&tape);
  tape.backward(loss);
  const auto f = [&]() {
    Tape t;
    return model(&t).value();
  };
  Rng pick(5);
  std::vector<Tensor> params{w1, b1, w2, b2};
  for (int c = 0; c < 10; ++c) {
    const auto ti = pick.below(params.size());
    const auto e =
        static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(params[ti].numel())));
    const double numeric = finite_difference_grad(f, params[ti], e, 1e-6);
    const double analytic = params[ti].grad_at(e);
    const double err = rel_err(analytic, numeric, 1e-9);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("tape determinism: same inputs give bit-identical values and grads") {
  const auto build = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::uniform({3, 3}, -1, 1, rng, true);
    Tensor w = Tensor::uniform({3, 3}, -1, 1, rng, true);
    Tape tape;
    Tensor y = softmax_rows(&tape, matmul(&tape, x, w));
    Tensor loss = mean(&tape, y);
    tape.backward(loss);
    std::vector<double> out(y.data(), y.data() + y.numel());
    out.insert(out.end(), x.grad(), x.grad() + x.numel());
    out.insert(out.end(), w.grad(), w.grad() + w.numel());
    return out;
  };
  const auto a = build(123), b = build(123);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("parameters off the loss path keep exactly zero gradient") {
  Rng rng(9);
  Tensor used = Tensor::uniform({2, 2}, -1, 1, rng, true);
  Tensor unused = Tensor::uniform({2, 2}, -1, 1, rng, true);
  used.ensure_grad();
  unused.ensure_grad();
  Tape tape;
  Tensor loss = sum(&tape, mul(&tape, used, used));
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) {
    CHECK(unused.grad_at(i) == 0.0);
    CHECK(used.grad_at(i) != 0.0);
  }
}

TEST_CASE("finite_difference_grad oracle basics") {
  Tensor x = Tensor::scalar(3.0);
  const auto f = [&]() { return x.value() * x.value(); };
  CHECK(finite_difference_grad(f, x, 0, 1e-6) == doctest::Approx(6.0).epsilon(1e-6));

  const auto constant = [&]() { return 42.0; };
  CHECK(finite_difference_grad(constant, x, 0, 1e-6) == doctest::Approx(0.0));

  CHECK_THROWS_AS(finite_difference_grad(f, x, 0, 0.0), ContractViolation);
  const auto bad = [&]() { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(finite_difference_grad(bad, x, 0, 1e-6), OracleFailure);
}

TEST_CASE("softmax and norms stay finite on extreme finite inputs") {
  Tensor extreme = Tensor::from_data({1, 3}, {1e4, -1e4, 0.0});
  Tensor sm = softmax_rows(nullptr, extreme);
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    CHECK(std::isfinite(sm.at(i)));
    total += sm.at(i);
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  Tensor zero = Tensor::zeros({4});
  CHECK(l2_norm(nullptr, zero).value() == doctest::Approx(1e-12));
}

TEST_CASE("sigmoid adjoint mutation is caught by the finite-difference check") {
  Rng rng(11);
  Tensor x = Tensor::uniform({2, 2}, -1, 1, rng, true);
  testing::flip_sigmoid_adjoint = true;
  Tape tape;
  Tensor loss = sum(&tape, sigmoid(&tape, x));
  tape.backward(loss);
  testing::flip_sigmoid_adjoint = false;
  const auto f = [&]() {
    Tape t;
    return sum(&t, sigmoid(&t, x)).value();
  };
  const double numeric = finite_difference_grad(f, x, 0, 1e-6);
  CHECK_FALSE(grads_close(x.grad_at(0), numeric, 1e-6, 1e-9));
}

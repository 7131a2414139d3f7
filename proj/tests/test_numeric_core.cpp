#include <doctest.h>

#include <cmath>
#include <vector>

#include "stmoge/ops.hpp"
#include "stmoge/rng.hpp"
#include "stmoge/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace stmoge;
namespace t = stmoge::testing;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = true,
                     double lo = -2.0, double hi = 2.0) {
  Tensor out(std::move(shape), requires_grad);
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = rng.uniform(lo, hi);
  return out;
}

// Fixed-weight scalar readout so any-shaped op output becomes a loss.
double weighted_readout(const Tensor& x, const std::vector<double>& w) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) acc += w[static_cast<size_t>(i)] * x.at(i);
  return acc;
}

Tensor readout_loss(Tape* tape, const Tensor& x, const std::vector<double>& w) {
  Tensor wt = Tensor::from_values(x.shape(), w);
  return ops::sum(tape, ops::mul(tape, x, wt));
}

// Runs the finite-difference suite for one primitive: loss = fixed random
// weighting of the op output, gradients checked for every input tensor.
void check_op_gradients(const std::function<Tensor(Tape*)>& apply,
                        std::vector<Tensor> inputs, uint64_t seed,
                        double rel_tol = 1e-4) {
  Rng rng(seed);
  Tensor probe = apply(nullptr);
  std::vector<double> w(static_cast<size_t>(probe.size()));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);

  auto loss_value = [&]() { return weighted_readout(apply(nullptr), w); };
  for (Tensor& input : inputs) {
    Tape tape;
    for (Tensor& i2 : inputs) i2.zero_grad();
    Tensor out = apply(&tape);
    Tensor loss = readout_loss(&tape, out, w);
    tape.backward(loss);
    const auto numeric = t::finite_diff_gradient(loss_value, input);
    for (int64_t i = 0; i < input.size(); ++i) {
      const double a = input.grad()[i];
      const double n = numeric[static_cast<size_t>(i)];
      INFO("entry ", i, " analytic ", a, " numeric ", n);
      CHECK(t::gradients_match(a, n, rel_tol));
    }
  }
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor a = Tensor::zeros({2, 3});
  CHECK(a.size() == 6);
  CHECK(a.rank() == 2);
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  Tensor s = Tensor::scalar(4.5);
  CHECK(s.is_scalar());
  CHECK(s.value() == 4.5);
}

TEST_CASE("matmul worked examples") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor out = ops::matmul(nullptr, eye, m);
  for (int64_t i = 0; i < 4; ++i) CHECK(out.at(i) == m.at(i));

  Tensor z = Tensor::zeros({2, 2});
  Tensor zout = ops::matmul(nullptr, z, m);
  for (int64_t i = 0; i < 4; ++i) CHECK(zout.at(i) == 0.0);

  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  CHECK(ops::matmul(nullptr, a, b).value() == doctest::Approx(11.0).epsilon(1e-15));

  // Error names both shapes.
  Tensor bad = Tensor::zeros({3, 2});
  try {
    ops::matmul(nullptr, a, bad);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("softmax_rows worked examples and stability") {
  Tensor x = Tensor::from_values({1, 2}, {0, 0});
  Tensor s = ops::softmax_rows(nullptr, x);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-12));

  Tensor x2 = Tensor::from_values({1, 2}, {1, 0});
  Tensor s2 = ops::softmax_rows(nullptr, x2);
  CHECK(s2.at(0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(s2.at(1) == doctest::Approx(0.2689414213699951).epsilon(1e-12));

  Tensor x3 = Tensor::from_values({1, 2}, {1000, 0});
  Tensor s3 = ops::softmax_rows(nullptr, x3);
  CHECK(s3.all_finite());
  CHECK(std::fabs(s3.at(0) - 1.0) < 1e-9);
  CHECK(std::fabs(s3.at(1) - 0.0) < 1e-9);
}

TEST_CASE("softmax_rows rows sum to one for large magnitudes") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 9}, rng, false, -1e4, 1e4);
    Tensor s = ops::softmax_rows(nullptr, x);
    for (int64_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (int64_t j = 0; j < 9; ++j) {
        CHECK(s.at(r, j) >= 0.0);
        sum += s.at(r, j);
      }
      CHECK(std::fabs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("dilated_causal_conv worked examples") {
  Tensor x = Tensor::from_values({4}, {1, 2, 3, 4});
  Tensor f = Tensor::from_values({3}, {1, 1, 1});
  Tensor out = ops::dilated_causal_conv(nullptr, x, f, 1);
  const std::vector<double> expect = {1, 3, 6, 9};
  for (int64_t i = 0; i < 4; ++i) CHECK(out.at(i) == doctest::Approx(expect[i]).epsilon(1e-15));

  // Identity kernel leaves the signal unchanged for any dilation.
  Tensor ident = Tensor::from_values({1}, {1});
  Tensor out2 = ops::dilated_causal_conv(nullptr, x, ident, 3);
  for (int64_t i = 0; i < 4; ++i) CHECK(out2.at(i) == x.at(i));

  Tensor z = Tensor::zeros({3});
  Tensor out3 = ops::dilated_causal_conv(nullptr, z, f, 2);
  for (int64_t i = 0; i < 3; ++i) CHECK(out3.at(i) == 0.0);

  CHECK_THROWS_AS(ops::dilated_causal_conv(nullptr, x, f, 0), ConfigError);
}

TEST_CASE("dilated_causal_conv causality is exact") {
  Rng rng(11);
  Tensor f = random_tensor({3}, rng, false);
  for (int64_t dilation : {1, 2}) {
    Tensor x = random_tensor({10}, rng, false);
    Tensor base = ops::dilated_causal_conv(nullptr, x, f, dilation);
    for (int64_t s = 0; s < 10; ++s) {
      Tensor pert = x.clone();
      pert.at(s) += 1.0;
      Tensor moved = ops::dilated_causal_conv(nullptr, pert, f, dilation);
      for (int64_t i = 0; i < s; ++i) CHECK(moved.at(i) == base.at(i));
    }
  }
}

TEST_CASE("batch_norm worked examples") {
  // Constant input: normalized output is exactly zero before scale/shift.
  Tensor x = Tensor::full({3, 1, 1, 1}, 5.0);
  Tensor gamma = Tensor::from_values({1}, {1.0});
  Tensor beta = Tensor::from_values({1}, {0.0});
  ops::BatchNormState state(1);
  Tensor out = ops::batch_norm(nullptr, x, gamma, beta, state, ops::BnMode::kTrain);
  for (int64_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == 0.0);

  // Mean-0 var-1 input passes through (up to the epsilon guard).
  Tensor x2 = Tensor::from_values({2, 1, 1, 1}, {-1.0, 1.0});
  ops::BatchNormState state2(1);
  Tensor out2 = ops::batch_norm(nullptr, x2, gamma, beta, state2, ops::BnMode::kTrain);
  CHECK(out2.at(0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(out2.at(1) == doctest::Approx(1.0).epsilon(1e-5));

  // Hand case x=[1,3]: mean 2, variance 1, so (x-2)/sqrt(1+1e-5).
  Tensor x3 = Tensor::from_values({2, 1, 1, 1}, {1.0, 3.0});
  ops::BatchNormState state3(1);
  Tensor out3 = ops::batch_norm(nullptr, x3, gamma, beta, state3, ops::BnMode::kTrain);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(out3.at(0) == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(out3.at(1) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("batch_norm running statistics and eval mode") {
  Tensor gamma = Tensor::from_values({1}, {1.0});
  Tensor beta = Tensor::from_values({1}, {0.0});
  ops::BatchNormState state(1);

  // Eval before any train step: initialized stats, warning emitted once.
  Tensor x = Tensor::from_values({2, 1, 1, 1}, {2.0, 4.0});
  Tensor out = ops::batch_norm(nullptr, x, gamma, beta, state, ops::BnMode::kEval);
  CHECK(out.at(0) == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(state.warned_uninitialized);

  // One train step folds batch stats in with momentum 0.9.
  ops::batch_norm(nullptr, x, gamma, beta, state, ops::BnMode::kTrain);
  CHECK(state.batches_seen == 1);
  CHECK(state.running_mean.at(0) == doctest::Approx(0.9 * 0.0 + 0.1 * 3.0).epsilon(1e-12));
  CHECK(state.running_var.at(0) == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0).epsilon(1e-12));

  // update_running=false leaves the buffers alone.
  ops::batch_norm(nullptr, x, gamma, beta, state, ops::BnMode::kTrain, false);
  CHECK(state.batches_seen == 1);
}

TEST_CASE("backward worked examples") {
  // loss = x^2 at x=3 -> gradient 6.
  ParamStore params;
  Tensor x = params.add("x", Tensor::scalar(3.0));
  Tape tape;
  Tensor loss = ops::mul(&tape, x, x);
  backward(tape, loss, params);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));

  // loss = sum(softmax(x)) -> gradient identically zero.
  ParamStore params2;
  Tensor y = params2.add("y", Tensor::from_values({2, 3}, {0.3, -1.2, 0.7, 2.0, 0.1, -0.4}));
  Tape tape2;
  Tensor loss2 = ops::sum(&tape2, ops::softmax_rows(&tape2, y));
  backward(tape2, loss2, params2);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(std::fabs(y.grad()[i]) < 1e-12);

  // Non-scalar loss violates the contract.
  Tape tape3;
  Tensor v = Tensor::zeros({3}, true);
  CHECK_THROWS_AS(tape3.backward(v), ContractError);

  // Unreached parameters receive exactly zero.
  ParamStore params3;
  Tensor a = params3.add("a", Tensor::scalar(1.0));
  Tensor b = params3.add("b", Tensor::scalar(2.0));
  Tape tape4;
  Tensor loss4 = ops::mul(&tape4, a, a);
  backward(tape4, loss4, params3);
  CHECK(b.grad()[0] == 0.0);
}

TEST_CASE("finite difference oracle self checks") {
  Tensor x = Tensor::scalar(3.0);
  auto loss = [&]() { return x.value() * x.value(); };
  auto g = t::finite_diff_gradient(loss, x);
  CHECK(std::fabs(g[0] - 6.0) < 1e-9);

  // Linear loss a*x recovers a (up to rounding of x +/- h).
  Tensor y = Tensor::scalar(0.7);
  auto lin = [&]() { return 2.5 * y.value(); };
  auto g2 = t::finite_diff_gradient(lin, y);
  CHECK(g2[0] == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("per-primitive gradients match finite differences") {
  Rng rng(1234);

  SUBCASE("matmul") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    check_op_gradients([&](Tape* t) { return ops::matmul(t, a, b); }, {a, b}, 1);
  }
  SUBCASE("matmul on batched input") {
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    check_op_gradients([&](Tape* t) { return ops::matmul(t, a, b); }, {a, b}, 2);
  }
  SUBCASE("transpose") {
    Tensor a = random_tensor({3, 5}, rng);
    check_op_gradients([&](Tape* t) { return ops::transpose(t, a); }, {a}, 3);
  }
  SUBCASE("bmm") {
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 4, 5}, rng);
    check_op_gradients([&](Tape* t) { return ops::bmm(t, a, b); }, {a, b}, 4);
  }
  SUBCASE("bmm_nt") {
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 5, 4}, rng);
    check_op_gradients([&](Tape* t) { return ops::bmm_nt(t, a, b); }, {a, b}, 5);
  }
  SUBCASE("graph_matmul") {
    Tensor adj = random_tensor({4, 4}, rng);
    Tensor x = random_tensor({2, 4, 3, 2}, rng);
    check_op_gradients([&](Tape* t) { return ops::graph_matmul(t, adj, x); }, {adj, x}, 6);
  }
  SUBCASE("softmax_rows") {
    Tensor x = random_tensor({4, 5}, rng);
    check_op_gradients([&](Tape* t) { return ops::softmax_rows(t, x); }, {x}, 7);
  }
  SUBCASE("relu away from kinks") {
    Tensor x = random_tensor({4, 4}, rng);
    for (int64_t i = 0; i < x.size(); ++i) {
      if (std::fabs(x.at(i)) < 1e-3) x.at(i) = 0.5;  // keep clear of the kink
    }
    check_op_gradients([&](Tape* t) { return ops::relu(t, x); }, {x}, 8);
  }
  SUBCASE("sigmoid") {
    Tensor x = random_tensor({3, 3}, rng);
    check_op_gradients([&](Tape* t) { return ops::sigmoid(t, x); }, {x}, 9);
  }
  SUBCASE("exp and log") {
    Tensor x = random_tensor({6}, rng, true, 0.2, 2.0);
    check_op_gradients([&](Tape* t) { return ops::exp(t, x); }, {x}, 10);
    check_op_gradients([&](Tape* t) { return ops::log(t, x); }, {x}, 11);
  }
  SUBCASE("add sub mul affine") {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    check_op_gradients([&](Tape* t) { return ops::add(t, a, b); }, {a, b}, 12);
    check_op_gradients([&](Tape* t) { return ops::sub(t, a, b); }, {a, b}, 13);
    check_op_gradients([&](Tape* t) { return ops::mul(t, a, b); }, {a, b}, 14);
    check_op_gradients([&](Tape* t) { return ops::affine(t, a, -1.7, 0.4); }, {a}, 15);
  }
  SUBCASE("add_bias") {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    check_op_gradients([&](Tape* t) { return ops::add_bias(t, x, b); }, {x, b}, 16);
  }
  SUBCASE("concat_last") {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 2}, rng);
    check_op_gradients([&](Tape* t) { return ops::concat_last(t, {a, b}); }, {a, b}, 17);
  }
  SUBCASE("reductions") {
    Tensor x = random_tensor({3, 4}, rng);
    check_op_gradients([&](Tape* t) { return ops::sum(t, x); }, {x}, 18);
    check_op_gradients([&](Tape* t) { return ops::mean(t, x); }, {x}, 19);
    check_op_gradients([&](Tape* t) { return ops::sum_squares(t, x); }, {x}, 20);
    Tensor y = random_tensor({2, 3, 4}, rng);
    check_op_gradients([&](Tape* t) { return ops::mean_axis1(t, y); }, {y}, 21);
  }
  SUBCASE("cosine_rows") {
    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({3, 5}, rng);
    check_op_gradients([&](Tape* t) { return ops::cosine_rows(t, a, b); }, {a, b}, 22);
    Tensor u = random_tensor({4}, rng);
    Tensor v = random_tensor({4}, rng);
    check_op_gradients([&](Tape* t) { return ops::cosine_rows(t, u, v); }, {u, v}, 23);
  }
  SUBCASE("convolutions") {
    Tensor x = random_tensor({7}, rng);
    Tensor k = random_tensor({3}, rng);
    check_op_gradients([&](Tape* t) { return ops::dilated_causal_conv(t, x, k, 2); }, {x, k}, 24);
    Tensor x4 = random_tensor({2, 3, 6, 2}, rng);
    Tensor k2 = random_tensor({2, 3}, rng);
    check_op_gradients([&](Tape* t) { return ops::causal_conv(t, x4, k2, 2); }, {x4, k2}, 25);
  }
  SUBCASE("batch_norm train and eval") {
    Tensor x = random_tensor({2, 3, 4, 2}, rng);
    Tensor gamma = random_tensor({2}, rng, true, 0.5, 1.5);
    Tensor beta = random_tensor({2}, rng);
    auto state = std::make_shared<ops::BatchNormState>(2);
    check_op_gradients(
        [&](Tape* t) {
          return ops::batch_norm(t, x, gamma, beta, *state, ops::BnMode::kTrain, false);
        },
        {x, gamma, beta}, 26);
    // Populate running stats, then check the eval path.
    ops::batch_norm(nullptr, x, gamma, beta, *state, ops::BnMode::kTrain);
    check_op_gradients(
        [&](Tape* t) { return ops::batch_norm(t, x, gamma, beta, *state, ops::BnMode::kEval); },
        {x, gamma, beta}, 27);
  }
  SUBCASE("dropout with fixed mask") {
    Tensor x = random_tensor({4, 4}, rng);
    check_op_gradients(
        [&](Tape* t) {
          Rng local(99);  // same mask on every evaluation
          return ops::dropout(t, x, 0.3, local, true);
        },
        {x}, 28);
  }
  SUBCASE("structural ops") {
    Tensor x = random_tensor({2, 3, 4}, rng);
    check_op_gradients([&](Tape* t) { return ops::gather_regions(t, x, {2, 0}); }, {x}, 29);
    Tensor y = random_tensor({2, 2, 4}, rng);
    check_op_gradients([&](Tape* t) { return ops::scatter_regions(t, y, {1, 3}, 5); }, {y}, 30);
    Tensor z = random_tensor({2, 3, 4, 2}, rng);
    check_op_gradients([&](Tape* t) { return ops::select_last_time(t, z); }, {z}, 31);
    check_op_gradients([&](Tape* t) { return ops::slice_last(t, z, 1); }, {z}, 32);
  }
}

TEST_CASE("dropout semantics") {
  Rng rng(5);
  Tensor x = random_tensor({100}, rng, false);

  Rng r1(42);
  Tensor eval_out = ops::dropout(nullptr, x, 0.5, r1, false);
  CHECK(eval_out.same_storage(x));  // eval mode is the identity

  Rng r2(42);
  Tensor zero_rate = ops::dropout(nullptr, x, 0.0, r2, true);
  CHECK(zero_rate.same_storage(x));

  Rng r3(42);
  Tensor dropped = ops::dropout(nullptr, x, 0.5, r3, true);
  int64_t zeros = 0;
  for (int64_t i = 0; i < dropped.size(); ++i) {
    if (dropped.at(i) == 0.0) {
      ++zeros;
    } else {
      CHECK(dropped.at(i) == doctest::Approx(2.0 * x.at(i)).epsilon(1e-12));
    }
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);

  // Same seed, same mask.
  Rng r4(42);
  Tensor again = ops::dropout(nullptr, x, 0.5, r4, true);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(again.at(i) == dropped.at(i));

  CHECK_THROWS_AS(ops::dropout(nullptr, x, 1.0, r4, true), ConfigError);
}

TEST_CASE("forward determinism is bit exact") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);
    Tape tape;
    Tensor out = ops::softmax_rows(&tape, ops::matmul(&tape, ops::relu(&tape, a), b));
    Tensor loss = ops::sum(&tape, out);
    tape.backward(loss);
    std::vector<double> result(out.data(), out.data() + out.size());
    result.insert(result.end(), a.grad(), a.grad() + a.size());
    return result;
  };
  const auto r1 = run(31), r2 = run(31);
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("tape nonfinite diagnostics") {
  Tape tape;
  Tensor x = Tensor::from_values({2}, {-1.0, 0.5}, true);
  Tensor bad = ops::log(&tape, x);  // log of negative -> NaN
  Tensor loss = ops::sum(&tape, bad);
  (void)loss;
  CHECK(tape.first_nonfinite() == std::string("log"));
}

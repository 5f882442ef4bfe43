#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "poselift/optim.hpp"
#include "poselift/rng.hpp"
#include "poselift/tensor.hpp"

using namespace poselift;

namespace {

Tensor rand_tensor(std::vector<int64_t> shape, SplitMix64& rng, double lo = -1.0,
                   double hi = 1.0) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

// Inputs bounded away from zero, for kinked ops (relu, abs).
Tensor rand_tensor_off_zero(std::vector<int64_t> shape, SplitMix64& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) {
    double u = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -u : u;
  }
  return t;
}

}  // namespace

TEST(tensor, construction_and_access) {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_DOUBLE_EQ(t.at({1, 2}), 6.0);
  EXPECT_DOUBLE_EQ(t.at({0, 1}), 2.0);
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), shape_error);
}

TEST(tensor, add_broadcast_matches_loop) {
  SplitMix64 rng(7);
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor b = rand_tensor({4}, rng);
  Tensor c = add(a, b);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t k = 0; k < 4; ++k)
        EXPECT_DOUBLE_EQ(c.at({i, j, k}), a.at({i, j, k}) + b.at({k}));
}

TEST(tensor, mul_broadcast_middle_axis) {
  SplitMix64 rng(8);
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor g = rand_tensor({2, 1, 4}, rng);
  Tensor c = mul(a, g);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t k = 0; k < 4; ++k)
        EXPECT_DOUBLE_EQ(c.at({i, j, k}), a.at({i, j, k}) * g.at({i, 0, k}));
}

TEST(tensor, broadcast_shape_mismatch_throws) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4});
  EXPECT_THROW(add(a, b), shape_error);
}

TEST(tensor, matmul_known_values) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  EXPECT_DOUBLE_EQ(c.at({0, 0}), 19.0);
  EXPECT_DOUBLE_EQ(c.at({0, 1}), 22.0);
  EXPECT_DOUBLE_EQ(c.at({1, 0}), 43.0);
  EXPECT_DOUBLE_EQ(c.at({1, 1}), 50.0);
}

TEST(tensor, matmul_broadcasts_rank2_over_batch) {
  SplitMix64 rng(9);
  Tensor m = rand_tensor({3, 3}, rng);
  Tensor x = rand_tensor({2, 3, 4}, rng);
  Tensor y = matmul(m, x);
  ASSERT_EQ(y.shape(), (std::vector<int64_t>{2, 3, 4}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < 3; ++k) acc += m.at({i, k}) * x.at({b, k, j});
        EXPECT_NEAR(y.at({b, i, j}), acc, 1e-15);
      }
}

TEST(tensor, matmul_shape_errors_name_operands) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    EXPECT_NE(std::string(e.what()).find("(2,3)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(4,2)"), std::string::npos);
  }
}

TEST(tensor, transpose_and_concat_and_slice) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = transpose(a);
  EXPECT_EQ(t.shape(), (std::vector<int64_t>{3, 2}));
  EXPECT_DOUBLE_EQ(t.at({2, 0}), 3.0);
  EXPECT_DOUBLE_EQ(t.at({1, 1}), 5.0);

  Tensor b = Tensor::from_data({2, 1}, {7, 8});
  Tensor c = concat({a, b});
  EXPECT_EQ(c.shape(), (std::vector<int64_t>{2, 4}));
  EXPECT_DOUBLE_EQ(c.at({0, 3}), 7.0);
  EXPECT_DOUBLE_EQ(c.at({1, 3}), 8.0);

  Tensor s = slice_last(c, 1, 2);
  EXPECT_EQ(s.shape(), (std::vector<int64_t>{2, 2}));
  EXPECT_DOUBLE_EQ(s.at({0, 0}), 2.0);
  EXPECT_DOUBLE_EQ(s.at({1, 1}), 6.0);
}

TEST(tensor, reductions) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_DOUBLE_EQ(sum_all(a).item(), 21.0);
  EXPECT_DOUBLE_EQ(mean_all(a).item(), 3.5);
  Tensor s0 = sum_axis(a, 0, true);
  EXPECT_EQ(s0.shape(), (std::vector<int64_t>{1, 3}));
  EXPECT_DOUBLE_EQ(s0.at({0, 0}), 5.0);
  Tensor s1 = sum_axis(a, 1, false);
  EXPECT_EQ(s1.shape(), (std::vector<int64_t>{2}));
  EXPECT_DOUBLE_EQ(s1.at({1}), 15.0);
}

// Spec example: f(x) = sum(x^2) has analytic gradient 2x.
TEST(grad, sum_of_squares_analytic) {
  SplitMix64 rng(11);
  Tensor x = rand_tensor({3, 4}, rng);
  double err = grad_check(
      [](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[0])); },
      {x});
  EXPECT_LT(err, 1e-8);

  Tensor y = rand_tensor({5}, rng);
  y.set_requires_grad(true);
  Tensor loss = sum_all(mul(y, y));
  loss.backward();
  for (size_t i = 0; i < 5; ++i)
    EXPECT_NEAR(y.grad()[i], 2.0 * y.data()[i], 1e-12);
}

// Spec example: matmul-relu-sum composite, 4x5 * 5x3.
TEST(grad, matmul_relu_sum_composite) {
  SplitMix64 rng(12);
  Tensor a = rand_tensor({4, 5}, rng);
  Tensor b = rand_tensor({5, 3}, rng);
  double err = grad_check(
      [](const std::vector<Tensor>& in) {
        return sum_all(relu(matmul(in[0], in[1])));
      },
      {a, b});
  EXPECT_LT(err, 1e-6);
}

TEST(grad, elementwise_ops_three_shapes) {
  SplitMix64 rng(13);
  std::vector<std::vector<int64_t>> shapes{{3}, {2, 3}, {2, 3, 4}};
  for (const auto& shape : shapes) {
    Tensor a = rand_tensor_off_zero(shape, rng);
    Tensor b = rand_tensor_off_zero(shape, rng);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(add(in[0], in[1]));
              }, {a, b}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(sub(in[0], in[1]));
              }, {a, b}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(mul(in[0], in[1]));
              }, {a, b}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(div(in[0], in[1]));
              }, {a, b}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(relu(in[0]));
              }, {a}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(sigmoid(in[0]));
              }, {a}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(abs(in[0]));
              }, {a}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(scale(in[0], 2.5));
              }, {a}), 1e-6);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return mean_all(shift(in[0], 0.7));
              }, {a}), 1e-6);
    Tensor pos = rand_tensor(shape, rng, 0.5, 2.0);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(sqrt(in[0]));
              }, {pos}), 1e-6);
  }
}

TEST(grad, broadcast_paths) {
  SplitMix64 rng(14);
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor b = rand_tensor({4}, rng);
  Tensor c = rand_tensor({2, 1, 4}, rng);
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              return sum_all(mul(add(in[0], in[1]), in[2]));
            }, {a, b, c}), 1e-6);
}

TEST(grad, matmul_three_shapes) {
  SplitMix64 rng(15);
  struct Case { std::vector<int64_t> a, b; };
  std::vector<Case> cases{
      {{4, 5}, {5, 3}},
      {{2, 3, 4}, {4, 2}},     // batched x rank-2
      {{3, 4}, {2, 4, 5}},     // rank-2 x batched
      {{2, 2, 3}, {2, 3, 2}},  // batched x batched
  };
  for (const auto& cs : cases) {
    Tensor a = rand_tensor(cs.a, rng);
    Tensor b = rand_tensor(cs.b, rng);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum_all(matmul(in[0], in[1]));
              }, {a, b}), 1e-6);
  }
}

TEST(grad, structural_ops) {
  SplitMix64 rng(16);
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor b = rand_tensor({2, 3, 2}, rng);
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              return sum_all(mul(transpose(in[0]), transpose(in[0])));
            }, {a}), 1e-6);
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              return sum_all(mul(reshape(in[0], {6, 4}), reshape(in[0], {6, 4})));
            }, {a}), 1e-6);
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              Tensor c = concat({in[0], in[1]});
              return sum_all(mul(c, c));
            }, {a, b}), 1e-6);
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              Tensor s = slice_last(in[0], 1, 2);
              return sum_all(mul(s, s));
            }, {a}), 1e-6);
  for (int64_t axis = 0; axis < 3; ++axis) {
    EXPECT_LT(grad_check([axis](const std::vector<Tensor>& in) {
                Tensor s = sum_axis(in[0], axis, true);
                return sum_all(mul(s, s));
              }, {a}), 1e-6);
  }
  EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
              Tensor m = mean_axis(in[0], 1, true);
              return sum_all(mul(m, m));
            }, {a}), 1e-6);
}

TEST(grad, dropout_with_fixed_mask) {
  SplitMix64 rng(17);
  Tensor a = rand_tensor({3, 4}, rng);
  // Rebuild the rng inside f so FD re-evaluations see the same mask.
  double err = grad_check(
      [](const std::vector<Tensor>& in) {
        SplitMix64 drop_rng(99);
        return sum_all(dropout(in[0], 0.4, Mode::train, drop_rng));
      },
      {a});
  EXPECT_LT(err, 1e-6);
}

TEST(tensor, dropout_mask_determinism_and_eval_identity) {
  SplitMix64 rng(18);
  Tensor a = rand_tensor({100}, rng);
  SplitMix64 r1(5), r2(5), r3(6);
  Tensor d1 = dropout(a, 0.3, Mode::train, r1);
  Tensor d2 = dropout(a, 0.3, Mode::train, r2);
  Tensor d3 = dropout(a, 0.3, Mode::train, r3);
  EXPECT_EQ(d1.data(), d2.data());
  EXPECT_NE(d1.data(), d3.data());
  // Inverted scaling: surviving entries are x / (1-p).
  int dropped = 0;
  for (size_t i = 0; i < 100; ++i) {
    if (d1.data()[i] == 0.0) {
      ++dropped;
    } else {
      EXPECT_NEAR(d1.data()[i], a.data()[i] / 0.7, 1e-15);
    }
  }
  EXPECT_GT(dropped, 0);

  SplitMix64 r4(7);
  Tensor e = dropout(a, 0.3, Mode::eval, r4);
  EXPECT_EQ(e.node(), a.node());
}

TEST(grad, backward_twice_doubles_gradients) {
  SplitMix64 rng(19);
  Tensor x = rand_tensor({4}, rng);
  x.set_requires_grad(true);
  Tensor w = rand_tensor({4}, rng);
  w.set_requires_grad(true);
  Tensor loss = sum_all(mul(sigmoid(mul(x, w)), x));
  loss.backward();
  std::vector<double> once_x = x.grad();
  std::vector<double> once_w = w.grad();
  loss.backward();
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * once_x[i]);
    EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * once_w[i]);
  }
}

TEST(tensor, batchnorm_train_normalizes_and_updates_running_stats) {
  SplitMix64 rng(20);
  Tensor x = rand_tensor({4, 5, 3}, rng, -2.0, 3.0);
  BatchNormState bn = BatchNormState::init(3);
  Tensor y = batchnorm(x, bn, Mode::train);
  // Per-channel mean ~0, var ~1 over the 20 rows.
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t n = 0; n < 5; ++n) mean += y.at({b, n, c});
    mean /= 20.0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t n = 0; n < 5; ++n) {
        double d = y.at({b, n, c}) - mean;
        var += d * d;
      }
    var /= 20.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps shifts it slightly below 1
  }
  // Momentum 0.1 moves running stats toward batch stats.
  for (int64_t c = 0; c < 3; ++c) {
    double batch_mean = 0.0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t n = 0; n < 5; ++n) batch_mean += x.at({b, n, c});
    batch_mean /= 20.0;
    EXPECT_NEAR(bn.running_mean.data()[static_cast<size_t>(c)], 0.1 * batch_mean,
                1e-12);
  }
}

TEST(tensor, batchnorm_eval_uses_running_stats) {
  Tensor x = Tensor::from_data({1, 2, 1}, {3.0, 5.0});
  BatchNormState bn = BatchNormState::init(1);
  bn.running_mean.data()[0] = 1.0;
  bn.running_var.data()[0] = 4.0;
  Tensor y = batchnorm(x, bn, Mode::eval, 0.1, 0.0);
  EXPECT_NEAR(y.at({0, 0, 0}), (3.0 - 1.0) / 2.0, 1e-12);
  EXPECT_NEAR(y.at({0, 1, 0}), (5.0 - 1.0) / 2.0, 1e-12);
}

TEST(grad, batchnorm_both_modes) {
  SplitMix64 rng(21);
  Tensor x = rand_tensor({3, 4, 2}, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    Tensor xin = Tensor::from_data(x.shape(), x.data());
    Tensor gamma = rand_tensor({2}, rng, 0.5, 1.5);
    Tensor beta = rand_tensor({2}, rng);
    double err = grad_check(
        [mode, &gamma, &beta](const std::vector<Tensor>& in) {
          BatchNormState bn = BatchNormState::init(2);
          bn.gamma = in[1];
          bn.beta = in[2];
          bn.running_mean.data() = {0.3, -0.2};
          bn.running_var.data() = {1.5, 0.8};
          Tensor y = batchnorm(in[0], bn, mode);
          return sum_all(mul(y, y));
        },
        {xin, gamma, beta});
    EXPECT_LT(err, 1e-5) << "mode " << (mode == Mode::train ? "train" : "eval");
  }
}

TEST(adam, zero_gradient_leaves_params_unchanged) {
  SplitMix64 rng(22);
  Tensor w = rand_tensor({5}, rng);
  std::vector<double> before = w.data();
  std::vector<Tensor> params{w};
  AdamState st = AdamState::init(params);
  w.zero_grad();
  adam_step(params, st, 0.1);
  EXPECT_EQ(w.data(), before);
}

TEST(adam, first_step_is_signed_lr) {
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5});
  std::vector<double> before = w.data();
  std::vector<Tensor> params{w};
  AdamState st = AdamState::init(params);
  w.grad_mut() = {2.0, -3.0, 0.5};
  double lr = 0.01;
  adam_step(params, st, lr);
  // First bias-corrected step is -lr * g/(|g| + eps) ~= -lr * sign(g).
  EXPECT_NEAR(w.data()[0] - before[0], -lr, lr * 1e-6);
  EXPECT_NEAR(w.data()[1] - before[1], lr, lr * 1e-6);
  EXPECT_NEAR(w.data()[2] - before[2], -lr, lr * 1e-6);
}

TEST(adam, quadratic_bowl_converges) {
  SplitMix64 rng(23);
  Tensor w = rand_tensor({6}, rng);
  w.set_requires_grad(true);
  std::vector<Tensor> params{w};
  AdamState st = AdamState::init(params);
  double loss_val = 0.0;
  int steps = 0;
  for (; steps < 500; ++steps) {
    w.zero_grad();
    Tensor loss = sum_all(mul(w, w));
    loss.backward();
    adam_step(params, st, 0.05);
    loss_val = sum_all(mul(w, w)).item();
    if (loss_val < 1e-6) break;
  }
  EXPECT_LT(loss_val, 1e-6) << "after " << steps << " steps";
}

TEST(tensor, deterministic_forward_backward_with_seed) {
  auto run = [](uint64_t seed) {
    SplitMix64 rng(seed);
    Tensor x = rand_tensor({4, 3}, rng);
    Tensor w = rand_tensor({3, 2}, rng);
    w.set_requires_grad(true);
    SplitMix64 drop(seed ^ 0xabc);
    Tensor y = dropout(relu(matmul(x, w)), 0.2, Mode::train, drop);
    Tensor loss = sum_all(mul(y, y));
    loss.backward();
    std::vector<double> out = loss.data();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(42), run(42));
  EXPECT_NE(run(42), run(43));
}

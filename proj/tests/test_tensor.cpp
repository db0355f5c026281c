#include <doctest.h>

#include <cmath>

#include "cxr/graph.hpp"
#include "test_helpers.hpp"

using namespace cxr;
using test_util::random_tensor;

TEST_CASE("conv2d matches hand cross-correlation") {
  Graph g;
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor out = g.conv2d(g.var(x), g.var(k), g.var(b), 1, 0);
  REQUIRE(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out.values() == std::vector<double>{12, 16, 24, 28});
}

TEST_CASE("conv2d identity and zero kernels") {
  Graph g;
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor kid({1, 1, 1, 1}, {1.0});
  Tensor out = g.conv2d(g.var(x), g.var(kid), 1, 0);
  CHECK(out.values() == x.values());

  Tensor kz = Tensor::zeros({1, 1, 2, 2});
  Tensor zero_out = g.conv2d(g.var(x), g.var(kz), 1, 0);
  REQUIRE(zero_out.shape() == Shape{1, 1, 2, 2});
  for (double v : zero_out.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d stride and padding geometry") {
  Graph g;
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 7, 6}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  Tensor out = g.conv2d(g.var(x), g.var(k), 2, 1);
  // H' = floor((7 + 2 - 3)/2) + 1 = 4, W' = floor((6 + 2 - 3)/2) + 1 = 3
  CHECK(out.shape() == Shape{2, 4, 4, 3});
}

TEST_CASE("conv2d rejects bad arguments") {
  Graph g;
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor k = Tensor::zeros({1, 3, 2, 2});  // channel mismatch
  CHECK_THROWS_AS(g.conv2d(g.var(x), g.var(k), 1, 0), ShapeError);

  Tensor k2 = Tensor::zeros({1, 2, 2, 2});
  CHECK_THROWS_AS(g.conv2d(g.var(x), g.var(k2), 0, 0), InvalidArgument);

  Tensor huge = Tensor::zeros({1, 2, 6, 6});  // kernel larger than padded input
  CHECK_THROWS_AS(g.conv2d(g.var(x), g.var(huge), 1, 0), ShapeError);

  Tensor unrecorded = Tensor::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(g.conv2d(unrecorded, g.var(k2), 1, 0), NoGraphError);
}

TEST_CASE("global average pooling") {
  Graph g;
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(g.global_avg_pool(g.var(x)).values()[0] == doctest::Approx(2.5));

  Tensor c = Tensor::full({1, 1, 3, 5}, 7.25);
  CHECK(g.global_avg_pool(g.var(c)).values()[0] == doctest::Approx(7.25));

  Tensor two({1, 2, 2, 2}, {0, 0, 0, 0, 2, 2, 2, 2});
  Tensor out = g.global_avg_pool(g.var(two));
  CHECK(out.values() == std::vector<double>{0.0, 2.0});
}

TEST_CASE("backward: square, linearity, conv kernel gradient") {
  SUBCASE("x*x at 3") {
    Graph g;
    Tensor x = Tensor::scalar(3.0);
    Tensor xr = g.var(x);
    Tensor loss = g.mul(xr, xr);
    g.backward(loss);
    CHECK(g.grad(x)[0] == doctest::Approx(6.0));
  }
  SUBCASE("sum(a+b) gives all-ones gradients") {
    Graph g;
    Rng rng(3);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    Tensor loss = g.sum(g.add(g.var(a), g.var(b)));
    g.backward(loss);
    for (double v : g.grad(a)) CHECK(v == 1.0);
    for (double v : g.grad(b)) CHECK(v == 1.0);
  }
  SUBCASE("kernel gradient equals the sum of touched inputs") {
    Graph g;
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor loss = g.sum(g.conv2d(g.var(x), g.var(k), 1, 0));
    g.backward(loss);
    CHECK(g.grad(k) == std::vector<double>{12, 16, 24, 28});
  }
}

TEST_CASE("backward rejects non-scalars and foreign tensors") {
  Graph g;
  Tensor x({2}, {1.0, 2.0});
  Tensor xr = g.var(x);
  CHECK_THROWS_AS(g.backward(xr), InvalidArgument);

  Graph other;
  Tensor y = Tensor::scalar(1.0);
  Tensor yr = other.var(y);
  Tensor loss = other.sum(yr);
  CHECK_THROWS_AS(g.backward(loss), NoGraphError);
  CHECK_THROWS_AS(g.grad(y), NoGraphError);
}

TEST_CASE("gradient accumulation across two consumers") {
  Rng rng(17);
  Tensor base = random_tensor({3, 2}, rng);

  auto square_grad = [&] {
    Tensor x(base.shape(), base.values());
    Graph g;
    Tensor xr = g.var(x);
    g.backward(g.sum(g.mul(xr, xr)));
    return g.grad(x);
  }();
  auto relu_grad = [&] {
    Tensor x(base.shape(), base.values());
    Graph g;
    Tensor xr = g.var(x);
    g.backward(g.sum(g.relu(xr)));
    return g.grad(x);
  }();

  Tensor x(base.shape(), base.values());
  Graph g;
  Tensor xr = g.var(x);
  Tensor loss = g.add(g.sum(g.mul(xr, xr)), g.sum(g.relu(xr)));
  g.backward(loss);
  const auto& both = g.grad(x);
  for (std::size_t i = 0; i < both.size(); ++i) {
    CHECK(both[i] == doctest::Approx(square_grad[i] + relu_grad[i]));
  }
}

TEST_CASE("sigmoid stays inside (0,1) for extreme finite inputs") {
  Graph g;
  Tensor x({6}, {-1e308, -800.0, -36.0, 36.0, 800.0, 1e308});
  Tensor s = g.sigmoid(g.var(x));
  for (double v : s.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("relu is elementwise max(0,x)") {
  Graph g;
  Tensor x({4}, {-2.0, -0.0, 0.5, 3.0});
  CHECK(g.relu(g.var(x)).values() == std::vector<double>{0.0, 0.0, 0.5, 3.0});
}

TEST_CASE("channel concatenation keeps both operands bit-identical") {
  Graph g;
  Rng rng(5);
  Tensor a = random_tensor({2, 3, 4, 4}, rng);
  Tensor b = random_tensor({2, 2, 4, 4}, rng);
  Tensor cat = g.concat_channels(g.var(a), g.var(b));
  REQUIRE(cat.shape() == Shape{2, 5, 4, 4});
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 5; ++c) {
      const Tensor& src = c < 3 ? a : b;
      const int sc = c < 3 ? c : c - 3;
      for (int i = 0; i < 16; ++i) {
        CHECK(cat.values()[(n * 5 + c) * 16 + i] ==
              src.values()[(n * (c < 3 ? 3 : 2) + sc) * 16 + i]);
      }
    }
  }
}

TEST_CASE("dropout: evaluation identity, training preserves the mean") {
  Tensor x = Tensor::full({10000}, 1.0);
  Graph g;
  Tensor xr = g.var(x);
  Tensor eval_out = g.dropout(xr, 0.3, false);
  CHECK(eval_out.values() == x.values());
  CHECK(eval_out.node() == xr.node());  // true identity, no new op

  Graph gt(99);
  Tensor train_out = gt.dropout(gt.var(x), 0.3, true);
  double mean = 0.0;
  int zeros = 0;
  for (double v : train_out.values()) {
    mean += v;
    zeros += v == 0.0;
  }
  mean /= static_cast<double>(train_out.size());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
  CHECK(zeros > 2500);
  CHECK(zeros < 3500);

  CHECK_THROWS_AS(gt.dropout(gt.var(x), 1.0, true), InvalidArgument);
}

TEST_CASE("finite differences accept a linear function") {
  Tensor theta = Tensor::scalar(2.0);
  auto loss_fn = [&](Graph& g) {
    Tensor c = Tensor::scalar(3.0);
    return g.mul(g.var(theta), g.input(c));
  };
  FdReport report = finite_difference_check(loss_fn, {&theta}, {"theta"}, 1e-5, 1e-10);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-10);
}

TEST_CASE("finite differences validate a small conv net and catch a planted fault") {
  Rng rng(1234);
  Tensor input = random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0);
  Tensor k1 = random_tensor({3, 1, 3, 3}, rng, -0.5, 0.5);
  Tensor k2 = random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5);
  Tensor w = random_tensor({2, 2}, rng, -0.5, 0.5);
  Tensor b = random_tensor({2}, rng, -0.1, 0.1);

  auto net = [&](Graph& g, bool fault) {
    Tensor h = g.conv2d(g.input(input), g.var(k1), 1, 1);
    h = g.relu(h);
    if (fault) h = g.scale_gradient(h, 2.0);  // wrong backward for k1 only
    h = g.conv2d(h, g.var(k2), 1, 1);
    h = g.global_avg_pool(h);
    h = g.linear(h, g.var(w), g.var(b));
    return g.sum(g.sigmoid(h));
  };

  auto clean = [&](Graph& g) { return net(g, false); };
  FdReport ok = finite_difference_check(clean, {&k1, &k2, &w, &b},
                                        {"k1", "k2", "w", "b"}, 1e-5, 1e-4);
  CHECK(ok.pass);

  auto faulty = [&](Graph& g) { return net(g, true); };
  FdReport bad = finite_difference_check(faulty, {&k1, &k2, &w, &b},
                                         {"k1", "k2", "w", "b"}, 1e-5, 1e-4);
  CHECK_FALSE(bad.pass);
  CHECK_FALSE(bad.entries[0].pass);  // k1 sits upstream of the fault
  CHECK(bad.entries[1].pass);        // k2 and the head are untouched
  CHECK(bad.entries[2].pass);
  CHECK(bad.entries[3].pass);
}

TEST_CASE("finite differences report non-finite probes") {
  Tensor theta = Tensor::scalar(700.0);
  auto loss_fn = [&](Graph& g) {
    // exp-like blow-up: sigmoid stays finite, so build overflow by squaring
    Tensor t = g.var(theta);
    Tensor u = g.mul(t, t);
    for (int i = 0; i < 6; ++i) u = g.mul(u, u);
    return u;
  };
  CHECK_THROWS_AS(
      finite_difference_check(loss_fn, {&theta}, {"theta"}, 1e-5, 1e-4),
      NumericError);
}

// Every differentiable primitive, gradient-checked on randomized shapes.
// The acceptance suite runs the full >=20-shape sweep; this is the fast
// per-commit version.
TEST_CASE("primitive gradient spot checks") {
  Rng rng(2024);
  const double h = 1e-5, tol = 1e-4;

  for (int round = 0; round < 5; ++round) {
    const int n = 1 + static_cast<int>(rng.below(2));
    const int ci = 1 + static_cast<int>(rng.below(3));
    const int co = 1 + static_cast<int>(rng.below(3));
    const int sz = 4 + 2 * static_cast<int>(rng.below(3));

    SUBCASE("") {}  // keep doctest happy about loop subcases

    {
      Tensor x = random_tensor({n, ci, sz, sz}, rng);
      Tensor k = random_tensor({co, ci, 3, 3}, rng, -0.4, 0.4);
      Tensor b = random_tensor({co}, rng, -0.2, 0.2);
      auto fn = [&](Graph& g) {
        return g.sum(g.sigmoid(g.conv2d(g.var(x), g.var(k), g.var(b), 1, 1)));
      };
      CHECK(finite_difference_check(fn, {&x, &k, &b}, {"x", "k", "b"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({n, ci, sz, sz}, rng);
      Tensor k1 = random_tensor({co, ci, 1, 1}, rng, -0.6, 0.6);
      auto fn = [&](Graph& g) {
        Tensor y = g.conv2d(g.var(x), g.var(k1), 1, 0);
        return g.sum(g.mul(y, y));
      };
      CHECK(finite_difference_check(fn, {&x, &k1}, {"x", "k1"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({n, ci, sz, sz}, rng);
      auto fn = [&](Graph& g) {
        Tensor y = g.avg_pool2d(g.var(x), 2, 2);
        return g.sum(g.mul(y, y));
      };
      CHECK(finite_difference_check(fn, {&x}, {"x"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({n, ci, sz, sz}, rng);
      auto fn = [&](Graph& g) {
        Tensor y = g.global_avg_pool(g.relu(g.var(x)));
        return g.sum(g.mul(y, y));
      };
      CHECK(finite_difference_check(fn, {&x}, {"x"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({n, 4}, rng);
      Tensor w = random_tensor({4, 3}, rng);
      Tensor b = random_tensor({3}, rng);
      auto fn = [&](Graph& g) {
        return g.sum(g.sigmoid(g.linear(g.var(x), g.var(w), g.var(b))));
      };
      CHECK(finite_difference_check(fn, {&x, &w, &b}, {"x", "w", "b"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({2, ci, sz, sz}, rng);
      Tensor gamma = random_tensor({ci}, rng, 0.5, 1.5);
      Tensor beta = random_tensor({ci}, rng, -0.3, 0.3);
      // project onto a fixed random direction: sum(y*y) is nearly invariant
      // to the batch statistics and would leave a ~zero gradient to compare
      Tensor proj = random_tensor({2, ci, sz, sz}, rng);
      std::vector<double> rm(static_cast<std::size_t>(ci), 0.0);
      std::vector<double> rv(static_cast<std::size_t>(ci), 1.0);
      auto fn = [&](Graph& g) {
        Tensor y = g.batch_norm(g.var(x), g.var(gamma), g.var(beta), &rm, &rv, true);
        return g.sum(g.mul(g.sigmoid(y), g.input(proj)));
      };
      CHECK(finite_difference_check(fn, {&x, &gamma, &beta}, {"x", "gamma", "beta"}, h, tol)
                .pass);
    }
    {
      Tensor a = random_tensor({n, ci, sz, sz}, rng);
      Tensor b = random_tensor({n, co, sz, sz}, rng);
      auto fn = [&](Graph& g) {
        Tensor y = g.concat_channels(g.var(a), g.var(b));
        return g.sum(g.mul(y, y));
      };
      CHECK(finite_difference_check(fn, {&a, &b}, {"a", "b"}, h, tol).pass);
    }
    {
      Tensor x = random_tensor({n, 6}, rng);
      auto fn = [&](Graph& g) {
        Tensor y = g.dropout(g.var(x), 0.4, true);  // mask pinned by graph seed
        return g.sum(g.mul(y, y));
      };
      CHECK(finite_difference_check(fn, {&x}, {"x"}, h, tol, 42).pass);
    }
  }
}

TEST_CASE("batch norm evaluation mode uses running statistics") {
  Tensor x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor gamma = Tensor::full({1}, 2.0);
  Tensor beta = Tensor::full({1}, 0.5);
  std::vector<double> rm{1.0};
  std::vector<double> rv{4.0};
  Graph g;
  Tensor y = g.batch_norm(g.var(x), g.var(gamma), g.var(beta), &rm, &rv, false);
  // (x - 1)/sqrt(4 + 1e-5) * 2 + 0.5
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  for (int i = 0; i < 4; ++i) {
    CHECK(y.values()[i] == doctest::Approx((x.values()[i] - 1.0) * inv * 2.0 + 0.5));
  }
  CHECK(rm[0] == 1.0);  // evaluation never touches the buffers
  CHECK(rv[0] == 4.0);
}

TEST_CASE("batch norm training mode updates running statistics") {
  Tensor x({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  Tensor gamma = Tensor::full({1}, 1.0);
  Tensor beta = Tensor::zeros({1});
  std::vector<double> rm{0.0};
  std::vector<double> rv{1.0};
  Graph g;
  g.batch_norm(g.var(x), g.var(gamma), g.var(beta), &rm, &rv, true);
  CHECK(rm[0] == doctest::Approx(0.1 * 2.5));          // 0.9*0 + 0.1*mean
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 1.25));   // population variance 1.25
}

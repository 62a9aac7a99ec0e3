#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eagle/autograd.hpp"
#include "test_util.hpp"

using namespace eagle;
using nn::Graph;
using nn::Param;

namespace {

// FD check of a single op: loss = sum of squared outputs, so default-seeded
// output grads are exercised through a nontrivial downstream function.
template <typename BuildFn>
double fd_check_op(Shape in_shape, BuildFn build, std::uint64_t seed = 7, double step = 1e-5) {
  Rng rng(seed);
  Param<double> p("x", test::random_tensor(in_shape, rng));
  auto forward = [&]() {
    Graph<double> g;
    auto* x = g.param(p);
    auto* y = build(g, x);
    auto* loss = g.mse_mean(y, g.constant(Tensor<double>(y->value.shape)));
    return g.value(loss)[0];
  };
  auto backward = [&]() {
    Graph<double> g;
    auto* x = g.param(p);
    auto* y = build(g, x);
    auto* loss = g.mse_mean(y, g.constant(Tensor<double>(y->value.shape)));
    g.backward(loss);
  };
  return test::check_param_gradients(forward, backward, {&p}, step);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) { return g.relu(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) { return g.sigmoid(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) { return g.tanh_(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) { return g.one_minus(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) { return g.scale(x, 1.7); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) {
          return g.mul(x, g.sigmoid(x));
        }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) {
          return g.add(g.tanh_(x), g.scale(x, 0.5));
        }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3}, [](Graph<double>& g, auto* x) {
          return g.sub(x, g.sigmoid(x));
        }) < 1e-6);
}

TEST_CASE("minimum routes values and gradients to the smaller operand") {
  Rng rng(17);
  Param<double> a("a", test::random_tensor(Shape{3, 4}, rng));
  Param<double> b("b", test::random_tensor(Shape{3, 4}, rng));
  {
    Graph<double> g;
    auto* m = g.minimum(g.param(a), g.param(b));
    for (std::size_t i = 0; i < m->value.numel(); ++i)
      CHECK(m->value[i] == std::min(a.value[i], b.value[i]));
  }
  auto run = [&](bool do_back) {
    Graph<double> g;
    auto* m = g.minimum(g.tanh_(g.param(a)), g.sigmoid(g.param(b)));
    auto* loss = g.mean_all(m);
    if (do_back) g.backward(loss);
    return g.value(loss)[0];
  };
  double worst = test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&a, &b});
  CHECK(worst < 1e-6);
}

TEST_CASE("broadcast_mul matches finite differences on both args") {
  Rng rng(3);
  Param<double> x("x", test::random_tensor(Shape{2, 4, 3, 3}, rng));
  Param<double> m("m", test::random_tensor(Shape{2, 1, 3, 3}, rng));
  auto run = [&](bool do_back) {
    Graph<double> g;
    auto* xn = g.param(x);
    auto* mn = g.param(m);
    auto* y = g.broadcast_mul(g.tanh_(xn), g.sigmoid(mn));
    auto* loss = g.mse_mean(y, g.constant(Tensor<double>(y->value.shape)));
    if (do_back) g.backward(loss);
    return g.value(loss)[0];
  };
  double worst = test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &m});
  CHECK(worst < 1e-6);
}

TEST_CASE("linear matches finite differences") {
  Rng rng(11);
  Param<double> x("x", test::random_tensor(Shape{3, 5}, rng));
  Param<double> w("w", test::random_tensor(Shape{4, 5}, rng));
  Param<double> b("b", test::random_tensor(Shape{4}, rng));
  auto run = [&](bool back) {
    Graph<double> g;
    auto* y = g.linear(g.param(x), g.param(w), g.param(b));
    auto* loss = g.mse_mean(g.tanh_(y), g.constant(Tensor<double>(Shape{3, 4})));
    if (back) g.backward(loss);
    return g.value(loss)[0];
  };
  CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &w, &b}) < 1e-6);
}

TEST_CASE("conv2d matches finite differences for strides 1 and 2") {
  for (int stride : {1, 2}) {
    Rng rng(stride);
    Param<double> x("x", test::random_tensor(Shape{2, 3, 6, 6}, rng));
    Param<double> w("w", test::random_tensor(Shape{4, 3, 3, 3}, rng, -0.5, 0.5));
    Param<double> b("b", test::random_tensor(Shape{4}, rng));
    auto run = [&](bool back) {
      Graph<double> g;
      auto* y = g.conv2d(g.param(x), g.param(w), g.param(b), stride, 1);
      auto* loss = g.mse_mean(g.relu(y), g.constant(Tensor<double>(y->value.shape)));
      if (back) g.backward(loss);
      return g.value(loss)[0];
    };
    CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &w, &b}) < 1e-6);
  }
}

TEST_CASE("conv2d output size follows conv arithmetic") {
  Graph<double> g;
  auto* x = g.constant(Tensor<double>(Shape{1, 3, 84, 84}));
  auto* w = g.constant(Tensor<double>(Shape{8, 3, 3, 3}));
  auto* b = g.constant(Tensor<double>(Shape{8}));
  auto* y1 = g.conv2d(x, w, b, 2, 1);
  CHECK(y1->value.shape == Shape{1, 8, 42, 42});
  auto* w2 = g.constant(Tensor<double>(Shape{8, 8, 3, 3}));
  auto* y2 = g.conv2d(y1, w2, b, 2, 1);
  CHECK(y2->value.shape == Shape{1, 8, 21, 21});
  auto* y3 = g.conv2d(y2, w2, b, 1, 1);
  CHECK(y3->value.shape == Shape{1, 8, 21, 21});
}

TEST_CASE("conv_transpose2d doubles spatial size with k3 s2 p1 op1 and matches FD") {
  Rng rng(5);
  Param<double> x("x", test::random_tensor(Shape{2, 4, 5, 5}, rng));
  Param<double> w("w", test::random_tensor(Shape{4, 3, 3, 3}, rng, -0.5, 0.5));
  Param<double> b("b", test::random_tensor(Shape{3}, rng));
  {
    Graph<double> g;
    auto* y = g.conv_transpose2d(g.param(x), g.param(w), g.param(b), 2, 1, 1);
    CHECK(y->value.shape == Shape{2, 3, 10, 10});
  }
  auto run = [&](bool back) {
    Graph<double> g;
    auto* y = g.conv_transpose2d(g.param(x), g.param(w), g.param(b), 2, 1, 1);
    auto* loss = g.mse_mean(g.sigmoid(y), g.constant(Tensor<double>(y->value.shape)));
    if (back) g.backward(loss);
    return g.value(loss)[0];
  };
  CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &w, &b}) < 1e-6);
}

TEST_CASE("conv_transpose2d stride 1 matches FD") {
  Rng rng(6);
  Param<double> x("x", test::random_tensor(Shape{1, 3, 4, 4}, rng));
  Param<double> w("w", test::random_tensor(Shape{3, 2, 3, 3}, rng, -0.5, 0.5));
  Param<double> b("b", test::random_tensor(Shape{2}, rng));
  auto run = [&](bool back) {
    Graph<double> g;
    auto* y = g.conv_transpose2d(g.param(x), g.param(w), g.param(b), 1, 1, 0);
    CHECK(y->value.shape == Shape{1, 2, 4, 4});
    auto* loss = g.mse_mean(y, g.constant(Tensor<double>(y->value.shape)));
    if (back) g.backward(loss);
    return g.value(loss)[0];
  };
  CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &w, &b}) < 1e-6);
}

TEST_CASE("batchnorm2d training mode matches FD and updates running stats") {
  Rng rng(9);
  Param<double> x("x", test::random_tensor(Shape{3, 2, 4, 4}, rng));
  Param<double> gamma("gamma", test::random_tensor(Shape{2}, rng, 0.5, 1.5));
  Param<double> beta("beta", test::random_tensor(Shape{2}, rng));
  auto run = [&](bool back) {
    nn::BatchNormState<double> st(2);  // fresh each call so FD sees a pure function
    Graph<double> g;
    auto* y = g.batchnorm2d(g.param(x), g.param(gamma), g.param(beta), st, true);
    auto* loss = g.mse_mean(g.sigmoid(y), g.constant(Tensor<double>(y->value.shape)));
    if (back) g.backward(loss);
    return g.value(loss)[0];
  };
  CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&x, &gamma, &beta}) < 1e-6);

  nn::BatchNormState<double> st(2);
  Graph<double> g;
  g.batchnorm2d(g.param(x), g.param(gamma), g.param(beta), st, true);
  CHECK(st.batches_seen == 1);
  CHECK(st.running_mean[0] != 0.0);
}

TEST_CASE("batchnorm2d eval mode uses running stats deterministically") {
  Rng rng(10);
  Param<double> gamma("gamma", Tensor<double>::full(Shape{2}, 1.0));
  Param<double> beta("beta", Tensor<double>(Shape{2}));
  nn::BatchNormState<double> st(2);
  st.running_mean[0] = 0.3;
  st.running_mean[1] = -0.1;
  st.running_var[0] = 2.0;
  st.running_var[1] = 0.5;
  Tensor<double> x = test::random_tensor(Shape{1, 2, 2, 2}, rng);
  Graph<double> g;
  auto* y = g.batchnorm2d(g.constant(x), g.param(gamma), g.param(beta), st, false);
  const double expect = (x[0] - 0.3) / std::sqrt(2.0 + 1e-5);
  CHECK(g.value(y)[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(st.batches_seen == 0);
}

TEST_CASE("pooling and reduction ops match FD") {
  CHECK(fd_check_op(Shape{2, 3, 4, 4}, [](Graph<double>& g, auto* x) { return g.global_avg_pool(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3, 4, 4}, [](Graph<double>& g, auto* x) { return g.global_max_pool(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3, 4, 4}, [](Graph<double>& g, auto* x) { return g.channel_mean(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3, 4, 4}, [](Graph<double>& g, auto* x) { return g.channel_max(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3, 4, 4}, [](Graph<double>& g, auto* x) {
          return g.concat_channels(g.channel_mean(x), g.channel_max(x));
        }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 3, 2, 2}, [](Graph<double>& g, auto* x) { return g.flatten(x); }) < 1e-6);
  CHECK(fd_check_op(Shape{2, 5}, [](Graph<double>& g, auto* x) {
          return g.concat_cols(g.tanh_(x), g.sigmoid(x));
        }) < 1e-6);
}

TEST_CASE("scalar losses match FD") {
  Rng rng(13);
  Param<double> a("a", test::random_tensor(Shape{3, 4}, rng));
  Tensor<double> target = test::random_tensor(Shape{3, 4}, rng);
  auto run = [&](bool back) {
    Graph<double> g;
    auto* an = g.param(a);
    auto* l1 = g.mse_mean(an, g.constant(target));
    auto* l2 = g.sq_l2_rowmean(g.tanh_(an), g.constant(target));
    auto* l3 = g.mean_all(g.sigmoid(an));
    auto* total = g.weighted_sum({{l1, 1.0}, {l2, 0.5}, {l3, 0.01}});
    if (back) g.backward(total);
    return g.value(total)[0];
  };
  CHECK(test::check_param_gradients([&] { return run(false); }, [&] { run(true); }, {&a}) < 1e-6);
}

TEST_CASE("sq_l2_rowmean is the mean over rows of squared row norms") {
  Graph<double> g;
  Tensor<double> a(Shape{2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor<double> b(Shape{2, 2}, {0.0, 0.0, 0.0, 0.0});
  auto* l = g.sq_l2_rowmean(g.constant(a), g.constant(b));
  CHECK(g.value(l)[0] == doctest::Approx((5.0 + 25.0) / 2.0));
}

TEST_CASE("detach blocks gradient flow") {
  Rng rng(17);
  Param<double> p("p", test::random_tensor(Shape{2, 2}, rng));
  Graph<double> g;
  auto* x = g.param(p);
  auto* stopped = g.detach(g.tanh_(x));
  auto* live = g.sigmoid(x);
  auto* loss = g.mse_mean(g.mul(stopped, live), g.constant(Tensor<double>(Shape{2, 2})));
  p.zero_grad();
  g.backward(loss);
  // grads flow only through the live branch
  Graph<double> g2;
  auto* x2 = g2.param(p);
  auto* frozen = g2.constant(g.value(stopped));
  auto* live2 = g2.sigmoid(x2);
  auto* loss2 = g2.mse_mean(g2.mul(frozen, live2), g2.constant(Tensor<double>(Shape{2, 2})));
  Tensor<double> grad_detached = p.grad;
  p.zero_grad();
  g2.backward(loss2);
  CHECK(max_abs_diff(grad_detached, p.grad) == 0.0);
}

TEST_CASE("adam takes a step and skips non-finite grads") {
  Param<double> p("p", Tensor<double>::full(Shape{2}, 1.0));
  nn::Adam<double> opt({&p}, 0.1);
  p.grad[0] = 1.0;
  p.grad[1] = -1.0;
  CHECK(opt.step());
  CHECK(p.value[0] < 1.0);
  CHECK(p.value[1] > 1.0);
  const Tensor<double> snapshot = p.value;
  p.zero_grad();
  p.grad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(opt.step());
  CHECK(tensors_equal(snapshot, p.value));
}

TEST_CASE("rng substreams are deterministic and serializable") {
  Rng a = substream(42, "env");
  Rng b = substream(42, "env");
  Rng c = substream(42, "augment");
  CHECK(a.next_u64() == b.next_u64());
  CHECK(a.next_u64() != c.next_u64());

  Rng d(123);
  d.normal();
  const std::string state = d.serialize();
  const double next = d.normal();
  Rng e;
  e.deserialize(state);
  CHECK(e.normal() == next);
}

TEST_CASE("rng uniform_int covers inclusive range") {
  Rng r(1);
  int lo = 100, hi = -100;
  for (int i = 0; i < 2000; ++i) {
    const int v = static_cast<int>(r.uniform_int(-3, 3));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo == -3);
  CHECK(hi == 3);
}

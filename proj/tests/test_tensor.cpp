#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace spiralscope;
using spiralscope::testing::random_tensor;

namespace {

Tensor<float> leaf(Shape shape, std::initializer_list<float> values) {
  Tensor<float> t = Tensor<float>::from_values(std::move(shape), values);
  t.set_requires_grad(true);
  return t;
}

Tensor<float> grad_of(const std::function<Tensor<float>(const Tensor<float>&)>& f, const Tensor<float>& x) {
  Tensor<float> p = x.clone();
  p.set_requires_grad(true);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  backward(tape, f(p));
  return Tensor<float>(p.shape(), p.grad());
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<float>({2, 3}, Tensor<float>::Array::Zero(5)), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::zeros({2, 0}), ShapeError);
  const auto t = Tensor<float>::full({2, 3, 4}, 1.5f);
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.values().sum() == doctest::Approx(36.0));
  CHECK(shape_string(t.shape()) == "[2x3x4]");
}

TEST_CASE("matmul") {
  Rng rng(1);
  const auto x = random_tensor({3, 3}, rng);
  const auto eye = Tensor<float>::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK((matmul(eye, x).values() == x.values()).all());

  const auto r = matmul(Tensor<float>::from_values({2, 2}, {1, 2, 3, 4}), Tensor<float>::from_values({2, 1}, {5, 6}));
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r[0] == 17.0f);
  CHECK(r[1] == 39.0f);

  try {
    matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("elementwise ops and broadcasting") {
  Rng rng(2);
  const auto x = random_tensor({2, 3}, rng);
  CHECK((add(x, Tensor<float>::zeros({2, 3})).values() == x.values()).all());
  CHECK((add(x, Tensor<float>::zeros({1})).values() == x.values()).all());
  const auto bias = Tensor<float>::from_values({1, 3}, {1, 2, 3});
  const auto y = add(x, bias);
  CHECK(y[4] == x[4] + 2.0f);
  CHECK(mul(x, Tensor<float>::full({1}, 2.0f))[5] == 2.0f * x[5]);
  CHECK(scale(x, 3.0f)[1] == 3.0f * x[1]);
  CHECK_THROWS_AS(add(x, Tensor<float>::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(mul(x, Tensor<float>::zeros({2, 1})), ShapeError);
}

TEST_CASE("conv2d examples") {
  Rng rng(3);
  const auto x = random_tensor({2, 1, 5, 5}, rng);
  const auto id = conv2d(x, Tensor<float>::full({1, 1, 1, 1}, 1.0f), Tensor<float>::zeros({1}), 1, 0);
  CHECK((id.values() == x.values()).all());

  const auto r = conv2d(Tensor<float>::from_values({1, 1, 2, 2}, {1, 2, 3, 4}),
                        Tensor<float>::from_values({1, 1, 2, 2}, {1, 0, 0, 1}), Tensor<float>::zeros({1}), 1, 0);
  CHECK(r.shape() == Shape{1, 1, 1, 1});
  CHECK(r[0] == 5.0f);

  const auto b = conv2d(x, Tensor<float>::zeros({2, 1, 3, 3}), Tensor<float>::from_values({2}, {0.25f, -1.0f}), 1, 1);
  CHECK(b.shape() == Shape{2, 2, 5, 5});
  for (Index i = 0; i < 25; ++i) CHECK(b[i] == 0.25f);
  for (Index i = 25; i < 50; ++i) CHECK(b[i] == -1.0f);
}

TEST_CASE("conv2d is the identity per channel for a unit 1x1 kernel") {
  Rng rng(4);
  const auto x = random_tensor({2, 3, 4, 6}, rng);
  auto k = Tensor<float>::zeros({3, 3, 1, 1});
  for (Index c = 0; c < 3; ++c) k.mutable_values()[c * 3 + c] = 1.0f;
  CHECK((conv2d(x, k, Tensor<float>::zeros({3}), 1, 0).values() == x.values()).all());
}

TEST_CASE("conv2d matches direct summation") {
  Rng rng(5);
  struct Case {
    Index c, h, w, f, k, stride, pad;
  };
  for (const Case& c : {Case{1, 4, 4, 1, 3, 1, 0}, Case{2, 5, 5, 3, 3, 1, 1}, Case{3, 6, 6, 2, 2, 2, 0},
                        Case{2, 7, 5, 2, 3, 2, 1}, Case{1, 3, 3, 4, 1, 1, 0}}) {
    const auto x = random_tensor({2, c.c, c.h, c.w}, rng);
    const auto k = random_tensor({c.f, c.c, c.k, c.k}, rng);
    const auto b = random_tensor({c.f}, rng);
    const auto got = conv2d(x, k, b, c.stride, c.pad);
    const auto want = spiralscope::testing::naive_conv2d(x, k, b, c.stride, c.pad);
    REQUIRE(got.numel() == want.size());
    CHECK((got.values().cast<double>() - want).abs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("conv2d errors") {
  CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 1, 4, 4}), Tensor<float>::zeros({1, 1, 3, 3}),
                         Tensor<float>::zeros({1}), 2, 0),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 2, 4, 4}), Tensor<float>::zeros({1, 1, 3, 3}),
                         Tensor<float>::zeros({1}), 1, 0),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 1, 3, 3}),
                         Tensor<float>::zeros({1}), 1, 0),
                  ShapeError);
}

TEST_CASE("relu and pooling") {
  const auto r = relu(Tensor<float>::from_values({2}, {-1, 2}));
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 2.0f);
  const auto g = global_avg_pool(Tensor<float>::full({2, 3, 4, 4}, 0.75f));
  CHECK(g.shape() == Shape{2, 3});
  CHECK((g.values() == 0.75f).all());
  const auto p = avg_pool2d(Tensor<float>::from_values({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  CHECK(p.numel() == 1);
  CHECK(p[0] == 2.5f);
  CHECK_THROWS_AS(avg_pool2d(Tensor<float>::zeros({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST_CASE("softmax cross-entropy") {
  const int l0[] = {0};
  CHECK(softmax_cross_entropy(Tensor<float>::zeros({1, 3}), l0).item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  CHECK(softmax_cross_entropy(Tensor<float>::zeros({1, 2}), l0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  const double tiny = softmax_cross_entropy(Tensor<double>::from_values({1, 2}, {10, -10}), l0).item();
  CHECK(tiny == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
  CHECK(tiny == doctest::Approx(2.06e-9).epsilon(1e-2));
  // Large logits stay finite thanks to max subtraction.
  CHECK(std::isfinite(softmax_cross_entropy(Tensor<float>::from_values({1, 2}, {1e4f, -1e4f}), l0).item()));
  const int bad[] = {3};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor<float>::zeros({1, 3}), bad), std::out_of_range);
}

TEST_CASE("backward examples") {
  const auto x = Tensor<float>::from_values({3}, {1, -2, 3});
  const auto ones = grad_of([](const Tensor<float>& t) { return sum(t); }, x);
  CHECK((ones.values() == 1.0f).all());
  const auto twice = grad_of([](const Tensor<float>& t) { return sum(mul(t, t)); }, x);
  CHECK((twice.values() == 2.0f * x.values()).all());

  // Fan-out accumulates: d/dx sum(x + x) = 2.
  const auto fan = grad_of([](const Tensor<float>& t) { return sum(add(t, t)); }, x);
  CHECK((fan.values() == 2.0f).all());

  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto p = leaf({2}, {1, 2});
  const auto y = mul(p, p);
  CHECK_THROWS_AS(backward(tape, y), ShapeError);
}

TEST_CASE("tape records only with grad-requiring inputs") {
  Tape<float> tape;
  TapeScope<float> scope(tape);
  const auto a = Tensor<float>::full({2}, 1.0f);
  const auto b = add(a, a);
  CHECK(tape.size() == 0);
  CHECK_FALSE(b.requires_grad());
  auto p = leaf({2}, {1, 2});
  const auto c = add(p, a);
  const auto d = relu(c);
  REQUIRE(tape.size() == 2);
  CHECK(tape.records()[0].op == "add");
  CHECK(tape.records()[1].op == "relu");
  CHECK(tape.records()[1].inputs[0].same_storage(tape.records()[0].output));
}

TEST_CASE("leaf gradients accumulate until cleared") {
  auto p = leaf({2}, {1, 2});
  for (int i = 0; i < 2; ++i) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    backward(tape, sum(scale(p, 3.0f)));
  }
  CHECK((p.grad() == 6.0f).all());
  p.zero_grad();
  CHECK_FALSE(p.has_grad());
}

TEST_CASE("finite_diff_check self tests") {
  const auto sq = finite_diff_check([](const auto& t) { return sum(mul(t, t)); }, Tensor<float>::from_values({2}, {1, 2}));
  CHECK(sq.max_rel_error < 1e-4);
  const auto constant = finite_diff_check(
      [](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        return T::full({1}, 4.0);
      },
      Tensor<float>::from_values({3}, {1, 2, 3}));
  CHECK(constant.max_rel_error == 0.0);

  Rng rng(6);
  const auto input = random_tensor({1, 1, 4, 4}, rng);
  const auto kernel = random_tensor({1, 1, 3, 3}, rng);
  const auto conv = finite_diff_check(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        using S = typename T::Array::Scalar;
        return sum(mul(conv2d(input.template cast<S>(), k, T::zeros({1}), 1, 0), conv2d(input.template cast<S>(), k, T::zeros({1}), 1, 0)));
      },
      kernel);
  CHECK(conv.max_rel_error < 1e-2);
}

TEST_CASE("gradients of individual primitives") {
  Rng rng(7);
  FiniteDiffOptions kinks;
  kinks.skip_nonsmooth = true;
  const auto x4 = random_tensor({2, 2, 4, 4}, rng);
  const auto k = random_tensor({3, 2, 3, 3}, rng);
  const auto b = random_tensor({3}, rng);
  const auto w = random_tensor({4, 3}, rng);
  const int labels[] = {2, 0};

  auto cast = [](const Tensor<float>& t, const auto& like) {
    using T = std::decay_t<decltype(like)>;
    return t.template cast<typename T::Array::Scalar>();
  };

  SUBCASE("conv2d input, kernel, bias") {
    auto loss = [&](const auto& xx, const auto& kk, const auto& bb) { auto y = conv2d(xx, kk, bb, 1, 1); return sum(mul(y, y)); };
    CHECK(finite_diff_check([&](const auto& t) { return loss(t, cast(k, t), cast(b, t)); }, x4).max_rel_error < 1e-2);
    CHECK(finite_diff_check([&](const auto& t) { return loss(cast(x4, t), t, cast(b, t)); }, k).max_rel_error < 1e-2);
    CHECK(finite_diff_check([&](const auto& t) { return loss(cast(x4, t), cast(k, t), t); }, b).max_rel_error < 1e-2);
  }
  SUBCASE("strided conv") {
    const auto k2 = random_tensor({2, 2, 2, 2}, rng);
    auto g = [&](const auto& t) {
      using T = std::decay_t<decltype(t)>;
      auto y = conv2d(t, cast(k2, t), T::zeros({2}), 2, 0);
      return sum(mul(y, y));
    };
    CHECK(finite_diff_check(g, x4).max_rel_error < 1e-2);
  }
  SUBCASE("dense") {
    const auto x2 = random_tensor({2, 4}, rng);
    CHECK(finite_diff_check([&](const auto& t) { auto y = matmul(t, cast(w, t)); return sum(mul(y, y)); }, x2).max_rel_error < 1e-2);
    CHECK(finite_diff_check([&](const auto& t) { auto y = matmul(cast(x2, t), t); return sum(mul(y, y)); }, w).max_rel_error < 1e-2);
  }
  SUBCASE("relu") {
    CHECK(finite_diff_check([&](const auto& t) { auto y = relu(t); return sum(mul(y, y)); }, x4, kinks).max_rel_error < 1e-2);
  }
  SUBCASE("pooling") {
    CHECK(finite_diff_check([&](const auto& t) { auto y = avg_pool2d(t, 2, 2); return sum(mul(y, y)); }, x4).max_rel_error < 1e-2);
    CHECK(finite_diff_check([&](const auto& t) { auto y = avg_pool2d(t, 3, 1); return sum(mul(y, y)); }, x4).max_rel_error < 1e-2);
    CHECK(finite_diff_check([&](const auto& t) { auto y = global_avg_pool(t); return sum(mul(y, y)); }, x4).max_rel_error < 1e-2);
  }
  SUBCASE("softmax cross-entropy") {
    const auto logits = random_tensor({2, 3}, rng, -3.0, 3.0);
    CHECK(finite_diff_check([&](const auto& t) { return softmax_cross_entropy(t, labels); }, logits).max_rel_error < 1e-2);
  }
}

TEST_CASE("random composed graphs pass the finite-difference check") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto g = spiralscope::testing::make_random_graph(seed);
    Rng rng = make_rng({seed, 1});
    const auto input = random_tensor(g.input_shape, rng);
    const auto r = spiralscope::testing::check_graph(g, input);
    INFO("seed " << seed << ": " << g.describe());
    CHECK(g.primitives <= 6);
    CHECK(r.max_rel_error <= 1e-2);
    worst = std::max(worst, r.max_rel_error);
  }
  MESSAGE("worst relative error over 100 graphs: " << worst);
}

TEST_CASE("backward is linear") {
  Rng rng(8);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto gf = spiralscope::testing::make_random_graph(2 * seed + 200);
    auto x = random_tensor(gf.input_shape, rng);
    const double alpha = 0.7, beta = -1.3;
    auto f = [&](const Tensor<float>& t) { return gf.evaluate(x, -1, t); };
    auto g = [&](const Tensor<float>& t) { return sum(mul(t, t)); };
    const auto gfx = grad_of(f, x), ggx = grad_of(g, x);
    const auto combined = grad_of(
        [&](const Tensor<float>& t) { return add(scale(f(t), float(alpha)), scale(g(t), float(beta))); }, x);
    const Eigen::ArrayXd expect = alpha * gfx.values().cast<double>() + beta * ggx.values().cast<double>();
    const Eigen::ArrayXd got = combined.values().cast<double>();
    const double rel = (got - expect).abs().maxCoeff() / std::max(1e-12, expect.abs().maxCoeff());
    CHECK(rel <= 1e-5);
  }
}

TEST_CASE("backward is deterministic") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = spiralscope::testing::make_random_graph(seed + 500);
    Rng rng(seed);
    const auto x = random_tensor(g.input_shape, rng);
    auto f = [&](const Tensor<float>& t) { return g.evaluate(x, -1, t); };
    const auto a = grad_of(f, x), b = grad_of(f, x);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0);
  }
}

TEST_CASE("non-finite values are reported") {
  auto x = Tensor<float>::from_values({2}, {1.0f, std::nanf("")});
  CHECK_FALSE(x.all_finite());
  CHECK(Tensor<float>::zeros({3}).all_finite());
}

#include "caps/gradcheck.hpp"
#include "caps/tensor.hpp"

#include <catch2/catch.hpp>

#include <cmath>

using namespace caps;

TEST_CASE("primitive forward values") {
  CHECK(exp(Tensor::scalar(0.0)).item() == 1.0);
  CHECK(logsumexp(Tensor::from({2}, {0.0, 0.0})).item() == Approx(std::log(2.0)).epsilon(1e-12));

  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor prod = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(prod[i] == m[i]);

  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0);
  CHECK(mean(Tensor::from({4}, {1, 2, 3, 6})).item() == 3.0);
}

TEST_CASE("backward through simple graphs") {
  SECTION("d(x*x) = 2x") {
    Tape tape;
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == 6.0);
  }
  SECTION("fan-out accumulates exactly") {
    Tape tape;
    Tensor x = Tensor::scalar(1.25, true);
    backward(add(x, x));
    CHECK(x.grad()[0] == 2.0);
  }
  SECTION("sigmoid'(0) = 0.25") {
    Tape tape;
    Tensor x = Tensor::zeros({3}, true);
    backward(sum(sigmoid(x)));
    for (double g : x.grad()) CHECK(g == Approx(0.25).epsilon(1e-12));
  }
  SECTION("grad of logsumexp is softmax") {
    Tape tape;
    Tensor x = Tensor::from({3}, {0.3, -1.2, 2.0}, true);
    backward(logsumexp(x));
    Tensor sm = softmax(Tensor::from({3}, {0.3, -1.2, 2.0}), 0);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(x.grad()[i] == Approx(sm[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite difference oracle") {
  SECTION("sum of squares") {
    RandomStream rng(3);
    std::vector<double> v(6);
    for (double& e : v) e = rng.uniform(-2, 2);
    double err = finite_difference_check(
        [](const Tensor& x) { return sum(square(x)); }, Tensor::from({6}, v));
    CHECK(err < 1e-6);
  }
  SECTION("constant function has zero error") {
    double err = finite_difference_check(
        [](const Tensor& x) { return Tensor::scalar(4.0) + sum(x) * 0.0; },
        Tensor::from({3}, {1, 2, 3}));
    CHECK(err == 0.0);
  }
  SECTION("non-finite objective is rejected") {
    CHECK_THROWS_AS(finite_difference_check(
                        [](const Tensor& x) { return log(x) * -1.0; },
                        Tensor::scalar(0.0)),
                    DomainError);
  }
}

TEST_CASE("primitive gradient sweep") {
  for (const auto& r : run_primitive_gradient_checks(11, 20)) {
    INFO(r.name);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("shape and domain errors") {
  CHECK_THROWS_AS(add(Tensor::from({2}, {1, 2}), Tensor::from({3}, {1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({3, 1}, {1, 2, 3})),
                  ShapeError);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), DomainError);
  CHECK_THROWS_AS(sqrt(Tensor::scalar(-0.5)), DomainError);
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2, 3}), ShapeError);
  {
    Tape tape;
    Tensor x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ShapeError);  // non-scalar root
  }
}

TEST_CASE("broadcasting matches explicit expansion") {
  Tensor a = Tensor::from({2, 1}, {1, 2});
  Tensor b = Tensor::from({3}, {10, 20, 30});
  Tensor c = add(a, b);
  REQUIRE(c.shape() == Shape{2, 3});
  const std::vector<double> want{11, 21, 31, 12, 22, 32};
  for (std::size_t i = 0; i < 6; ++i) CHECK(c[i] == want[i]);
}

TEST_CASE("grid sample hits pixels exactly on the integer grid") {
  Tensor src = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor sx = Tensor::from({2, 3}, {0, 1, 2, 0, 1, 2});
  Tensor sy = Tensor::from({2, 3}, {0, 0, 0, 1, 1, 1});
  Tensor out = grid_sample(src, sx, sy);
  for (std::size_t i = 0; i < 6; ++i) CHECK(out[i] == src[i]);

  // zero padding outside the extent
  Tensor far = grid_sample(src, Tensor::from({1}, {25.0}), Tensor::from({1}, {-3.0}));
  CHECK(far.item() == 0.0);
}

TEST_CASE("tape isolates evaluations") {
  Tensor x = Tensor::scalar(2.0, true);
  {
    Tape tape;
    backward(mul(x, x));
  }
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  {
    Tape tape;
    backward(mul(x, mul(x, x)));
  }
  CHECK(x.grad()[0] == Approx(12.0).epsilon(1e-12));
}

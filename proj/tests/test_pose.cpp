#include "caps/gradcheck.hpp"
#include "caps/pose.hpp"

#include <catch2/catch.hpp>

#include <cmath>

using namespace caps;

namespace {
void check_realized(const Pose& p, const std::vector<double>& want, double tol = 1e-12) {
  Tensor r = realized(p);
  REQUIRE(r.shape() == Shape{3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(r[i] == Approx(want[i]).margin(tol));
}

Pose random_pose(RandomStream& rng) {
  return make_pose(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1.2, 1.2),
                   rng.uniform(0.5, 1.8), rng.uniform(0.5, 1.8), rng.uniform(-0.4, 0.4));
}
}  // namespace

TEST_CASE("make_pose constructors") {
  check_realized(make_pose(0, 0), {1, 0, 0, 0, 1, 0, 0, 0, 1});
  check_realized(make_pose(5, 0), {1, 0, 5, 0, 1, 0, 0, 0, 1});
  check_realized(make_pose(0, 0, M_PI / 2), {0, -1, 0, 1, 0, 0, 0, 0, 1});
  CHECK_THROWS_AS(make_pose(0, 0, 0, 0.0), DomainError);
}

TEST_CASE("compose follows the realized matrix product") {
  SECTION("identity parent leaves the offset realized") {
    Pose m = make_pose(1.5, -2, 0.3, 1.1);
    Pose got = compose(identity_pose(), m);
    Tensor want = realized(m);
    Tensor have = realized(got);
    for (std::size_t i = 0; i < 9; ++i) CHECK(have[i] == Approx(want[i]).margin(1e-12));
  }
  SECTION("translations add") {
    check_realized(compose(make_pose(1, 0), make_pose(0, 2)), {1, 0, 1, 0, 1, 2, 0, 0, 1});
  }
  SECTION("rotations compose") {
    Pose two = compose(make_pose(0, 0, M_PI / 2), make_pose(0, 0, M_PI / 2));
    check_realized(two, {-1, 0, 0, 0, -1, 0, 0, 0, 1});
  }
  SECTION("associativity on random triples") {
    RandomStream rng(23);
    for (int i = 0; i < 100; ++i) {
      Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
      Tensor lhs = realized(compose(compose(a, b), c));
      Tensor rhs = realized(compose(a, compose(b, c)));
      for (std::size_t k = 0; k < 9; ++k)
        CHECK(lhs[k] == Approx(rhs[k]).margin(1e-9));
    }
  }
}

TEST_CASE("invert") {
  check_realized(invert(identity_pose()), {1, 0, 0, 0, 1, 0, 0, 0, 1});
  check_realized(invert(make_pose(3, -1)), {1, 0, -3, 0, 1, 1, 0, 0, 1});
  check_realized(invert(make_pose(0, 0, 0, 2, 2)), {0.5, 0, 0, 0, 0.5, 0, 0, 0, 1});

  SECTION("round trips") {
    RandomStream rng(29);
    for (int i = 0; i < 100; ++i) {
      Pose a = random_pose(rng);
      Tensor ident = realized(compose(a, invert(a)));
      const double want[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
      for (std::size_t k = 0; k < 9; ++k) CHECK(ident[k] == Approx(want[k]).margin(1e-9));
      Tensor twice = realized(invert(invert(a)));
      Tensor orig = realized(a);
      for (std::size_t k = 0; k < 9; ++k) CHECK(twice[k] == Approx(orig[k]).margin(1e-9));
    }
  }
  SECTION("singular pose is rejected") {
    Pose bad(Tensor::from({2, 3}, {-1, 0, 0, 0, -1, 0}));  // realized upper block is zero
    CHECK_THROWS_AS(invert(bad), DomainError);
  }
}

TEST_CASE("compose gradients pass finite differences") {
  double err = finite_difference_check(
      [](const Tensor& v) {
        Pose a(reshape(slice0(reshape(v, {2, 6}), 0, 1), {2, 3}));
        Pose b(reshape(slice0(reshape(v, {2, 6}), 1, 1), {2, 3}));
        Tensor weights = Tensor::from({2, 3}, {0.7, -1.1, 0.4, 1.3, 0.2, -0.6});
        return sum(mul(compose(a, b).offset, weights));
      },
      Tensor::from({12}, {0.1, -0.2, 0.5, 0.3, 0.15, -0.4, -0.1, 0.25, 0.8, 0.05, -0.3, 0.6}));
  CHECK(err < 1e-6);

  double inv_err = finite_difference_check(
      [](const Tensor& v) {
        Pose a(reshape(v, {2, 3}));
        Tensor weights = Tensor::from({2, 3}, {0.7, -1.1, 0.4, 1.3, 0.2, -0.6});
        return sum(mul(invert(a).offset, weights));
      },
      Tensor::from({6}, {0.1, -0.2, 0.5, 0.3, 0.15, -0.4}));
  CHECK(inv_err < 1e-6);
}

TEST_CASE("pose readouts") {
  Pose p = make_pose(2.5, -1.25, 0.4, 1.3, 1.3);
  auto [tx, ty] = pose_translation(p);
  CHECK(tx == 2.5);
  CHECK(ty == -1.25);
  CHECK(pose_rotation(p) == Approx(0.4).epsilon(1e-12));
}

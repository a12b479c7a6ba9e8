#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include "caps/random.hpp"
#include "caps/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace caps {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must map a tensor of x's shape to a scalar tensor.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x, double eps = 1e-5) {
  if (eps <= 0.0) throw DomainError("finite_difference_check: eps must be positive");
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor xp = Tensor::from(x.shape(), x.values(), true);
    Tensor y = f(xp);
    if (y.size() != 1)
      throw ShapeError("finite_difference_check: f returned " + shape_str(y.shape()));
    if (!std::isfinite(y.item()))
      throw DomainError("finite_difference_check: f is not finite at x");
    backward(y);
    analytic = xp.grad();
  }
  auto eval = [&](const std::vector<double>& v) {
    Tensor xt = Tensor::from(x.shape(), v, false);
    const double r = f(xt).item();
    if (!std::isfinite(r))
      throw DomainError("finite_difference_check: f is not finite near x");
    return r;
  };
  std::vector<double> v = x.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + eps;
    const double hi = eval(v);
    v[i] = keep - eps;
    const double lo = eval(v);
    v[i] = keep;
    const double numeric = (hi - lo) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Gradient checks for every tensor primitive at random points. 64-bit
// arithmetic; eps 1e-5; each primitive probed at `points` random inputs.
inline std::vector<GradCheckResult> run_primitive_gradient_checks(std::uint64_t seed = 7,
                                                                  int points = 100) {
  RandomStream rng(seed);
  std::vector<GradCheckResult> results;

  auto rand_tensor = [&](Shape s, double lo, double hi) {
    std::vector<double> v(numel(s));
    for (double& e : v) e = lo + (hi - lo) * rng.uniform();
    return Tensor::from(std::move(s), std::move(v));
  };
  auto check = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                   const std::function<Tensor()>& make_x) {
    double worst = 0.0;
    for (int p = 0; p < points; ++p)
      worst = std::max(worst, finite_difference_check(f, make_x()));
    results.push_back({name, worst});
  };

  const Shape s23{2, 3};
  check("add", [&](const Tensor& x) { return sum(add(x, x * 0.5 + 0.3)); },
        [&] { return rand_tensor(s23, -2, 2); });
  check("sub", [&](const Tensor& x) { return sum(sub(x * 2.0, square(x))); },
        [&] { return rand_tensor(s23, -2, 2); });
  check("mul", [&](const Tensor& x) {
    return sum(mul(slice0(x, 0, 1), slice0(x, 1, 1)));
  }, [&] { return rand_tensor(s23, -2, 2); });
  check("div", [&](const Tensor& x) {
    return sum(div(slice0(x, 0, 1), slice0(x, 1, 1)));
  }, [&] { return rand_tensor(s23, 0.5, 2.5); });
  check("broadcast", [&](const Tensor& x) {
    return sum(mul(broadcast_to(slice0(x, 0, 1), {4, 3}),
                   Tensor::from({3}, {0.5, -1.0, 2.0})));
  }, [&] { return rand_tensor({1, 3}, -2, 2); });
  check("neg", [&](const Tensor& x) { return sum(neg(x)); },
        [&] { return rand_tensor(s23, -2, 2); });
  check("exp", [&](const Tensor& x) { return sum(exp(x)); },
        [&] { return rand_tensor(s23, -2, 1.5); });
  check("log", [&](const Tensor& x) { return sum(log(x)); },
        [&] { return rand_tensor(s23, 0.2, 3.0); });
  check("sqrt", [&](const Tensor& x) { return sum(sqrt(x)); },
        [&] { return rand_tensor(s23, 0.2, 3.0); });
  check("square", [&](const Tensor& x) { return sum(square(x)); },
        [&] { return rand_tensor(s23, -2, 2); });
  check("sigmoid", [&](const Tensor& x) { return sum(sigmoid(x)); },
        [&] { return rand_tensor(s23, -4, 4); });
  check("softplus", [&](const Tensor& x) { return sum(softplus(x)); },
        [&] { return rand_tensor(s23, -4, 4); });
  check("clamp", [&](const Tensor& x) { return sum(square(clamp(x, -0.5, 0.5))); },
        [&] { return rand_tensor(s23, 0.05, 0.45); });
  check("sum", [&](const Tensor& x) { return sum(square(x)); },
        [&] { return rand_tensor({5}, -2, 2); });
  check("sum_axis", [&](const Tensor& x) { return sum(square(sum(x, 1))); },
        [&] { return rand_tensor({3, 4}, -2, 2); });
  check("mean", [&](const Tensor& x) { return mean(square(x)); },
        [&] { return rand_tensor({6}, -2, 2); });
  check("logsumexp", [&](const Tensor& x) { return sum(logsumexp(x, 1)); },
        [&] { return rand_tensor({2, 5}, -3, 3); });
  check("softmax", [&](const Tensor& x) {
    return sum(mul(softmax(x, 1), Tensor::from({2, 3}, {1, -2, 0.5, 0.3, 2, -1})));
  }, [&] { return rand_tensor({2, 3}, -2, 2); });
  check("matmul", [&](const Tensor& x) {
    return sum(square(matmul(slice0(x, 0, 2), reshape(slice0(x, 2, 2), {2, 2}))));
  }, [&] { return rand_tensor({4, 2}, -1.5, 1.5); });
  check("take", [&](const Tensor& x) { return sum(square(take(x, {0, 2, 2, 5}))); },
        [&] { return rand_tensor({6}, -2, 2); });
  check("slice_concat", [&](const Tensor& x) {
    return sum(square(concat0(slice0(x, 1, 2), slice0(x, 0, 1))));
  }, [&] { return rand_tensor({3, 2}, -2, 2); });
  check("stack", [&](const Tensor& x) {
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < x.size(); ++i) parts.push_back(take(x, {i}));
    return sum(square(stack_scalars(parts)));
  }, [&] { return rand_tensor({4}, -2, 2); });
  check("reshape", [&](const Tensor& x) { return sum(square(reshape(x, {3, 2}))); },
        [&] { return rand_tensor({2, 3}, -2, 2); });
  // Integer sample locations are kink points of bilinear interpolation, so
  // coordinates are drawn strictly between grid lines.
  check("grid_sample_coords", [&](const Tensor& x) {
    Tensor src = Tensor::from({3, 3}, {0.1, 0.9, 0.2, 0.4, 0.8, 0.6, 0.3, 0.5, 0.7});
    Tensor sx = slice0(reshape(x, {2, 2, 2}), 0, 1);
    Tensor sy = slice0(reshape(x, {2, 2, 2}), 1, 1);
    return sum(square(grid_sample(src, reshape(sx, {2, 2}), reshape(sy, {2, 2}))));
  }, [&] { return rand_tensor({8}, 0.1, 1.9); });
  check("grid_sample_source", [&](const Tensor& x) {
    Tensor sx = Tensor::from({2, 2}, {0.3, 1.4, 0.7, 1.1});
    Tensor sy = Tensor::from({2, 2}, {0.6, 0.2, 1.5, 1.8});
    return sum(square(grid_sample(x, sx, sy)));
  }, [&] { return rand_tensor({3, 3}, 0, 1); });

  return results;
}

}  // namespace caps

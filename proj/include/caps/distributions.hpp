#pragma once

// Log-densities and reparameterized samplers for the distribution families
// used by the model: Gaussian, Bernoulli, categorical-from-presence, and the
// binary Concrete (relaxed Bernoulli).

#include "caps/random.hpp"
#include "caps/tensor.hpp"

#include <cmath>

namespace caps {

inline constexpr double kHalfLog2Pi = 0.9189385332046727417803297;  // ln(2*pi)/2
inline constexpr double kPresenceEps = 1e-7;

// Elementwise log N(x; mean, scale^2). Differentiable in all three arguments.
inline Tensor normal_log_prob(const Tensor& x, const Tensor& mean, const Tensor& scale) {
  for (double s : scale.values())
    if (s <= 0.0)
      throw DomainError("normal_log_prob: scale must be positive, got " + std::to_string(s));
  Tensor z = div(sub(x, mean), scale);
  return sub(sub(mul(square(z), Tensor::scalar(-0.5)), log(scale)),
             Tensor::scalar(kHalfLog2Pi));
}

inline double normal_log_prob(double x, double mean, double scale) {
  if (scale <= 0.0)
    throw DomainError("normal_log_prob: scale must be positive, got " + std::to_string(scale));
  const double z = (x - mean) / scale;
  return -0.5 * z * z - std::log(scale) - kHalfLog2Pi;
}

// x ln p + (1-x) ln(1-p) with p clamped to [eps, 1-eps]. Exact for hard x,
// cross-entropy surrogate for relaxed x in (0,1).
inline Tensor bernoulli_log_prob(const Tensor& x, const Tensor& p) {
  Tensor pc = clamp(p, kPresenceEps, 1.0 - kPresenceEps);
  return add(mul(x, log(pc)), mul(sub(Tensor::scalar(1.0), x), log(sub(Tensor::scalar(1.0), pc))));
}

inline double bernoulli_log_prob(double x, double p) {
  const double pc = std::min(std::max(p, kPresenceEps), 1.0 - kPresenceEps);
  return x * std::log(pc) + (1.0 - x) * std::log1p(-pc);
}

// Selection probabilities p_i = rho_i t_i / sum_j rho_j t_j. Accepts relaxed
// t in [0,1]; the always-on dummy parent keeps the normalizer positive.
inline Tensor categorical_from_presence(const Tensor& rho, const Tensor& t) {
  if (rho.shape() != t.shape())
    throw ShapeError("categorical_from_presence: rho " + shape_str(rho.shape()) +
                     " vs t " + shape_str(t.shape()));
  Tensor w = mul(rho, t);
  double total = 0.0;
  for (double v : w.values()) total += v;
  if (!(total > 0.0))
    throw DomainError("categorical_from_presence: all effective weights are zero");
  return div(w, sum(w));
}

struct ConcreteParams {
  double logit = 0.0;
  double temperature = 1.0;
};

// Reparameterized binary-Concrete sample: sigmoid((logit + log u - log(1-u)) / tau).
// Gradient flows to the logit; u is exogenous noise in (0,1).
inline Tensor relaxed_bernoulli_sample(const Tensor& logit, double temperature, double u) {
  if (!(u > 0.0 && u < 1.0))
    throw DomainError("relaxed_bernoulli_sample: noise must lie in (0,1)");
  if (!(temperature > 0.0))
    throw DomainError("relaxed_bernoulli_sample: temperature must be positive");
  const double logistic = std::log(u) - std::log1p(-u);
  return sigmoid(div(add(logit, Tensor::scalar(logistic)), Tensor::scalar(temperature)));
}

inline double relaxed_bernoulli_sample(double logit, double temperature, double u) {
  if (!(u > 0.0 && u < 1.0))
    throw DomainError("relaxed_bernoulli_sample: noise must lie in (0,1)");
  if (!(temperature > 0.0))
    throw DomainError("relaxed_bernoulli_sample: temperature must be positive");
  const double z = (logit + std::log(u) - std::log1p(-u)) / temperature;
  return 1.0 / (1.0 + std::exp(-z));
}

// Binary-Concrete log density with location exp(L) and temperature tau:
//   ln tau + L - (tau+1) ln x + (tau-1) ln(1-x) - 2 ln(1 + exp(L - tau*logit(x)))
inline Tensor relaxed_bernoulli_log_prob(const Tensor& x, const Tensor& logit,
                                         double temperature) {
  for (double v : x.values())
    if (!(v > 0.0 && v < 1.0))
      throw DomainError("relaxed_bernoulli_log_prob: x must lie in (0,1), got " +
                        std::to_string(v));
  if (!(temperature > 0.0))
    throw DomainError("relaxed_bernoulli_log_prob: temperature must be positive");
  Tensor lx = log(x);
  Tensor l1x = log(sub(Tensor::scalar(1.0), x));
  Tensor t = Tensor::scalar(temperature);
  Tensor inner = sub(logit, mul(t, sub(lx, l1x)));
  return sub(add(sub(add(Tensor::scalar(std::log(temperature)), logit),
                     mul(add(t, Tensor::scalar(1.0)), lx)),
                 mul(sub(t, Tensor::scalar(1.0)), l1x)),
             mul(Tensor::scalar(2.0), softplus(inner)));
}

inline double relaxed_bernoulli_log_prob(double x, const ConcreteParams& params) {
  if (!(x > 0.0 && x < 1.0))
    throw DomainError("relaxed_bernoulli_log_prob: x must lie in (0,1), got " +
                      std::to_string(x));
  if (!(params.temperature > 0.0))
    throw DomainError("relaxed_bernoulli_log_prob: temperature must be positive");
  const double tau = params.temperature, L = params.logit;
  const double lx = std::log(x), l1x = std::log1p(-x);
  const double inner = L - tau * (lx - l1x);
  const double sp = inner > 30.0 ? inner : std::log1p(std::exp(inner));
  return std::log(tau) + L - (tau + 1.0) * lx + (tau - 1.0) * l1x - 2.0 * sp;
}

}  // namespace caps

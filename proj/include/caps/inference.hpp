#pragma once

// Per-image variational state and free-form variational inference: a
// Monte-Carlo ELBO with the selection variables marginalized analytically
// inside log_joint (the E step), optimized by first-order ascent on the
// variational parameters (the M step of the per-image EM alternation).
//
// Presences are relaxed Concrete variables sampled with reparameterization.
// Poses are either Delta (a point, contributing zero entropy: MAP inference,
// the partially variational bound) or Gaussian with mean and per-entry scale.
// A hard presence-sampling mode draws exact Bernoulli presences instead; it
// is evaluation-only (no gradient flows to the logits) and makes the
// estimator the exact discrete ELBO that the bound oracles require.

#include "caps/model.hpp"
#include "caps/optimizer.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace caps {

inline constexpr double kQPoseScaleFloor = 1e-3;
inline constexpr double kRelaxedClamp = 1e-12;

enum class PoseMode { kDelta, kFull };
enum class PresenceSampling { kRelaxed, kHard };
enum class PhiInit { kMatched, kAnchor };

struct CapsuleQ {
  Tensor logit;           // {1}
  Tensor pose_mean;       // {2,3}; the point value in delta mode
  Tensor pose_scale_raw;  // {2,3}; scale = floor + softplus(raw), full mode only
};

struct VariationalState {
  PoseMode mode = PoseMode::kDelta;
  std::vector<std::vector<CapsuleQ>> layers;

  // Heuristic init: presence logits 0 and poses at small random offsets.
  // Template-layer poses are anchored at the canvas center so the templates
  // start where the bilinear warp can see image gradients at all.
  static VariationalState create(const ModelParams& params, PoseMode mode,
                                 RandomStream& rng, double pose_jitter = 0.03) {
    VariationalState q;
    q.mode = mode;
    q.layers.resize(params.layer_count());
    const std::size_t last = params.layer_count() - 1;
    const double ax = (static_cast<double>(params.image_w) - params.template_w) / 2.0;
    const double ay = (static_cast<double>(params.image_h) - params.template_h) / 2.0;
    for (std::size_t k = 0; k < params.layer_count(); ++k)
      for (std::size_t i = 0; i < params.capsules_in(k); ++i) {
        CapsuleQ c;
        c.logit = Tensor::scalar(0.0, true);
        std::vector<double> off(6);
        for (auto& v : off) v = rng.normal(0.0, pose_jitter);
        if (k == last) {
          off[2] += ax;
          off[5] += ay;
        }
        c.pose_mean = Tensor::from({2, 3}, off, true);
        c.pose_scale_raw =
            Tensor::full({2, 3}, inv_softplus(0.1 - kQPoseScaleFloor), true);
        q.layers[k].push_back(std::move(c));
      }
    return q;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers)
      for (const auto& c : layer) {
        out.push_back(c.logit);
        out.push_back(c.pose_mean);
        if (mode == PoseMode::kFull) out.push_back(c.pose_scale_raw);
      }
    return out;
  }

  VariationalState clone() const {
    VariationalState q;
    q.mode = mode;
    q.layers.resize(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k)
      for (const auto& c : layers[k]) {
        CapsuleQ n;
        n.logit = Tensor::from({1}, c.logit.values(), true);
        n.pose_mean = Tensor::from({2, 3}, c.pose_mean.values(), true);
        n.pose_scale_raw = Tensor::from({2, 3}, c.pose_scale_raw.values(), true);
        q.layers[k].push_back(std::move(n));
      }
    return q;
  }

  double mean_presence(std::size_t layer, std::size_t i) const {
    return 1.0 / (1.0 + std::exp(-layers[layer][i].logit[0]));
  }
  double pose_scale_value(std::size_t layer, std::size_t i, std::size_t e) const {
    const double r = layers[layer][i].pose_scale_raw[e];
    return kQPoseScaleFloor + (r > 30.0 ? r : std::log1p(std::exp(r)));
  }
};

// Data-driven init: each template-layer pose starts at the integer
// translation minimizing the squared error between the image patch and the
// template flattened over black, weighted by the template alpha; other
// layers start at small offsets around identity. Deterministic for a given
// image, which keeps re-initialization per epoch a fixed heuristic.
inline VariationalState matched_filter_init(const ModelParams& params, const Tensor& image,
                                            PoseMode mode, RandomStream& rng,
                                            double pose_jitter = 0.03) {
  VariationalState q = VariationalState::create(params, mode, rng, pose_jitter);
  const std::size_t last = params.layer_count() - 1;
  const long h = static_cast<long>(params.image_h), w = static_cast<long>(params.image_w);
  const long th = static_cast<long>(params.template_h), tw = static_cast<long>(params.template_w);
  std::vector<Template> tpls = params.materialize_templates();
  for (std::size_t j = 0; j < tpls.size(); ++j) {
    const auto& color = tpls[j].color.values();
    const auto& alpha = tpls[j].alpha.values();
    double best = std::numeric_limits<double>::infinity();
    long bx = 0, by = 0;
    for (long ty = -th / 2; ty <= h - th / 2; ++ty)
      for (long tx = -tw / 2; tx <= w - tw / 2; ++tx) {
        double score = 0.0;
        for (long y = 0; y < th; ++y)
          for (long x = 0; x < tw; ++x) {
            const long iy = ty + y, ix = tx + x;
            const double pix =
                (iy < 0 || iy >= h || ix < 0 || ix >= w) ? 0.0 : image[iy * w + ix];
            const double a = alpha[y * tw + x];
            const double d = pix - color[y * tw + x] * a;
            score += a * d * d;
          }
        if (score < best) {
          best = score;
          bx = tx;
          by = ty;
        }
      }
    std::vector<double> off = q.layers[last][j].pose_mean.values();
    off[2] = static_cast<double>(bx) + (off[2] - (w - tw) / 2.0);
    off[5] = static_cast<double>(by) + (off[5] - (h - th) / 2.0);
    q.layers[last][j].pose_mean = Tensor::from({2, 3}, off, true);
  }
  return q;
}

struct ElboEstimate {
  double value = 0.0;
  std::size_t num_samples = 0;
  double likelihood_term = 0.0;
  std::vector<double> layer_terms;  // relative-entropy style terms per layer
  double std_error = 0.0;
};

struct ElboGraph {
  Tensor value;
  Tensor likelihood_term;
  std::vector<Tensor> layer_terms;
  std::vector<double> sample_values;

  ElboEstimate estimate() const {
    ElboEstimate e;
    e.value = value.item();
    e.num_samples = sample_values.size();
    e.likelihood_term = likelihood_term.item();
    for (const auto& t : layer_terms) e.layer_terms.push_back(t.item());
    if (sample_values.size() > 1) {
      double m = 0.0;
      for (double v : sample_values) m += v;
      m /= static_cast<double>(sample_values.size());
      double s2 = 0.0;
      for (double v : sample_values) s2 += (v - m) * (v - m);
      e.std_error = std::sqrt(s2 / (sample_values.size() - 1.0) /
                              static_cast<double>(sample_values.size()));
    }
    return e;
  }
};

struct ElboOptions {
  int n_samples = 1;
  PresenceSampling presence = PresenceSampling::kRelaxed;
};

// One-sample latent draw from q plus the log-density of the draw.
namespace detail {
struct DrawnLatents {
  LatentState latents;
  std::vector<Tensor> log_q_per_layer;  // scalar per layer
};

inline DrawnLatents draw_latents(const ModelParams& params, const VariationalState& q,
                                 const ElboOptions& opt, RandomStream& rng) {
  DrawnLatents out;
  out.latents.presence.resize(params.layer_count());
  out.latents.pose.resize(params.layer_count());
  for (std::size_t k = 0; k < params.layer_count(); ++k) {
    Tensor log_q = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < params.capsules_in(k); ++i) {
      const CapsuleQ& c = q.layers[k][i];
      if (opt.presence == PresenceSampling::kRelaxed) {
        const double u = rng.uniform();
        Tensor t = clamp(relaxed_bernoulli_sample(c.logit, params.temperature, u),
                         kRelaxedClamp, 1.0 - kRelaxedClamp);
        log_q = add(log_q, sum(relaxed_bernoulli_log_prob(t, c.logit, params.temperature)));
        out.latents.presence[k].push_back(t);
      } else {
        const double p = 1.0 / (1.0 + std::exp(-c.logit[0]));
        const double t = rng.bernoulli(p) ? 1.0 : 0.0;
        log_q = add(log_q, Tensor::scalar(bernoulli_log_prob(t, p)));
        out.latents.presence[k].push_back(Tensor::scalar(t));
      }
      if (q.mode == PoseMode::kDelta) {
        out.latents.pose[k].push_back(Pose(c.pose_mean));  // zero entropy by convention
      } else {
        Tensor scale = add(softplus(c.pose_scale_raw), Tensor::scalar(kQPoseScaleFloor));
        std::vector<double> eps(6);
        for (auto& v : eps) v = rng.normal();
        Tensor sample = add(c.pose_mean, mul(scale, Tensor::from({2, 3}, eps)));
        log_q = add(log_q, sum(normal_log_prob(sample, c.pose_mean, scale)));
        out.latents.pose[k].push_back(Pose(sample));
      }
    }
    out.log_q_per_layer.push_back(log_q);
  }
  return out;
}
}  // namespace detail

// Monte-Carlo ELBO: mean over samples of log_joint - log q. Differentiable
// w.r.t. the variational parameters and the global model parameters.
inline ElboGraph elbo_graph(const ModelParams& params, const VariationalState& q,
                            const Tensor& image, const ElboOptions& opt,
                            RandomStream& rng) {
  if (opt.n_samples < 1) throw DomainError("elbo: n_samples must be >= 1");
  if (q.layers.size() != params.layer_count())
    throw ShapeError("elbo: variational state layers do not match the model");
  ElboGraph out;
  Tensor total = Tensor::scalar(0.0);
  Tensor lik = Tensor::scalar(0.0);
  std::vector<Tensor> layer_acc(params.layer_count(), Tensor::scalar(0.0));
  for (int s = 0; s < opt.n_samples; ++s) {
    auto draw = detail::draw_latents(params, q, opt, rng);
    LogJointTerms terms = log_joint_terms(params, draw.latents, image);
    Tensor sample_elbo = terms.likelihood;
    lik = add(lik, terms.likelihood);
    for (std::size_t k = 0; k < params.layer_count(); ++k) {
      Tensor p_term = k == 0 ? terms.top_prior : terms.layer_terms[k - 1];
      Tensor kl_term = sub(p_term, draw.log_q_per_layer[k]);
      layer_acc[k] = add(layer_acc[k], kl_term);
      sample_elbo = add(sample_elbo, kl_term);
    }
    const double v = sample_elbo.item();
    if (!std::isfinite(v)) {
      std::string bad = !std::isfinite(terms.likelihood.item()) ? "likelihood" : "layer";
      throw Error("elbo: non-finite estimate (offending term: " + bad + ")");
    }
    out.sample_values.push_back(v);
    total = add(total, sample_elbo);
  }
  const double inv = 1.0 / static_cast<double>(opt.n_samples);
  out.value = mul(total, Tensor::scalar(inv));
  out.likelihood_term = mul(lik, Tensor::scalar(inv));
  for (auto& t : layer_acc) out.layer_terms.push_back(mul(t, Tensor::scalar(inv)));
  return out;
}

inline ElboEstimate elbo_estimate(const ModelParams& params, const VariationalState& q,
                                  const Tensor& image, const ElboOptions& opt,
                                  RandomStream& rng) {
  return elbo_graph(params, q, image, opt, rng).estimate();
}

struct TracePoint {
  int step = 0;
  double elbo = 0.0;
  double likelihood_term = 0.0;
  std::vector<double> layer_terms;
};

struct FitOptions {
  int steps = 200;
  double step_size = 1e-2;
  int n_samples = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  // Common random numbers: reuse one noise stream every step. De-noises
  // gradient checks and monotonicity tests.
  bool frozen_noise = false;
  std::uint64_t frozen_seed = 2024;
};

struct FitError : Error {
  std::vector<TracePoint> trace;
  FitError(const std::string& what, std::vector<TracePoint> tr)
      : Error(what), trace(std::move(tr)) {}
};

struct FitResult {
  VariationalState state;
  std::vector<TracePoint> trace;
};

// Iterative ascent of the ELBO in the variational parameters. Model
// parameters are held fixed; the analytic selection sum inside log_joint is
// the E step realized at every iteration.
inline FitResult fit_free_form(const ModelParams& params, const Tensor& image,
                               const VariationalState& init, const FitOptions& opt,
                               RandomStream& rng) {
  if (opt.steps < 1) throw DomainError("fit_free_form: steps must be >= 1");
  FitResult res;
  res.state = init.clone();
  AdamOptimizer adam(res.state.parameters(),
                     {opt.step_size, opt.beta1, opt.beta2, 1e-8, /*maximize=*/true});
  ElboOptions eopt{opt.n_samples, PresenceSampling::kRelaxed};
  for (int step = 0; step < opt.steps; ++step) {
    RandomStream frozen(opt.frozen_seed);
    RandomStream& use = opt.frozen_noise ? frozen : rng;
    Tape tape;
    ElboGraph g = [&]() {
      try {
        return elbo_graph(params, res.state, image, eopt, use);
      } catch (const Error& e) {
        throw FitError(std::string("fit_free_form diverged at step ") +
                           std::to_string(step) + ": " + e.what(),
                       res.trace);
      }
    }();
    TracePoint tp;
    tp.step = step;
    tp.elbo = g.value.item();
    tp.likelihood_term = g.likelihood_term.item();
    for (const auto& t : g.layer_terms) tp.layer_terms.push_back(t.item());
    res.trace.push_back(std::move(tp));
    adam.zero_grad();
    backward(g.value);
    adam.step();
  }
  return res;
}

// Scene rendered at the variational means: poses at their points/means,
// presences at their sigmoid logits.
inline Canvas reconstruct(const ModelParams& params, const VariationalState& q) {
  const std::size_t last = params.layer_count() - 1;
  std::vector<Pose> poses;
  std::vector<Tensor> presences;
  for (std::size_t i = 0; i < params.capsules_in(last); ++i) {
    poses.push_back(Pose(q.layers[last][i].pose_mean));
    presences.push_back(sigmoid(q.layers[last][i].logit));
  }
  return composite_scene(params.materialize_templates(), poses, presences,
                         params.image_h, params.image_w);
}

inline void write_trace_csv(const std::string& path, const std::vector<TracePoint>& trace) {
  std::ofstream f(path);
  if (!f) throw Error("write_trace_csv: cannot open " + path);
  f << "step,elbo,likelihood_term";
  const std::size_t layers = trace.empty() ? 0 : trace.front().layer_terms.size();
  for (std::size_t k = 0; k < layers; ++k) f << ",kl_layer" << k;
  f << "\n";
  f.setf(std::ios::fmtflags(0), std::ios::floatfield);
  f.precision(17);
  for (const auto& tp : trace) {
    f << tp.step << ',' << tp.elbo << ',' << tp.likelihood_term;
    for (double v : tp.layer_terms) f << ',' << v;
    f << "\n";
  }
  if (!f) throw Error("write_trace_csv: short write to " + path);
}

}  // namespace caps

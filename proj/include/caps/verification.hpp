#pragma once

// Independent oracles for the model: a scalar-arithmetic re-implementation of
// the joint density with the selection variables enumerated by brute force,
// and a scalar renderer. Nothing here touches the tensor graph, so agreement
// with the analytic implementations is a genuine dual-route check. Also hosts
// the full finite-difference suite over the model stack.

#include "caps/gradcheck.hpp"
#include "caps/inference.hpp"
#include "caps/model.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace caps {
namespace oracle {

using Mat3 = std::array<double, 9>;

inline Mat3 mat_from_offset(const std::vector<double>& a) {
  return {1.0 + a[0], a[1], a[2], a[3], 1.0 + a[4], a[5], 0, 0, 1};
}

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 o{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      o[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
  return o;
}

inline Mat3 mat_inv_affine(const Mat3& m) {
  const double det = m[0] * m[4] - m[1] * m[3];
  return {m[4] / det,  -m[1] / det, (m[1] * m[5] - m[4] * m[2]) / det,
          -m[3] / det, m[0] / det,  (m[3] * m[2] - m[0] * m[5]) / det,
          0,           0,           1};
}

inline double gauss_lp(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * M_PI);
}

inline double bern_lp(double x, double p) {
  const double pc = std::min(std::max(p, kPresenceEps), 1.0 - kPresenceEps);
  return x * std::log(pc) + (1.0 - x) * std::log1p(-pc);
}

inline double logsumexp_vec(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (std::isinf(m) && m < 0) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Scalar bilinear sample with zero padding.
inline double sample_bilinear(const std::vector<double>& src, std::size_t h, std::size_t w,
                              double x, double y) {
  auto at = [&](long yy, long xx) -> double {
    if (yy < 0 || yy >= static_cast<long>(h) || xx < 0 || xx >= static_cast<long>(w))
      return 0.0;
    return src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double ax = x - fx, ay = y - fy;
  return (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x0 + 1) +
         (1 - ax) * ay * at(y0 + 1, x0) + ax * ay * at(y0 + 1, x0 + 1);
}

// Scalar re-implementation of warp + presence-weighted over-fold.
inline std::vector<double> render_scene(const ModelParams& params, const LatentState& st) {
  const std::size_t last = params.layer_count() - 1;
  const std::size_t h = params.image_h, w = params.image_w;
  const std::size_t th = params.template_h, tw = params.template_w;
  std::vector<double> color(h * w, 0.0), alpha(h * w, 0.0);
  for (std::size_t j = 0; j < params.n_templates(); ++j) {
    std::vector<double> tc(th * tw), ta(th * tw);
    for (std::size_t k = 0; k < th * tw; ++k) {
      tc[k] = 1.0 / (1.0 + std::exp(-params.templates_color_raw[j * th * tw + k]));
      ta[k] = 1.0 / (1.0 + std::exp(-params.templates_alpha_raw[j * th * tw + k]));
    }
    const double t = st.presence[last][j].item();
    Mat3 inv = mat_inv_affine(mat_from_offset(st.pose[last][j].offset.values()));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double sx = inv[0] * x + inv[1] * y + inv[2];
        const double sy = inv[3] * x + inv[4] * y + inv[5];
        const double ca = t * sample_bilinear(ta, th, tw, sx, sy);
        const double cc = sample_bilinear(tc, th, tw, sx, sy);
        const std::size_t p = y * w + x;
        const double ab = alpha[p] * (1.0 - ca);
        const double ao = ca + ab;
        color[p] = (cc * ca + color[p] * ab) / std::max(ao, kAlphaEps);
        alpha[p] = ao;
      }
  }
  for (std::size_t p = 0; p < color.size(); ++p) color[p] *= alpha[p];  // flatten
  return color;
}

// log p(t, A, X) with every joint selection assignment enumerated explicitly:
// (n_parents+1)^(n_children) terms per transition layer.
inline double brute_force_log_joint(const ModelParams& params, const LatentState& st,
                                    const Tensor& image) {
  double total = 0.0;
  for (std::size_t i = 0; i < params.n_top; ++i) {
    total += bern_lp(st.presence[0][i].item(), params.presence_prior);
    for (double v : st.pose[0][i].offset.values()) total += gauss_lp(v, 0.0, 1.0);
  }

  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const LayerParams& layer = params.layers[k];
    const std::size_t np = layer.n_parents, nc = layer.n_children;

    // per (child, parent) branch log-probs: selection + presence + pose
    std::vector<std::vector<double>> branch(nc, std::vector<double>(np + 1));
    std::vector<double> weights(np + 1);
    weights[0] = layer.rho_dummy;
    for (std::size_t j = 0; j < nc; ++j) {
      double weight_sum = layer.rho_dummy;
      for (std::size_t i = 0; i < np; ++i) {
        weights[i + 1] = layer.rho_value(i, j) * st.presence[k][i].item();
        weight_sum += weights[i + 1];
      }
      for (std::size_t i = 0; i <= np; ++i) {
        double lp = std::log(i == 0 ? layer.rho_dummy : weights[i]) - std::log(weight_sum);
        lp += bern_lp(st.presence[k + 1][j].item(), layer.gamma_value(i, j));
        if (i == 0) {
          for (double v : st.pose[k + 1][j].offset.values())
            lp += gauss_lp(v, 0.0, layer.c_dummy);
        } else {
          const double t = st.presence[k][i - 1].item();
          Mat3 mean = mat_mul(mat_from_offset(st.pose[k][i - 1].offset.values()),
                              mat_from_offset(layer.pose_offset(i - 1, j).offset.values()));
          const double sd = layer.c_value(i - 1, j);
          double on = 0.0, off = 0.0;
          const double mean_off[6] = {mean[0] - 1.0, mean[1], mean[2],
                                      mean[3], mean[4] - 1.0, mean[5]};
          for (std::size_t e = 0; e < 6; ++e) {
            const double v = st.pose[k + 1][j].offset[e];
            on += gauss_lp(v, mean_off[e], sd);
            off += gauss_lp(v, 0.0, layer.lambda_off);
          }
          lp += t * on + (1.0 - t) * off;
        }
        branch[j][i] = lp;
      }
    }

    // enumerate joint assignments s_1..s_nc
    std::vector<std::size_t> s(nc, 0);
    std::vector<double> assignment_lps;
    for (;;) {
      double lp = 0.0;
      for (std::size_t j = 0; j < nc; ++j) lp += branch[j][s[j]];
      assignment_lps.push_back(lp);
      std::size_t j = 0;
      while (j < nc && ++s[j] == np + 1) s[j++] = 0;
      if (j == nc) break;
    }
    total += logsumexp_vec(assignment_lps);
  }

  std::vector<double> scene = render_scene(params, st);
  const double sigma = params.sigma_value();
  for (std::size_t p = 0; p < scene.size(); ++p)
    total += gauss_lp(image[p], scene[p], sigma);
  return total;
}

}  // namespace oracle

struct OracleResult {
  std::string name;
  double max_abs_err = 0.0;
  bool ok(double tol) const { return max_abs_err < tol; }
};

// Random model parameters and latents at a given size, for oracle sweeps.
inline ModelParams random_small_model(std::size_t n_top, std::size_t n_templates,
                                      RandomStream& rng, std::size_t image_size = 6,
                                      std::size_t template_size = 3) {
  ModelParams m = ModelParams::create(n_top, n_templates, image_size, image_size,
                                      template_size);
  LayerParams& l = m.layers[0];
  for (std::size_t i = 0; i < n_top; ++i)
    for (std::size_t j = 0; j < n_templates; ++j) {
      l.set_rho(i, j, rng.uniform(0.05, 2.0));
      l.set_gamma(i + 1, j, rng.uniform(0.05, 0.95));
      l.set_c(i, j, rng.uniform(0.15, 1.5));
      l.set_pose_offset(i, j, make_pose(rng.uniform(-2, 2), rng.uniform(-2, 2),
                                        rng.uniform(-0.8, 0.8), rng.uniform(0.6, 1.5)));
    }
  for (std::size_t j = 0; j < n_templates; ++j) l.set_gamma(0, j, rng.uniform(0.05, 0.95));
  l.rho_dummy = rng.uniform(0.05, 0.5);
  l.lambda_off = rng.uniform(5.0, 15.0);
  l.c_dummy = rng.uniform(5.0, 15.0);
  m.presence_prior = rng.uniform(0.2, 0.8);
  std::vector<double> tc(template_size * template_size), ta(tc.size());
  for (std::size_t j = 0; j < n_templates; ++j) {
    for (auto& v : tc) v = rng.uniform(0.05, 0.95);
    for (auto& v : ta) v = rng.uniform(0.05, 0.95);
    m.set_template(j, tc, ta);
  }
  return m;
}

inline LatentState random_latents(const ModelParams& params, RandomStream& rng,
                                  bool hard_presence) {
  LatentState st;
  st.presence.resize(params.layer_count());
  st.pose.resize(params.layer_count());
  for (std::size_t k = 0; k < params.layer_count(); ++k)
    for (std::size_t i = 0; i < params.capsules_in(k); ++i) {
      const double t = hard_presence ? (rng.bernoulli(0.5) ? 1.0 : 0.0)
                                     : rng.uniform(0.02, 0.98);
      st.presence[k].push_back(Tensor::scalar(t));
      std::vector<double> off(6);
      for (auto& v : off) v = rng.uniform(-0.5, 0.5);
      st.pose[k].push_back(Pose(Tensor::from({2, 3}, off)));
    }
  return st;
}

// Analytic s-marginalized log_joint vs. explicit enumeration over all joint
// selection assignments, for all sizes up to max_parents x max_children.
inline OracleResult run_marginalization_oracle(std::uint64_t seed = 101, int seeds_per_size = 12,
                                               std::size_t max_parents = 3,
                                               std::size_t max_children = 3) {
  RandomStream rng(seed);
  OracleResult res{"selection_marginalization", 0.0};
  for (std::size_t np = 1; np <= max_parents; ++np)
    for (std::size_t nc = 1; nc <= max_children; ++nc)
      for (int trial = 0; trial < seeds_per_size; ++trial) {
        RandomStream local = rng.fork(np * 1000 + nc * 100 + trial);
        ModelParams m = random_small_model(np, nc, local);
        LatentState st = random_latents(m, local, trial % 2 == 0);
        std::vector<double> img(m.image_h * m.image_w);
        for (auto& v : img) v = local.uniform();
        Tensor image = Tensor::from({m.image_h, m.image_w}, img);
        const double analytic = log_joint(m, st, image).item();
        const double brute = oracle::brute_force_log_joint(m, st, image);
        res.max_abs_err = std::max(res.max_abs_err, std::abs(analytic - brute));
      }
  return res;
}

// Finite-difference checks of the composed model stack: renderer, the
// selection-marginalized child conditional, and the frozen-noise ELBO with
// respect to both variational and global parameters.
inline std::vector<GradCheckResult> run_model_gradient_checks(std::uint64_t seed = 23,
                                                              int points = 8) {
  RandomStream rng(seed);
  std::vector<GradCheckResult> results;

  {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
      std::vector<double> x;
      for (int i = 0; i < 12; ++i) x.push_back(rng.uniform(-0.3, 0.3));
      x[2] += rng.uniform(0.4, 1.3);
      x[5] += rng.uniform(-1.3, -0.4);
      x[8] += rng.uniform(0.4, 1.3);
      x[11] += rng.uniform(0.4, 1.3);
      for (int i = 0; i < 2; ++i) x.push_back(rng.uniform(0.2, 0.9));
      for (int i = 0; i < 16; ++i) x.push_back(rng.uniform(0.1, 0.9));
      worst = std::max(
          worst,
          finite_difference_check(
              [](const Tensor& v) {
                Pose p0(reshape(take(v, {0, 1, 2, 3, 4, 5}), {2, 3}));
                Pose p1(reshape(take(v, {6, 7, 8, 9, 10, 11}), {2, 3}));
                Template t0{reshape(take(v, {14, 15, 16, 17}), {2, 2}),
                            reshape(take(v, {18, 19, 20, 21}), {2, 2})};
                Template t1{reshape(take(v, {22, 23, 24, 25}), {2, 2}),
                            reshape(take(v, {26, 27, 28, 29}), {2, 2})};
                Canvas out = composite_scene({t0, t1}, {p0, p1},
                                             {take(v, {12}), take(v, {13})}, 4, 4);
                Tensor w = detail::grid_x(4, 4) * 0.13 + detail::grid_y(4, 4) * 0.09;
                return add(sum(mul(out.color, w)), sum(mul(out.alpha, w * 0.5)));
              },
              Tensor::from({30}, x), 1e-5));
    }
    results.push_back({"renderer_composite", worst});
  }

  {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
      std::vector<double> x;
      for (int i = 0; i < 12; ++i) x.push_back(rng.uniform(-0.5, 0.5));
      x.push_back(rng.uniform(0.1, 0.9));   // parent t
      x.push_back(rng.uniform(0.1, 0.9));   // child t
      x.push_back(rng.uniform(-0.5, 0.8));  // rho raw
      x.push_back(rng.uniform(-0.8, 0.8));  // gamma raw dummy
      x.push_back(rng.uniform(-0.8, 0.8));  // gamma raw parent
      for (int i = 0; i < 6; ++i) x.push_back(rng.uniform(-0.4, 0.4));
      x.push_back(rng.uniform(-0.5, 0.5));  // c raw
      worst = std::max(
          worst, finite_difference_check(
                     [](const Tensor& v) {
                       LayerParams l = LayerParams::create(1, 1);
                       l.rho_raw = reshape(take(v, {14}), {1, 1});
                       l.gamma_raw = reshape(take(v, {15, 16}), {2, 1});
                       l.pose_offsets = reshape(take(v, {17, 18, 19, 20, 21, 22}), {1, 1, 6});
                       l.c_raw = reshape(take(v, {23}), {1, 1});
                       Pose child(reshape(take(v, {0, 1, 2, 3, 4, 5}), {2, 3}));
                       Pose parent(reshape(take(v, {6, 7, 8, 9, 10, 11}), {2, 3}));
                       return child_conditional_log_prob(l, 0, take(v, {13}), child,
                                                         {take(v, {12})}, {parent});
                     },
                     Tensor::from({24}, x), 1e-5));
    }
    results.push_back({"child_conditional", worst});
  }

  {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
      RandomStream local = rng.fork(p + 40);
      ModelParams m = random_small_model(1, 2, local);
      std::vector<double> img(m.image_h * m.image_w);
      for (auto& v : img) v = local.uniform();
      Tensor image = Tensor::from({m.image_h, m.image_w}, img);
      std::vector<double> x{local.uniform(-1, 1), local.uniform(-1, 1), local.uniform(-1, 1)};
      for (int i = 0; i < 18; ++i) x.push_back(local.uniform(-0.4, 0.4));
      const std::uint64_t noise_seed = local.next_u64();
      worst = std::max(
          worst,
          finite_difference_check(
              [&](const Tensor& v) {
                VariationalState q;
                q.mode = PoseMode::kDelta;
                q.layers.resize(2);
                for (std::size_t k = 0, slot = 0; k < 2; ++k)
                  for (std::size_t i = 0; i < m.capsules_in(k); ++i, ++slot) {
                    CapsuleQ c;
                    c.logit = take(v, {slot});
                    std::vector<std::size_t> idx;
                    for (std::size_t e = 0; e < 6; ++e) idx.push_back(3 + slot * 6 + e);
                    c.pose_mean = reshape(take(v, idx), {2, 3});
                    c.pose_scale_raw = Tensor::zeros({2, 3});
                    q.layers[k].push_back(std::move(c));
                  }
                RandomStream frozen(noise_seed);
                return elbo_graph(m, q, image, {2, PresenceSampling::kRelaxed}, frozen).value;
              },
              Tensor::from({21}, x), 1e-5));
    }
    results.push_back({"elbo_frozen_noise_phi", worst});
  }

  {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
      RandomStream local = rng.fork(p + 90);
      ModelParams m = random_small_model(1, 2, local);
      std::vector<double> img(m.image_h * m.image_w);
      for (auto& v : img) v = local.uniform();
      Tensor image = Tensor::from({m.image_h, m.image_w}, img);
      RandomStream qr(p + 7);
      VariationalState q = VariationalState::create(m, PoseMode::kDelta, qr);
      std::vector<double> x;
      auto push_all = [&x](const Tensor& t) {
        for (double v : t.values()) x.push_back(v);
      };
      push_all(m.layers[0].rho_raw);
      push_all(m.layers[0].gamma_raw);
      push_all(m.layers[0].pose_offsets);
      push_all(m.layers[0].c_raw);
      push_all(m.templates_color_raw);
      push_all(m.templates_alpha_raw);
      const std::uint64_t noise_seed = local.next_u64();
      worst = std::max(
          worst,
          finite_difference_check(
              [&](const Tensor& v) {
                ModelParams pm = m.clone();
                std::size_t off = 0;
                auto grab = [&](Shape shape) {
                  std::vector<std::size_t> idx(numel(shape));
                  for (auto& e : idx) e = off++;
                  return reshape(take(v, idx), shape);
                };
                pm.layers[0].rho_raw = grab({1, 2});
                pm.layers[0].gamma_raw = grab({2, 2});
                pm.layers[0].pose_offsets = grab({1, 2, 6});
                pm.layers[0].c_raw = grab({1, 2});
                pm.templates_color_raw = grab({2, m.template_h, m.template_w});
                pm.templates_alpha_raw = grab({2, m.template_h, m.template_w});
                RandomStream frozen(noise_seed);
                return elbo_graph(pm, q, image, {2, PresenceSampling::kRelaxed}, frozen).value;
              },
              Tensor::from({x.size()}, x), 1e-5));
    }
    results.push_back({"elbo_frozen_noise_theta", worst});
  }

  return results;
}

// Every primitive plus the composed model stack.
inline std::vector<GradCheckResult> run_full_gradient_suite(std::uint64_t seed = 7,
                                                            int primitive_points = 100,
                                                            int model_points = 8) {
  std::vector<GradCheckResult> all = run_primitive_gradient_checks(seed, primitive_points);
  for (auto& r : run_model_gradient_checks(seed + 1, model_points)) all.push_back(r);
  return all;
}

// log sum over all hard presence assignments of exp(log_joint) with poses
// held fixed: the exact evidence of the enumerable toy that the ELBO bounds.
inline double enumerate_presence_evidence(const ModelParams& params, const LatentState& poses,
                                          const Tensor& image) {
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t k = 0; k < params.layer_count(); ++k)
    for (std::size_t i = 0; i < params.capsules_in(k); ++i) slots.emplace_back(k, i);
  if (slots.size() > 20)
    throw Error("enumerate_presence_evidence: too many capsules to enumerate");
  std::vector<double> lps;
  for (std::size_t mask = 0; mask < (1u << slots.size()); ++mask) {
    LatentState st = poses;
    for (std::size_t b = 0; b < slots.size(); ++b) {
      auto [k, i] = slots[b];
      st.presence[k][i] = Tensor::scalar((mask >> b) & 1 ? 1.0 : 0.0);
    }
    lps.push_back(oracle::brute_force_log_joint(params, st, image));
  }
  return oracle::logsumexp_vec(lps);
}

}  // namespace caps

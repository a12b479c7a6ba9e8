#pragma once

// Stochastic maximization of the bound in the global parameters: per image,
// free-form inference steps fit the variational parameters (E), then one
// gradient step on theta with phi held fixed (M). Both gradients come out of
// a single backward pass over the same scalar ELBO; the per-image final
// passes are reduced serially in index order so results are independent of
// the worker count.

#include "caps/dataset.hpp"
#include "caps/inference.hpp"
#include "caps/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace caps {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  int inner_inference_steps = 20;
  double learning_rate_theta = 0.02;
  double learning_rate_phi = 0.05;
  int n_samples = 1;
  std::uint64_t seed = 0;
  PoseMode pose_mode = PoseMode::kDelta;
  double sigma_min = kSigmaFloor;  // enforced by construction; echoed here
  double c_min = kCFloor;
  double temperature = 1.0;
  double holdout_fraction = 0.1;
  int eval_steps = 0;        // 0: use inner_inference_steps
  int eval_samples = 8;
  std::size_t eval_train_cap = 128;  // evaluate at most this many train images
  bool freeze_templates = false;
  bool learn_sigma = false;
  unsigned threads = 0;  // 0: available parallelism
  double phi_pose_init_jitter = 0.03;
  PhiInit phi_init = PhiInit::kMatched;
  // Seed pose-offset rows from data before training (farthest-first over a
  // candidate pool, one poorly-explained image per parent).
  bool seed_offsets_from_data = false;
  // theta update rule: group-RMS-normalized momentum SGD preserves the
  // responsibility weighting of mixture gradients; adam is per-coordinate
  std::string theta_optimizer = "group_rms";  // "group_rms" | "adam"
  double theta_lr_decay = 1.0;  // per-epoch multiplicative decay
  bool snapshot_params = false;
};

struct EpochStats {
  int epoch = 0;
  double train_elbo = 0.0;
  double holdout_elbo = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::vector<ModelParams> snapshots;  // one per epoch when requested
};

namespace detail {

// Read-only copy whose tensors never require gradients; safe to share across
// worker threads during the inner inference loops.
inline ModelParams frozen_copy(const ModelParams& params) {
  ModelParams m = params;
  m.sigma_raw = Tensor::from(params.sigma_raw.shape(), params.sigma_raw.values(), false);
  m.templates_color_raw = params.templates_color_raw.detach();
  m.templates_alpha_raw = params.templates_alpha_raw.detach();
  for (auto& l : m.layers) {
    l.rho_raw = l.rho_raw.detach();
    l.gamma_raw = l.gamma_raw.detach();
    l.pose_offsets = l.pose_offsets.detach();
    l.c_raw = l.c_raw.detach();
  }
  return m;
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return detail::splitmix64(a ^ detail::splitmix64(b ^ detail::splitmix64(c)));
}

// Fresh phi heuristically initialized, fitted for a fixed number of steps.
inline VariationalState fit_phi(const ModelParams& frozen, const Tensor& image,
                                const TrainConfig& cfg, int steps, std::uint64_t seed) {
  RandomStream rng(seed);
  VariationalState q =
      cfg.phi_init == PhiInit::kMatched
          ? matched_filter_init(frozen, image, cfg.pose_mode, rng, cfg.phi_pose_init_jitter)
          : VariationalState::create(frozen, cfg.pose_mode, rng, cfg.phi_pose_init_jitter);
  FitOptions fo;
  fo.steps = steps;
  fo.step_size = cfg.learning_rate_phi;
  fo.n_samples = cfg.n_samples;
  return fit_free_form(frozen, image, q, fo, rng).state;
}

inline double evaluate_mean_elbo(const ModelParams& params, const Dataset& data,
                                 const std::vector<std::size_t>& indices,
                                 const TrainConfig& cfg, std::uint64_t eval_seed) {
  if (indices.empty()) return 0.0;
  const ModelParams frozen = frozen_copy(params);
  const int steps = cfg.eval_steps > 0 ? cfg.eval_steps : cfg.inner_inference_steps;
  std::vector<double> values(indices.size(), 0.0);
  parallel_for(indices.size(), cfg.threads, [&](std::size_t i) {
    // seeded per image, not per epoch: common random numbers across epochs
    const std::uint64_t s = mix(eval_seed, indices[i], 0x5eed);
    Tensor image = data.image_tensor(indices[i]);
    VariationalState q = fit_phi(frozen, image, cfg, steps, s);
    RandomStream rng(mix(eval_seed, indices[i], 0xe1b0));
    values[i] =
        elbo_estimate(frozen, q, image, {cfg.eval_samples, PresenceSampling::kRelaxed}, rng)
            .value;
  });
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

}  // namespace detail

// Random re-initialization of the learnable parameters, used for training
// from scratch and for plant-and-recover runs. Pose-offset translations land
// in the central region of the canvas; template planes become gray noise.
inline void randomize_parameters(ModelParams& m, RandomStream& rng,
                                 bool randomize_templates = true) {
  const double s = static_cast<double>(std::min(m.image_h, m.image_w));
  const double tc = (m.template_w - 1) / 2.0;
  for (auto& l : m.layers)
    for (std::size_t i = 0; i < l.n_parents; ++i)
      for (std::size_t j = 0; j < l.n_children; ++j) {
        l.set_rho(i, j, rng.uniform(0.2, 0.8));
        l.set_gamma(i + 1, j, rng.uniform(0.25, 0.75));
        l.set_c(i, j, rng.uniform(0.25, 0.5));
        Pose offset = make_pose(rng.uniform(0.25 * s, 0.75 * s) - tc,
                                rng.uniform(0.25 * s, 0.75 * s) - tc,
                                rng.uniform(-0.1, 0.1));
        l.set_pose_offset(i, j, offset);
      }
  for (auto& l : m.layers)
    for (std::size_t j = 0; j < l.n_children; ++j) l.set_gamma(0, j, rng.uniform(0.02, 0.2));
  if (randomize_templates) {
    for (auto& v : m.templates_color_raw.mutable_values()) v = rng.normal(0.0, 0.5);
    for (auto& v : m.templates_alpha_raw.mutable_values()) v = rng.normal(-0.5, 0.5);
  }
}

// Farthest-first data seeding of the pose-offset rows: parents start with
// near-zero affinity, then one at a time each parent adopts the child
// constellation inferred from whichever candidate image the current model
// explains worst. The classic empty-cluster cure for mixture EM; without it,
// iid-random offset rows greedily capture one cluster per slot and lock into
// scrambled part assignments (the duplication pathology).
inline void seed_pose_offsets_from_data(ModelParams& params, const Dataset& data,
                                        const TrainConfig& cfg, RandomStream& rng) {
  params.validate();
  if (params.layers.size() != 1)
    throw Error("seed_pose_offsets_from_data: supports two-layer models only");
  LayerParams& layer = params.layers[0];
  const std::size_t np = layer.n_parents, nc = layer.n_children;
  const double tw = (params.template_w - 1) / 2.0, th2 = (params.template_h - 1) / 2.0;
  (void)tw;
  (void)th2;

  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  rng.shuffle(all);
  const std::size_t pool = std::min<std::size_t>(all.size(), 16 * np);
  std::vector<std::size_t> cand(all.begin(), all.begin() + pool);

  // deactivate all rows; seeded rows are switched on one by one
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t j = 0; j < nc; ++j) layer.set_rho(i, j, 0.01);

  TrainConfig quick = cfg;
  quick.pose_mode = PoseMode::kDelta;
  for (std::size_t i = 0; i < np; ++i) {
    const ModelParams frozen = detail::frozen_copy(params);
    // pick a scene the renderer fits cleanly (top render quality, all
    // templates clearly present) that the parents explain poorly
    std::vector<double> lik(cand.size()), cond(cand.size()), ton(cand.size());
    parallel_for(cand.size(), cfg.threads, [&](std::size_t k) {
      const std::uint64_t s = detail::mix(cfg.seed, cand[k], 0x5eed5 + i);
      Tensor image = data.image_tensor(cand[k]);
      VariationalState q = detail::fit_phi(frozen, image, quick, 30, s);
      RandomStream er(detail::mix(cfg.seed, cand[k], 0xe1b05 + i));
      ElboEstimate e =
          elbo_estimate(frozen, q, image, {2, PresenceSampling::kRelaxed}, er);
      lik[k] = e.likelihood_term;
      cond[k] = e.layer_terms.back();
      double tmin = 1.0;
      const std::size_t lst = q.layers.size() - 1;
      for (std::size_t j = 0; j < q.layers[lst].size(); ++j)
        tmin = std::min(tmin, q.mean_presence(lst, j));
      ton[k] = tmin;
    });
    std::vector<double> lik_sorted = lik;
    std::sort(lik_sorted.begin(), lik_sorted.end());
    const double lik_bar = lik_sorted[3 * lik_sorted.size() / 4];

    // fit the chosen scene and adopt its constellation, unless it matches a
    // row that is already seeded (duplicate class); then try the next-worst
    std::vector<std::size_t> order(cand.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const bool ca = lik[a] >= lik_bar && ton[a] > 0.65;
      const bool cb = lik[b] >= lik_bar && ton[b] > 0.65;
      if (ca != cb) return ca;
      return cond[a] < cond[b];
    });
    bool seeded = false;
    for (std::size_t pick_rank = 0; pick_rank < order.size() && !seeded; ++pick_rank) {
      const std::size_t pick = order[pick_rank];
      Tensor image = data.image_tensor(cand[pick]);
      RandomStream ir(detail::mix(cfg.seed, i * 131 + pick_rank, 0x5eedf));
      VariationalState q = matched_filter_init(detail::frozen_copy(params), image,
                                               PoseMode::kDelta, ir, 0.0);
      FitOptions fo;
      fo.steps = 120;
      fo.step_size = cfg.learning_rate_phi;
      FitResult fit = fit_free_form(detail::frozen_copy(params), image, q, fo, ir);
      bool duplicate = false;
      for (std::size_t prev = 0; prev < i && !duplicate; ++prev) {
        double mean = 0.0;
        for (std::size_t j = 0; j < nc; ++j) {
          const auto& fitted = fit.state.layers[1][j].pose_mean.values();
          Pose m = layer.pose_offset(prev, j);
          mean += std::hypot(fitted[2] - m.offset[2], fitted[5] - m.offset[5]);
        }
        duplicate = mean / nc < 0.5 * params.template_w;
      }
      if (duplicate) continue;
      for (std::size_t j = 0; j < nc; ++j) {
        // translations only: matrix parts start at identity, which group-RMS
        // steps would otherwise correct far too slowly
        const auto& fitted = fit.state.layers[1][j].pose_mean.values();
        layer.set_pose_offset(i, j,
                              Pose(Tensor::from({2, 3}, {0, 0, fitted[2], 0, 0, fitted[5]})));
        layer.set_rho(i, j, 0.5);
        layer.set_c(i, j, std::max(0.2, layer.c_min + 0.05));
      }
      cand.erase(cand.begin() + pick);
      seeded = true;
    }
  }
}

inline std::pair<ModelParams, TrainReport> fit_parameters(const Dataset& data,
                                                          const TrainConfig& cfg,
                                                          const ModelParams& init,
                                                          RandomStream& rng) {
  if (data.size() == 0) throw Error("fit_parameters: empty dataset");
  init.validate();
  if (data.h != init.image_h || data.w != init.image_w)
    throw ShapeError("fit_parameters: dataset is " + std::to_string(data.h) + "x" +
                     std::to_string(data.w) + ", model expects " +
                     std::to_string(init.image_h) + "x" + std::to_string(init.image_w));

  ModelParams params = init;
  params.temperature = cfg.temperature;
  params.learn_sigma = cfg.learn_sigma;
  params.learn_templates = !cfg.freeze_templates;
  for (auto& l : params.layers) l.c_min = cfg.c_min;
  params = params.clone();
  const std::uint64_t base = detail::mix(cfg.seed, rng.seed(), 0xba5e);
  if (cfg.seed_offsets_from_data) {
    RandomStream seed_rng(base ^ 0x5eed);
    seed_pose_offsets_from_data(params, data, cfg, seed_rng);
  }

  const std::size_t n_holdout =
      std::min(data.size() - 1,
               static_cast<std::size_t>(std::ceil(data.size() * cfg.holdout_fraction)));
  const std::size_t n_train = data.size() - n_holdout;
  std::vector<std::size_t> train_idx(n_train), holdout_idx(n_holdout);
  for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
  for (std::size_t i = 0; i < n_holdout; ++i) holdout_idx[i] = n_train + i;
  std::vector<std::size_t> eval_train_idx(
      train_idx.begin(),
      train_idx.begin() + std::min(cfg.eval_train_cap ? cfg.eval_train_cap : n_train, n_train));

  AdamConfig theta_cfg{cfg.learning_rate_theta, 0.9, 0.999, 1e-8, /*maximize=*/true};
  AdamOptimizer adam_theta(params.trainable_parameters(), theta_cfg);
  GroupRmsOptimizer rms_theta(params.trainable_parameters(), theta_cfg);
  const bool use_rms = cfg.theta_optimizer != "adam";
  auto theta_zero_grad = [&] { use_rms ? rms_theta.zero_grad() : adam_theta.zero_grad(); };
  auto theta_step = [&] { use_rms ? rms_theta.step() : adam_theta.step(); };
  auto theta_set_lr = [&](double lr) {
    use_rms ? rms_theta.set_learning_rate(lr) : adam_theta.set_learning_rate(lr);
  };
  TrainReport report;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    theta_set_lr(cfg.learning_rate_theta * std::pow(cfg.theta_lr_decay, epoch));
    std::vector<std::size_t> order = train_idx;
    RandomStream shuffle_rng(detail::mix(base, epoch, 0x0bde));
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bn =
          std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - start);

      // E: fit per-image phi in parallel against a frozen parameter snapshot
      const ModelParams frozen = detail::frozen_copy(params);
      std::vector<VariationalState> fitted(bn);
      parallel_for(bn, cfg.threads, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        fitted[b] = detail::fit_phi(frozen, data.image_tensor(idx), cfg,
                                    cfg.inner_inference_steps,
                                    detail::mix(base, epoch * 1000003 + idx, 0xf17));
      });

      // M: one backward pass per image on the live parameters, serial and in
      // batch order; gradients for theta and phi come from the same scalar
      theta_zero_grad();
      for (std::size_t b = 0; b < bn; ++b) {
        const std::size_t idx = order[start + b];
        RandomStream final_rng(detail::mix(base, epoch * 1000003 + idx, 0x7e7a));
        Tape tape;
        ElboGraph g;
        try {
          g = elbo_graph(params, fitted[b], data.image_tensor(idx),
                         {cfg.n_samples, PresenceSampling::kRelaxed}, final_rng);
        } catch (const Error& e) {
          throw Error("fit_parameters: non-finite loss at epoch " + std::to_string(epoch) +
                      ", batch " + std::to_string(start / cfg.batch_size) + ", image " +
                      std::to_string(idx) + ": " + e.what());
        }
        backward(g.value);
      }
      for (const auto& p : rms_theta.params()) {
        auto& grad = p.node()->grad;
        if (grad.size() != p.size()) continue;
        for (double& gv : grad) gv /= static_cast<double>(bn);
      }
      theta_step();
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_elbo =
        detail::evaluate_mean_elbo(params, data, eval_train_idx, cfg, base ^ 0xaaaa);
    stats.holdout_elbo = holdout_idx.empty()
                             ? stats.train_elbo
                             : detail::evaluate_mean_elbo(params, data, holdout_idx, cfg,
                                                          base ^ 0xbbbb);
    if (!std::isfinite(stats.train_elbo) || !std::isfinite(stats.holdout_elbo))
      throw Error("fit_parameters: non-finite evaluation at epoch " + std::to_string(epoch));
    report.epochs.push_back(stats);
    if (cfg.snapshot_params) report.snapshots.push_back(params.clone());
  }
  return {std::move(params), std::move(report)};
}

// Continue training in full-posterior pose mode from delta-mode parameters.
inline std::pair<ModelParams, TrainReport> warm_start_full_posterior(
    const ModelParams& params, const Dataset& data, TrainConfig cfg) {
  cfg.pose_mode = PoseMode::kFull;
  RandomStream rng(cfg.seed + 1);
  return fit_parameters(data, cfg, params, rng);
}

// ---- config serialization ----

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"inner_inference_steps", c.inner_inference_steps},
          {"learning_rate_theta", c.learning_rate_theta},
          {"learning_rate_phi", c.learning_rate_phi},
          {"n_samples", c.n_samples},
          {"seed", c.seed},
          {"pose_mode", c.pose_mode == PoseMode::kDelta ? "delta" : "full"},
          {"sigma_min", c.sigma_min},
          {"c_min", c.c_min},
          {"temperature", c.temperature},
          {"holdout_fraction", c.holdout_fraction},
          {"eval_steps", c.eval_steps},
          {"eval_samples", c.eval_samples},
          {"eval_train_cap", c.eval_train_cap},
          {"freeze_templates", c.freeze_templates},
          {"learn_sigma", c.learn_sigma},
          {"threads", c.threads},
          {"phi_pose_init_jitter", c.phi_pose_init_jitter},
          {"phi_init", c.phi_init == PhiInit::kMatched ? "matched" : "anchor"},
          {"seed_offsets_from_data", c.seed_offsets_from_data},
          {"theta_optimizer", c.theta_optimizer},
          {"theta_lr_decay", c.theta_lr_decay}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.inner_inference_steps = j.value("inner_inference_steps", c.inner_inference_steps);
  c.learning_rate_theta = j.value("learning_rate_theta", c.learning_rate_theta);
  c.learning_rate_phi = j.value("learning_rate_phi", c.learning_rate_phi);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.seed = j.value("seed", c.seed);
  c.pose_mode = j.value("pose_mode", std::string("delta")) == "full" ? PoseMode::kFull
                                                                     : PoseMode::kDelta;
  c.temperature = j.value("temperature", c.temperature);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.eval_steps = j.value("eval_steps", c.eval_steps);
  c.eval_samples = j.value("eval_samples", c.eval_samples);
  c.eval_train_cap = j.value("eval_train_cap", c.eval_train_cap);
  c.freeze_templates = j.value("freeze_templates", c.freeze_templates);
  c.learn_sigma = j.value("learn_sigma", c.learn_sigma);
  c.threads = j.value("threads", c.threads);
  c.phi_pose_init_jitter = j.value("phi_pose_init_jitter", c.phi_pose_init_jitter);
  c.phi_init = j.value("phi_init", std::string("matched")) == "anchor" ? PhiInit::kAnchor
                                                                       : PhiInit::kMatched;
  c.seed_offsets_from_data = j.value("seed_offsets_from_data", c.seed_offsets_from_data);
  c.theta_optimizer = j.value("theta_optimizer", c.theta_optimizer);
  c.theta_lr_decay = j.value("theta_lr_decay", c.theta_lr_decay);
  return c;
}

}  // namespace caps

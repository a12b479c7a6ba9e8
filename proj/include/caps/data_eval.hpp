#pragma once

// Synthetic dataset generation from planted models, per-image inference over
// datasets, linear readout on the inferred top-level latents, and metrics.
// A class is a designated top-level parent forced on; every parent renders
// all templates in its own fixed constellation, so classes differ by
// arrangement and the readout task is well-posed by construction.

#include "caps/dataset.hpp"
#include "caps/parallel.hpp"
#include "caps/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace caps {

struct SyntheticSpec {
  std::size_t n_classes = 4;
  std::size_t samples_per_class = 125;
  double translation_jitter = 0.3;  // +-px on the class parent pose
  double rotation_jitter = 0.02;    // +-radians
  double scale_jitter = 0.0;        // +-fraction
  double clutter_rate = 0.0;        // per-child chance of a forced clutter attach
  double noise_sigma = 0.05;        // pixel noise added to rendered scenes
  std::uint64_t seed = 0;
};

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"n_classes", s.n_classes},
          {"samples_per_class", s.samples_per_class},
          {"translation_jitter", s.translation_jitter},
          {"rotation_jitter", s.rotation_jitter},
          {"scale_jitter", s.scale_jitter},
          {"clutter_rate", s.clutter_rate},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.n_classes = j.value("n_classes", s.n_classes);
  s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
  s.translation_jitter = j.value("translation_jitter", s.translation_jitter);
  s.rotation_jitter = j.value("rotation_jitter", s.rotation_jitter);
  s.scale_jitter = j.value("scale_jitter", s.scale_jitter);
  s.clutter_rate = j.value("clutter_rate", s.clutter_rate);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  return s;
}

// ---- the standard planted benchmark ----

namespace detail {
inline std::vector<double> glyph_color(int kind, std::size_t n, double shade) {
  std::vector<double> v(n * n, 0.0);
  auto set = [&](std::size_t y, std::size_t x) { v[y * n + x] = shade; };
  const std::size_t mid = n / 2;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      switch (kind % 6) {
        case 0:  // horizontal bar
          if (a == mid || a + 1 == mid) set(a, b);
          break;
        case 1:  // vertical bar
          if (b == mid || b + 1 == mid) set(a, b);
          break;
        case 2:  // diagonal cross
          if (a == b || a + b + 1 == n) set(a, b);
          break;
        case 3:  // ring
          if (a == 0 || b == 0 || a + 1 == n || b + 1 == n) set(a, b);
          break;
        case 4:  // filled block
          if (a >= 1 && b >= 1 && a + 1 < n && b + 1 < n) set(a, b);
          break;
        default:  // corner
          if (a + 1 >= n - 1 || b <= 1) set(a, b);
          break;
      }
    }
  return v;
}
}  // namespace detail

// Planted two-layer model: n_parents constellations over n_templates glyph
// templates. Every parent places every template at a fixed arrangement offset
// drawn deterministically from `seed`; constellations of distinct parents are
// unrelated, so no global transform maps one class onto another.
inline ModelParams make_benchmark_model(std::size_t n_parents = 4,
                                        std::size_t n_templates = 6,
                                        std::size_t image_size = 28,
                                        std::size_t template_size = 6,
                                        std::uint64_t seed = 20240) {
  ModelParams m = ModelParams::create(n_parents, n_templates, image_size, image_size,
                                      template_size);
  // low enough that scenes are nearly always single-constellation, so class
  // identity stays decodable from the presence vector alone
  m.presence_prior = 0.02;
  LayerParams& l = m.layers[0];
  l.rho_dummy = 0.1;
  l.lambda_off = 10.0;
  l.c_dummy = 10.0;
  RandomStream rng(seed);
  const double center = image_size / 2.0;
  const double tc = template_size / 2.0 - 0.5;  // template center offset
  const double inter_mean = 1.1 * template_size;  // constellations apart per index
  const double inter_min = 0.66 * template_size;
  // constellation = jittered regular n-gon with a random rotation and a
  // random slot permutation; intra-spacing holds by construction and the
  // permutation decouples per-index geometry across parents
  std::vector<std::vector<std::pair<double, double>>> constellations;
  for (std::size_t i = 0; i < n_parents; ++i) {
    std::vector<std::pair<double, double>> pts(n_templates);
    std::vector<std::pair<double, double>> best = pts;
    double best_sep = -1.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      const double radius = rng.uniform(0.19, 0.24) * image_size;
      std::vector<std::size_t> slot(n_templates);
      for (std::size_t j = 0; j < n_templates; ++j) slot[j] = j;
      rng.shuffle(slot);
      for (std::size_t j = 0; j < n_templates; ++j) {
        const double ang = phi + slot[j] * 2.0 * M_PI / n_templates + rng.uniform(-0.06, 0.06);
        const double rad = radius * (1.0 + rng.uniform(-0.08, 0.08));
        pts[j] = {rad * std::cos(ang), rad * std::sin(ang)};
      }
      double sep = 1e300;
      bool ok = true;
      for (const auto& other : constellations) {
        double mean = 0.0, least = 1e300;
        for (std::size_t j = 0; j < n_templates; ++j) {
          const double d =
              std::hypot(pts[j].first - other[j].first, pts[j].second - other[j].second);
          mean += d;
          least = std::min(least, d);
        }
        ok = ok && mean / n_templates >= inter_mean && least >= inter_min;
        sep = std::min(sep, least);
      }
      if (ok) {
        best = pts;
        break;
      }
      if (sep > best_sep) {
        best_sep = sep;
        best = pts;
      }
    }
    constellations.push_back(best);
  }
  for (std::size_t i = 0; i < n_parents; ++i)
    for (std::size_t j = 0; j < n_templates; ++j) {
      l.set_rho(i, j, 0.15);
      l.set_gamma(i + 1, j, 0.9);
      l.set_c(i, j, 0.22);
      // parent frame sits at the canvas center; the child template center
      // lands at center + v
      l.set_pose_offset(i, j, make_pose(center + constellations[i][j].first - tc,
                                        center + constellations[i][j].second - tc));
    }
  l.rho_dummy = 0.02;
  for (std::size_t j = 0; j < n_templates; ++j) l.set_gamma(0, j, 0.02);
  // glyphs on a dark card with full-square alpha: template matching then
  // sees shape and background, not just the strokes
  const double shades[6] = {0.95, 0.55, 0.8, 0.65, 0.9, 0.7};
  for (std::size_t j = 0; j < n_templates; ++j) {
    std::vector<double> color =
        detail::glyph_color(static_cast<int>(j), template_size, shades[j % 6]);
    std::vector<double> alpha(color.size(), 0.92);
    for (auto& c : color)
      if (c == 0.0) c = 0.08;
    m.set_template(j, color, alpha);
  }
  return m;
}

// ---- dataset generation ----

struct GeneratedData {
  Dataset dataset;
  std::vector<LatentState> latents;
};

// One scene per (class, sample): the class parent is forced on at a jittered
// pose around identity, remaining latents follow the model, then the scene is
// rendered and pixel noise added. Deterministic per (seed, class, sample).
inline GeneratedData generate_dataset(const SyntheticSpec& spec, const ModelParams& params,
                                      RandomStream& rng) {
  params.validate();
  if (spec.n_classes > params.n_top)
    throw ShapeError("generate_dataset: " + std::to_string(spec.n_classes) +
                     " classes but only " + std::to_string(params.n_top) + " parents");
  GeneratedData out;
  out.dataset.h = static_cast<std::uint32_t>(params.image_h);
  out.dataset.w = static_cast<std::uint32_t>(params.image_w);
  out.dataset.n_classes = static_cast<std::uint32_t>(spec.n_classes);
  const LayerParams& layer = params.layers.back();

  for (std::size_t cls = 0; cls < spec.n_classes; ++cls)
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      RandomStream r = rng.fork(detail::mix(spec.seed, cls * 1000003 + s, 0xda7a));
      LatentState st;
      st.presence.resize(params.layer_count());
      st.pose.resize(params.layer_count());
      for (std::size_t i = 0; i < params.n_top; ++i) {
        const bool on = i == cls || r.bernoulli(params.presence_prior);
        st.presence[0].push_back(Tensor::scalar(on ? 1.0 : 0.0));
        Pose p = make_pose(r.uniform(-spec.translation_jitter, spec.translation_jitter),
                           r.uniform(-spec.translation_jitter, spec.translation_jitter),
                           r.uniform(-spec.rotation_jitter, spec.rotation_jitter),
                           1.0 + r.uniform(-spec.scale_jitter, spec.scale_jitter),
                           1.0 + r.uniform(-spec.scale_jitter, spec.scale_jitter));
        st.pose[0].push_back(p);
      }
      for (std::size_t j = 0; j < layer.n_children; ++j) {
        double t;
        std::vector<double> off(6);
        if (spec.clutter_rate > 0.0 && r.bernoulli(spec.clutter_rate)) {
          t = 1.0;
          for (auto& v : off) v = r.normal(0.0, layer.c_dummy);
        } else {
          std::vector<double> w{layer.rho_dummy};
          for (std::size_t i = 0; i < layer.n_parents; ++i)
            w.push_back(layer.rho_value(i, j) * st.presence[0][i].item());
          const std::size_t sel = r.categorical(w);
          t = r.bernoulli(layer.gamma_value(sel, j)) ? 1.0 : 0.0;
          if (sel == 0) {
            for (auto& v : off) v = r.normal(0.0, layer.c_dummy);
          } else {
            Pose mean = compose(st.pose[0][sel - 1], layer.pose_offset(sel - 1, j));
            for (std::size_t e = 0; e < 6; ++e)
              off[e] = r.normal(mean.offset[e], layer.c_value(sel - 1, j));
          }
        }
        st.presence[1].push_back(Tensor::scalar(t));
        st.pose[1].push_back(Pose(Tensor::from({2, 3}, off)));
      }
      Canvas scene = composite_scene(params.materialize_templates(), st.pose[1],
                                     st.presence[1], params.image_h, params.image_w);
      std::vector<double> img = scene.color.values();
      for (auto& v : img)
        v = std::min(1.0, std::max(0.0, v + r.normal(0.0, spec.noise_sigma)));
      out.dataset.labels.push_back(static_cast<std::uint32_t>(cls));
      out.dataset.images.push_back(std::move(img));
      out.latents.push_back(std::move(st));
    }
  return out;
}

// ---- per-image inference over a dataset ----

inline std::vector<VariationalState> infer_dataset(const ModelParams& params,
                                                   const Dataset& data, int steps,
                                                   double step_size, std::uint64_t seed,
                                                   unsigned threads = 0,
                                                   PoseMode mode = PoseMode::kDelta,
                                                   PhiInit init = PhiInit::kMatched) {
  const ModelParams frozen = detail::frozen_copy(params);
  std::vector<VariationalState> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    RandomStream rng(detail::mix(seed, i, 0x1f2e));
    VariationalState q = init == PhiInit::kMatched
                             ? matched_filter_init(frozen, data.image_tensor(i), mode, rng)
                             : VariationalState::create(frozen, mode, rng);
    FitOptions fo;
    fo.steps = steps;
    fo.step_size = step_size;
    out[i] = fit_free_form(frozen, data.image_tensor(i), q, fo, rng).state;
  });
  return out;
}

// ---- latent features and linear readout ----

enum class FeatureMode { kPresenceOnly, kPresenceAndPose };

// Top-level features: mean presences, optionally followed by the six pose
// offset entries of every top capsule. Fixed ordering by capsule index.
inline std::vector<double> latent_features(const VariationalState& q, FeatureMode mode) {
  std::vector<double> f;
  for (std::size_t i = 0; i < q.layers[0].size(); ++i) f.push_back(q.mean_presence(0, i));
  if (mode == FeatureMode::kPresenceAndPose)
    for (std::size_t i = 0; i < q.layers[0].size(); ++i)
      for (double v : q.layers[0][i].pose_mean.values()) f.push_back(v);
  return f;
}

struct ReadoutModel {
  std::size_t n_features = 0, n_classes = 0;
  Tensor weights;  // {n_features, n_classes}
  Tensor bias;     // {1, n_classes}
};

// Multinomial logistic regression, full batch, first-order ascent on the
// mean log-likelihood until the gradient norm drops below 1e-5 or 1e4 steps.
inline ReadoutModel train_readout(const std::vector<std::vector<double>>& features,
                                  const std::vector<std::uint32_t>& labels,
                                  std::size_t n_classes) {
  if (features.size() != labels.size() || features.empty())
    throw ShapeError("train_readout: feature/label mismatch");
  if (n_classes < 2) throw DomainError("train_readout: need at least two classes");
  for (std::uint32_t l : labels)
    if (l >= n_classes) throw DomainError("train_readout: label out of range");
  {
    bool multi = false;
    for (std::uint32_t l : labels) multi |= l != labels[0];
    if (!multi) throw DomainError("train_readout: single-class input is degenerate");
  }
  const std::size_t n = features.size(), d = features[0].size();
  std::vector<double> flat;
  flat.reserve(n * d);
  for (const auto& row : features) {
    if (row.size() != d) throw ShapeError("train_readout: ragged feature rows");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  Tensor x = Tensor::from({n, d}, std::move(flat));
  std::vector<std::size_t> label_pos(n);
  ReadoutModel model;
  model.n_features = d;
  model.n_classes = n_classes;
  model.weights = Tensor::zeros({d, n_classes}, true);
  model.bias = Tensor::zeros({1, n_classes}, true);
  for (std::size_t i = 0; i < n; ++i) label_pos[i] = i * n_classes + labels[i];

  AdamOptimizer adam({model.weights, model.bias}, {0.05, 0.9, 0.999, 1e-8, true});
  for (int iter = 0; iter < 10000; ++iter) {
    Tape tape;
    Tensor logits = add(matmul(x, model.weights), model.bias);
    Tensor picked = take(reshape(logits, {n * n_classes}), label_pos);
    Tensor objective = div(sub(sum(picked), sum(logsumexp(logits, 1))), Tensor::scalar(n));
    adam.zero_grad();
    backward(objective);
    double g2 = 0.0;
    for (double g : model.weights.grad()) g2 += g * g;
    for (double g : model.bias.grad()) g2 += g * g;
    if (std::sqrt(g2) < 1e-5) break;
    adam.step();
  }
  return model;
}

inline std::uint32_t readout_predict(const ReadoutModel& m, const std::vector<double>& f) {
  if (f.size() != m.n_features) throw ShapeError("readout_predict: wrong feature length");
  std::uint32_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < m.n_classes; ++c) {
    double v = m.bias[c];
    for (std::size_t k = 0; k < m.n_features; ++k) v += f[k] * m.weights[k * m.n_classes + c];
    if (v > best_v) {
      best_v = v;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

// ---- metrics ----

struct MetricsRecord {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double mean_l2 = 0.0;    // mean reconstruction error, when provided
  double mean_elbo = 0.0;  // mean final ELBO, when provided
};

inline MetricsRecord eval_metrics(const std::vector<std::uint32_t>& pred,
                                  const std::vector<std::uint32_t>& truth,
                                  std::size_t n_classes,
                                  const std::vector<double>& recon_l2 = {},
                                  const std::vector<double>& elbos = {}) {
  if (pred.size() != truth.size())
    throw ShapeError("eval_metrics: prediction/label length mismatch");
  MetricsRecord r;
  std::vector<double> correct(n_classes, 0.0), count(n_classes, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    count[truth[i]] += 1.0;
    if (pred[i] == truth[i]) {
      correct[truth[i]] += 1.0;
      r.accuracy += 1.0;
    }
  }
  r.accuracy /= pred.empty() ? 1.0 : static_cast<double>(pred.size());
  for (std::size_t c = 0; c < n_classes; ++c)
    r.per_class_accuracy.push_back(count[c] > 0 ? correct[c] / count[c] : 0.0);
  for (double v : recon_l2) r.mean_l2 += v;
  if (!recon_l2.empty()) r.mean_l2 /= static_cast<double>(recon_l2.size());
  for (double v : elbos) r.mean_elbo += v;
  if (!elbos.empty()) r.mean_elbo /= static_cast<double>(elbos.size());
  return r;
}

inline std::string metrics_table(const MetricsRecord& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "metric              value\n";
  os << "accuracy            " << r.accuracy << "\n";
  for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c)
    os << "accuracy[class " << c << "]   " << r.per_class_accuracy[c] << "\n";
  os << "mean_l2             " << r.mean_l2 << "\n";
  os << "mean_elbo           " << r.mean_elbo << "\n";
  return os.str();
}

inline void write_metrics_csv(const std::string& path, const MetricsRecord& r) {
  std::ofstream f(path);
  if (!f) throw Error("write_metrics_csv: cannot open " + path);
  f.precision(17);
  f << "metric,value\n";
  f << "accuracy," << r.accuracy << "\n";
  for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c)
    f << "accuracy_class_" << c << ',' << r.per_class_accuracy[c] << "\n";
  f << "mean_l2," << r.mean_l2 << "\n";
  f << "mean_elbo," << r.mean_elbo << "\n";
}

inline double l2_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("l2_error: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace caps

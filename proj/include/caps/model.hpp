#pragma once

// The joint distribution over all capsule layers: top-level presence/pose
// priors, selection-marginalized child conditionals with an always-on dummy
// clutter parent, ancestral sampling, log-joint evaluation, and Bayes-rule
// responsibilities over parents.
//
// Constrained global parameters are stored unconstrained and realized through
// fixed squashings: rho = softplus(raw) with a fixed dummy affinity row,
// gamma = sigmoid(raw), c = c_min + softplus(raw), template planes =
// sigmoid(raw). Pose offsets are free.

#include "caps/distributions.hpp"
#include "caps/pose.hpp"
#include "caps/renderer.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace caps {

inline constexpr double kCFloor = 0.1;

inline double inv_softplus(double y) {
  if (!(y > 0.0)) throw DomainError("inv_softplus: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double logit(double p) {
  const double pc = std::min(std::max(p, kPresenceEps), 1.0 - kPresenceEps);
  return std::log(pc) - std::log1p(-pc);
}

struct LayerParams {
  std::size_t n_parents = 0;
  std::size_t n_children = 0;
  double rho_dummy = 0.1;    // fixed affinity of the dummy parent, > 0
  double lambda_off = 10.0;  // pose scale when the selected parent is off
  double c_dummy = 10.0;     // pose scale for clutter attached to the dummy
  double c_min = kCFloor;
  Tensor rho_raw;       // {n_parents, n_children}
  Tensor gamma_raw;     // {n_parents + 1, n_children}, row 0 = dummy
  Tensor pose_offsets;  // {n_parents, n_children, 6}, the M offsets
  Tensor c_raw;         // {n_parents, n_children}

  static LayerParams create(std::size_t n_parents, std::size_t n_children) {
    LayerParams l;
    l.n_parents = n_parents;
    l.n_children = n_children;
    l.rho_raw = Tensor::full({n_parents, n_children}, inv_softplus(0.5), true);
    l.gamma_raw = Tensor::zeros({n_parents + 1, n_children}, true);
    l.pose_offsets = Tensor::zeros({n_parents, n_children, 6}, true);
    l.c_raw = Tensor::full({n_parents, n_children}, inv_softplus(0.3 - kCFloor), true);
    return l;
  }

  Tensor rho() const { return softplus(rho_raw); }
  Tensor gamma() const { return sigmoid(gamma_raw); }
  Tensor c() const { return add(softplus(c_raw), Tensor::scalar(c_min)); }

  double rho_value(std::size_t i, std::size_t j) const {
    const double r = rho_raw[i * n_children + j];
    return r > 30.0 ? r : std::log1p(std::exp(r));
  }
  double gamma_value(std::size_t i_incl_dummy, std::size_t j) const {
    const double g = gamma_raw[i_incl_dummy * n_children + j];
    return 1.0 / (1.0 + std::exp(-g));
  }
  double c_value(std::size_t i, std::size_t j) const {
    const double r = c_raw[i * n_children + j];
    return c_min + (r > 30.0 ? r : std::log1p(std::exp(r)));
  }

  void set_rho(std::size_t i, std::size_t j, double value) {
    rho_raw.mutable_values()[i * n_children + j] = inv_softplus(value);
  }
  void set_gamma(std::size_t i_incl_dummy, std::size_t j, double value) {
    gamma_raw.mutable_values()[i_incl_dummy * n_children + j] = logit(value);
  }
  void set_c(std::size_t i, std::size_t j, double value) {
    if (!(value > c_min))
      throw DomainError("set_c: value must exceed the floor " + std::to_string(c_min));
    c_raw.mutable_values()[i * n_children + j] = inv_softplus(value - c_min);
  }
  void set_pose_offset(std::size_t i, std::size_t j, const Pose& m) {
    for (std::size_t k = 0; k < 6; ++k)
      pose_offsets.mutable_values()[(i * n_children + j) * 6 + k] = m.offset[k];
  }
  Pose pose_offset(std::size_t i, std::size_t j) const {
    std::vector<double> v(6);
    for (std::size_t k = 0; k < 6; ++k)
      v[k] = pose_offsets[(i * n_children + j) * 6 + k];
    return Pose(Tensor::from({2, 3}, v));
  }
  // Differentiable view of M_ij; gradients reach pose_offsets.
  Pose pose_offset_graph(std::size_t i, std::size_t j) const {
    const std::size_t base = (i * n_children + j) * 6;
    Tensor flat = reshape(pose_offsets, {n_parents * n_children * 6});
    return Pose(reshape(take(flat, {base, base + 1, base + 2, base + 3, base + 4, base + 5}),
                        {2, 3}));
  }
};

struct ModelParams {
  double presence_prior = 0.5;  // p, top-level Bern prior
  double temperature = 1.0;     // Concrete temperature
  Tensor sigma_raw;             // {1}; effective sigma = max(sigma_raw, 0.2)
  bool learn_sigma = false;
  bool learn_templates = true;
  std::size_t n_top = 0;
  std::size_t image_h = 0, image_w = 0;
  std::size_t template_h = 0, template_w = 0;
  std::vector<LayerParams> layers;   // transition k-1 -> k
  Tensor templates_color_raw;        // {n_templates, th, tw}
  Tensor templates_alpha_raw;        // {n_templates, th, tw}

  static ModelParams create(std::size_t n_top, std::size_t n_templates,
                            std::size_t image_h, std::size_t image_w,
                            std::size_t template_size = 12) {
    ModelParams m;
    m.n_top = n_top;
    m.image_h = image_h;
    m.image_w = image_w;
    m.template_h = template_size;
    m.template_w = template_size;
    m.sigma_raw = Tensor::scalar(kSigmaFloor, false);
    m.layers.push_back(LayerParams::create(n_top, n_templates));
    m.templates_color_raw = Tensor::zeros({n_templates, template_size, template_size}, true);
    m.templates_alpha_raw = Tensor::zeros({n_templates, template_size, template_size}, true);
    return m;
  }

  std::size_t layer_count() const { return layers.size() + 1; }
  std::size_t capsules_in(std::size_t k) const {
    return k == 0 ? n_top : layers[k - 1].n_children;
  }
  std::size_t n_templates() const { return capsules_in(layer_count() - 1); }

  double sigma_value() const { return std::max(sigma_raw[0], kSigmaFloor); }
  Tensor sigma() const { return clamp_min(sigma_raw, kSigmaFloor); }

  void set_template(std::size_t j, const std::vector<double>& color,
                    const std::vector<double>& alpha) {
    const std::size_t n = template_h * template_w;
    if (color.size() != n || alpha.size() != n)
      throw ShapeError("set_template: expected " + std::to_string(n) + " values");
    for (std::size_t k = 0; k < n; ++k) {
      templates_color_raw.mutable_values()[j * n + k] = logit(color[k]);
      templates_alpha_raw.mutable_values()[j * n + k] = logit(alpha[k]);
    }
  }

  // Realized [0,1] template planes, one per lowest-level capsule.
  std::vector<Template> materialize_templates() const {
    Tensor color = sigmoid(templates_color_raw);
    Tensor alpha = sigmoid(templates_alpha_raw);
    std::vector<Template> out;
    for (std::size_t j = 0; j < n_templates(); ++j)
      out.push_back({reshape(slice0(color, j, 1), {template_h, template_w}),
                     reshape(slice0(alpha, j, 1), {template_h, template_w})});
    return out;
  }

  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers) {
      out.push_back(l.rho_raw);
      out.push_back(l.gamma_raw);
      out.push_back(l.pose_offsets);
      out.push_back(l.c_raw);
    }
    if (learn_templates) {
      out.push_back(templates_color_raw);
      out.push_back(templates_alpha_raw);
    }
    if (learn_sigma) out.push_back(sigma_raw);
    return out;
  }

  ModelParams clone() const {
    ModelParams m = *this;
    m.sigma_raw = Tensor::from(sigma_raw.shape(), sigma_raw.values(), learn_sigma);
    m.templates_color_raw =
        Tensor::from(templates_color_raw.shape(), templates_color_raw.values(), true);
    m.templates_alpha_raw =
        Tensor::from(templates_alpha_raw.shape(), templates_alpha_raw.values(), true);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      m.layers[k].rho_raw = Tensor::from(layers[k].rho_raw.shape(), layers[k].rho_raw.values(), true);
      m.layers[k].gamma_raw =
          Tensor::from(layers[k].gamma_raw.shape(), layers[k].gamma_raw.values(), true);
      m.layers[k].pose_offsets =
          Tensor::from(layers[k].pose_offsets.shape(), layers[k].pose_offsets.values(), true);
      m.layers[k].c_raw = Tensor::from(layers[k].c_raw.shape(), layers[k].c_raw.values(), true);
    }
    return m;
  }

  void validate() const {
    if (layers.empty()) throw ShapeError("model: at least one transition layer required");
    std::size_t prev = n_top;
    for (const auto& l : layers) {
      if (l.n_parents != prev)
        throw ShapeError("model: layer expects " + std::to_string(l.n_parents) +
                         " parents, previous layer has " + std::to_string(prev));
      if (l.rho_raw.shape() != Shape{l.n_parents, l.n_children} ||
          l.gamma_raw.shape() != Shape{l.n_parents + 1, l.n_children} ||
          l.pose_offsets.shape() != Shape{l.n_parents, l.n_children, 6} ||
          l.c_raw.shape() != Shape{l.n_parents, l.n_children})
        throw ShapeError("model: layer parameter shapes inconsistent");
      if (!(l.rho_dummy > 0.0))
        throw DomainError("model: dummy affinity must be positive");
      prev = l.n_children;
    }
    if (templates_color_raw.shape() != Shape{prev, template_h, template_w})
      throw ShapeError("model: template block is " + shape_str(templates_color_raw.shape()) +
                       ", expected " + shape_str({prev, template_h, template_w}));
  }
};

// Per-image latent state: presences and poses for the real capsules of every
// layer. Selection variables are never stored; the dummy parent (t = 1,
// identity pose) is supplied implicitly wherever parents are consumed.
struct LatentState {
  std::vector<std::vector<Tensor>> presence;  // [layer][capsule], scalar
  std::vector<std::vector<Pose>> pose;        // [layer][capsule]
};

namespace detail {
inline void check_parents(const LayerParams& layer, std::size_t n_ts, std::size_t n_poses) {
  if (n_ts != layer.n_parents || n_poses != layer.n_parents)
    throw ShapeError("child_conditional: layer expects " + std::to_string(layer.n_parents) +
                     " real parents plus the implicit dummy, got " + std::to_string(n_ts));
}
}  // namespace detail

// Log p(t_j, A_j | s = i, parents) + log p(s = i | parent presences), one
// entry per parent with the dummy at index 0. The pose branch mixes the
// on/off log-densities linearly in the selected parent's (possibly relaxed)
// presence; at hard presences it reduces to the two cases of the conditional
// table. logsumexp of these terms marginalizes s analytically at a cost
// linear in the number of parents.
inline Tensor child_conditional_parent_terms(const LayerParams& layer, std::size_t child_j,
                                             const Tensor& child_t, const Pose& child_pose,
                                             const std::vector<Tensor>& parent_ts,
                                             const std::vector<Pose>& parent_poses) {
  detail::check_parents(layer, parent_ts.size(), parent_poses.size());
  if (child_j >= layer.n_children)
    throw ShapeError("child_conditional: child index " + std::to_string(child_j) +
                     " out of range");
  const std::size_t np = layer.n_parents;

  std::vector<Tensor> weights;
  weights.push_back(Tensor::scalar(layer.rho_dummy));
  Tensor rho = layer.rho();
  for (std::size_t i = 0; i < np; ++i)
    weights.push_back(mul(take(rho, {i * layer.n_children + child_j}), parent_ts[i]));
  Tensor w = stack_scalars(weights);
  Tensor log_sel = sub(log(w), log(sum(w)));

  Tensor gamma = layer.gamma();
  Tensor c = layer.c();
  Tensor off_term = sum(normal_log_prob(child_pose.offset, Tensor::zeros({2, 3}),
                                        Tensor::full({2, 3}, layer.lambda_off)));
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i <= np; ++i) {
    Tensor sel = take(log_sel, {i});
    Tensor g = take(gamma, {i * layer.n_children + child_j});
    Tensor presence_term = bernoulli_log_prob(child_t, g);
    Tensor pose_term;
    if (i == 0) {
      pose_term = sum(normal_log_prob(child_pose.offset, Tensor::zeros({2, 3}),
                                      Tensor::full({2, 3}, layer.c_dummy)));
    } else {
      Pose mean = compose(parent_poses[i - 1], layer.pose_offset_graph(i - 1, child_j));
      Tensor ci = take(c, {(i - 1) * layer.n_children + child_j});
      Tensor on_term = sum(normal_log_prob(child_pose.offset, mean.offset,
                                           broadcast_to(reshape(ci, {1, 1}), {2, 3})));
      Tensor ti = parent_ts[i - 1];
      pose_term = add(mul(ti, on_term), mul(sub(Tensor::scalar(1.0), ti), off_term));
    }
    terms.push_back(add(add(sel, presence_term), pose_term));
  }
  return stack_scalars(terms);
}

// Selection-marginalized log p(t_j, A_j | parent layer).
inline Tensor child_conditional_log_prob(const LayerParams& layer, std::size_t child_j,
                                         const Tensor& child_t, const Pose& child_pose,
                                         const std::vector<Tensor>& parent_ts,
                                         const std::vector<Pose>& parent_poses) {
  return logsumexp(child_conditional_parent_terms(layer, child_j, child_t, child_pose,
                                                  parent_ts, parent_poses));
}

// Posterior over the child's parent (dummy at index 0) by Bayes rule: the
// normalized exp of the per-parent terms inside the marginalizing logsumexp.
inline Tensor responsibilities(const LayerParams& layer, std::size_t child_j,
                               const Tensor& child_t, const Pose& child_pose,
                               const std::vector<Tensor>& parent_ts,
                               const std::vector<Pose>& parent_poses) {
  return softmax(child_conditional_parent_terms(layer, child_j, child_t, child_pose,
                                                parent_ts, parent_poses),
                 0);
}

// Column sums of a {n_children, n_parents+1} responsibility matrix: the
// expected number of children attached to each parent under the posterior.
inline Tensor expected_attached_children(const Tensor& resp) {
  if (resp.shape().size() != 2)
    throw ShapeError("expected_attached_children: want 2-d, got " + shape_str(resp.shape()));
  return sum(resp, 0);
}

// Vectorized per-layer conditional: the (n_parents+1) x n_children matrix of
// per-parent terms for every child at once, matching the per-child
// child_conditional_parent_terms stack but built from a handful of batched
// tensor ops. logsumexp over axis 0 marginalizes the selections.
inline Tensor layer_conditional_terms(const LayerParams& layer,
                                      const std::vector<Tensor>& child_ts,
                                      const std::vector<Pose>& child_poses,
                                      const std::vector<Tensor>& parent_ts,
                                      const std::vector<Pose>& parent_poses) {
  detail::check_parents(layer, parent_ts.size(), parent_poses.size());
  const std::size_t np = layer.n_parents, nc = layer.n_children;
  if (child_ts.size() != nc || child_poses.size() != nc)
    throw ShapeError("layer_conditional: expected " + std::to_string(nc) + " children");

  // children stacked as (nc, 6) and (1, nc, 6)
  Tensor child_stack;
  for (std::size_t j = 0; j < nc; ++j) {
    Tensor row = reshape(child_poses[j].offset, {1, 6});
    child_stack = j == 0 ? row : concat0(child_stack, row);
  }
  Tensor child_t_row = reshape(stack_scalars(child_ts), {1, nc});
  Tensor parent_t_col = reshape(stack_scalars(parent_ts), {np, 1});

  // per-parent child means: realized(parent) * realized(M_ij), offsets laid
  // out as (nc, 6) via a fixed gather from the (3, 3 nc) product
  Tensor m_flat = reshape(layer.pose_offsets, {np * nc * 6});
  std::vector<std::size_t> cols_idx(3 * 3 * nc);  // (row r, col 3j+c) <- M_ij entry
  std::vector<double> cols_add(3 * 3 * nc);
  for (std::size_t j = 0; j < nc; ++j)
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t pos = r * 3 * nc + 3 * j + c;
        cols_idx[pos] = r < 2 ? j * 6 + r * 3 + c : 0;  // bottom row reads a dummy slot
        cols_add[pos] = (r == c) ? 1.0 : 0.0;
      }
  std::vector<double> bottom_mask(3 * 3 * nc, 1.0);
  for (std::size_t j = 0; j < nc; ++j)
    for (std::size_t c = 0; c < 3; ++c) bottom_mask[2 * 3 * nc + 3 * j + c] = 0.0;
  std::vector<std::size_t> mean_idx(nc * 6);  // (j, e) <- product entry
  for (std::size_t j = 0; j < nc; ++j)
    for (std::size_t e = 0; e < 6; ++e) mean_idx[j * 6 + e] = (e / 3) * 3 * nc + 3 * j + e % 3;
  Tensor ident_row = Tensor::from({1, 6}, {1, 0, 0, 0, 1, 0});
  Tensor mask = Tensor::from({3, 3 * nc}, bottom_mask);
  Tensor addc = Tensor::from({3, 3 * nc}, cols_add);

  Tensor means;  // (np, nc, 6)
  for (std::size_t i = 0; i < np; ++i) {
    std::vector<std::size_t> sel(3 * 3 * nc);
    for (std::size_t k = 0; k < sel.size(); ++k)
      sel[k] = i * nc * 6 + cols_idx[k];
    Tensor m_cols = add(mul(reshape(take(m_flat, sel), {3, 3 * nc}), mask), addc);
    Tensor prod = matmul(realized(parent_poses[i]), m_cols);
    Tensor mean_i = sub(reshape(take(reshape(prod, {9 * nc}), mean_idx), {nc, 6}), ident_row);
    Tensor lifted = reshape(mean_i, {1, nc, 6});
    means = i == 0 ? lifted : concat0(means, lifted);
  }

  Tensor c_scales = reshape(layer.c(), {np, nc, 1});
  Tensor on_lp = sum(normal_log_prob(reshape(child_stack, {1, nc, 6}), means, c_scales), 2);
  Tensor off_lp = reshape(
      sum(normal_log_prob(child_stack, Tensor::scalar(0.0), Tensor::scalar(layer.lambda_off)), 1),
      {1, nc});
  Tensor pose_real = add(mul(parent_t_col, on_lp),
                         mul(sub(Tensor::scalar(1.0), parent_t_col), off_lp));
  Tensor pose_dummy = reshape(
      sum(normal_log_prob(child_stack, Tensor::scalar(0.0), Tensor::scalar(layer.c_dummy)), 1),
      {1, nc});

  Tensor presence = bernoulli_log_prob(child_t_row, layer.gamma());  // (np+1, nc)

  Tensor w_real = mul(layer.rho(), parent_t_col);  // (np, nc)
  Tensor weights = concat0(Tensor::full({1, nc}, layer.rho_dummy), w_real);
  Tensor log_sel = sub(log(weights), log(reshape(sum(weights, 0), {1, nc})));

  Tensor pose_all = concat0(pose_dummy, pose_real);  // (np+1, nc)
  return add(add(log_sel, presence), pose_all);
}

struct LogJointTerms {
  Tensor top_prior;
  std::vector<Tensor> layer_terms;  // one per transition layer
  Tensor likelihood;
  Tensor total;
};

inline LogJointTerms log_joint_terms(const ModelParams& params, const LatentState& latents,
                                     const Tensor& image) {
  params.validate();
  if (latents.presence.size() != params.layer_count() ||
      latents.pose.size() != params.layer_count())
    throw ShapeError("log_joint: latent state has " + std::to_string(latents.presence.size()) +
                     " layers, model has " + std::to_string(params.layer_count()));
  LogJointTerms out;

  Tensor top = Tensor::scalar(0.0);
  Tensor prior_p = Tensor::scalar(params.presence_prior);
  for (std::size_t i = 0; i < params.n_top; ++i) {
    top = add(top, bernoulli_log_prob(latents.presence[0][i], prior_p));
    top = add(top, sum(normal_log_prob(latents.pose[0][i].offset, Tensor::zeros({2, 3}),
                                       Tensor::full({2, 3}, 1.0))));
  }
  out.top_prior = top;
  out.total = top;

  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    Tensor layer_sum;
    if (params.layers[k].n_children == 0) {
      layer_sum = Tensor::scalar(0.0);
    } else {
      Tensor terms = layer_conditional_terms(params.layers[k], latents.presence[k + 1],
                                             latents.pose[k + 1], latents.presence[k],
                                             latents.pose[k]);
      layer_sum = sum(logsumexp(terms, 0));
    }
    out.layer_terms.push_back(layer_sum);
    out.total = add(out.total, layer_sum);
  }

  const std::size_t last = params.layer_count() - 1;
  Canvas scene = composite_scene(params.materialize_templates(), latents.pose[last],
                                 latents.presence[last], params.image_h, params.image_w);
  out.likelihood = image_log_likelihood(image, scene, params.sigma());
  out.total = add(out.total, out.likelihood);
  return out;
}

inline Tensor log_joint(const ModelParams& params, const LatentState& latents,
                        const Tensor& image) {
  return log_joint_terms(params, latents, image).total;
}

// Ancestral sample of one scene. Hard selections are drawn here and then
// discarded; they are never part of the latent state.
inline std::pair<LatentState, Tensor> sample_scene(const ModelParams& params,
                                                   RandomStream& rng) {
  params.validate();
  LatentState st;
  st.presence.resize(params.layer_count());
  st.pose.resize(params.layer_count());

  for (std::size_t i = 0; i < params.n_top; ++i) {
    st.presence[0].push_back(Tensor::scalar(rng.bernoulli(params.presence_prior) ? 1.0 : 0.0));
    std::vector<double> off(6);
    for (auto& v : off) v = rng.normal();
    st.pose[0].push_back(Pose(Tensor::from({2, 3}, off)));
  }

  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const LayerParams& layer = params.layers[k];
    for (std::size_t j = 0; j < layer.n_children; ++j) {
      std::vector<double> w{layer.rho_dummy};
      for (std::size_t i = 0; i < layer.n_parents; ++i)
        w.push_back(layer.rho_value(i, j) * st.presence[k][i].item());
      const std::size_t s = rng.categorical(w);
      const double t = rng.bernoulli(layer.gamma_value(s, j)) ? 1.0 : 0.0;
      std::vector<double> off(6);
      if (s == 0) {
        for (auto& v : off) v = rng.normal(0.0, layer.c_dummy);
      } else if (st.presence[k][s - 1].item() > 0.5) {
        Pose mean = compose(st.pose[k][s - 1], layer.pose_offset(s - 1, j));
        for (std::size_t e = 0; e < 6; ++e)
          off[e] = rng.normal(mean.offset[e], layer.c_value(s - 1, j));
      } else {
        for (auto& v : off) v = rng.normal(0.0, layer.lambda_off);
      }
      st.presence[k + 1].push_back(Tensor::scalar(t));
      st.pose[k + 1].push_back(Pose(Tensor::from({2, 3}, off)));
    }
  }

  const std::size_t last = params.layer_count() - 1;
  Canvas scene = composite_scene(params.materialize_templates(), st.pose[last],
                                 st.presence[last], params.image_h, params.image_w);
  std::vector<double> pixels(flatten(scene).values());
  const double sigma = params.sigma_value();
  for (auto& v : pixels) v = rng.normal(v, sigma);
  return {std::move(st), Tensor::from({params.image_h, params.image_w}, std::move(pixels))};
}

}  // namespace caps

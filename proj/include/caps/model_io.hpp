#pragma once

// Versioned JSON serialization of model parameters and variational states.
// Doubles round-trip losslessly (shortest-exact decimal form).

#include "caps/inference.hpp"
#include "caps/model.hpp"

#include <json.hpp>

#include <fstream>
#include <string>

namespace caps {

using json = nlohmann::json;

namespace detail {
inline json tensor_array(const Tensor& t) { return json(t.values()); }

inline std::vector<double> array_values(const json& a, std::size_t want,
                                        const std::string& field) {
  if (!a.is_array() || a.size() != want)
    throw Error("model json: field '" + field + "' must be an array of " +
                std::to_string(want) + " numbers");
  return a.get<std::vector<double>>();
}
}  // namespace detail

inline json params_to_json(const ModelParams& params) {
  params.validate();
  json layers = json::array();
  for (const auto& l : params.layers) {
    layers.push_back({{"n_parents", l.n_parents},
                      {"n_children", l.n_children},
                      {"rho_dummy", l.rho_dummy},
                      {"lambda_off", l.lambda_off},
                      {"c_dummy", l.c_dummy},
                      {"c_min", l.c_min},
                      {"rho_raw", detail::tensor_array(l.rho_raw)},
                      {"gamma_raw", detail::tensor_array(l.gamma_raw)},
                      {"pose_offsets", detail::tensor_array(l.pose_offsets)},
                      {"c_raw", detail::tensor_array(l.c_raw)}});
  }
  return json{{"version", 1},
              {"kind", "caps-model"},
              {"shapes",
               {{"n_top", params.n_top},
                {"image_h", params.image_h},
                {"image_w", params.image_w},
                {"template_h", params.template_h},
                {"template_w", params.template_w}}},
              {"hyperparams",
               {{"presence_prior", params.presence_prior},
                {"temperature", params.temperature},
                {"sigma", params.sigma_raw[0]},
                {"learn_sigma", params.learn_sigma},
                {"learn_templates", params.learn_templates}}},
              {"layers", layers},
              {"templates",
               {{"color_raw", detail::tensor_array(params.templates_color_raw)},
                {"alpha_raw", detail::tensor_array(params.templates_alpha_raw)}}}};
}

inline ModelParams params_from_json(const json& j) {
  if (!j.is_object() || j.value("kind", "") != "caps-model")
    throw Error("model json: not a caps-model document");
  if (j.value("version", 0) != 1)
    throw Error("model json: unsupported version");
  const json& shapes = j.at("shapes");
  const json& hp = j.at("hyperparams");
  ModelParams m;
  m.n_top = shapes.at("n_top").get<std::size_t>();
  m.image_h = shapes.at("image_h").get<std::size_t>();
  m.image_w = shapes.at("image_w").get<std::size_t>();
  m.template_h = shapes.at("template_h").get<std::size_t>();
  m.template_w = shapes.at("template_w").get<std::size_t>();
  m.presence_prior = hp.at("presence_prior").get<double>();
  m.temperature = hp.at("temperature").get<double>();
  m.learn_sigma = hp.value("learn_sigma", false);
  m.learn_templates = hp.value("learn_templates", true);
  m.sigma_raw = Tensor::scalar(hp.at("sigma").get<double>(), m.learn_sigma);
  for (const json& lj : j.at("layers")) {
    LayerParams l;
    l.n_parents = lj.at("n_parents").get<std::size_t>();
    l.n_children = lj.at("n_children").get<std::size_t>();
    l.rho_dummy = lj.at("rho_dummy").get<double>();
    l.lambda_off = lj.at("lambda_off").get<double>();
    l.c_dummy = lj.at("c_dummy").get<double>();
    l.c_min = lj.at("c_min").get<double>();
    const std::size_t np = l.n_parents, nc = l.n_children;
    l.rho_raw = Tensor::from({np, nc}, detail::array_values(lj.at("rho_raw"), np * nc, "rho_raw"), true);
    l.gamma_raw = Tensor::from(
        {np + 1, nc}, detail::array_values(lj.at("gamma_raw"), (np + 1) * nc, "gamma_raw"), true);
    l.pose_offsets = Tensor::from(
        {np, nc, 6}, detail::array_values(lj.at("pose_offsets"), np * nc * 6, "pose_offsets"),
        true);
    l.c_raw = Tensor::from({np, nc}, detail::array_values(lj.at("c_raw"), np * nc, "c_raw"), true);
    m.layers.push_back(std::move(l));
  }
  const json& tj = j.at("templates");
  const std::size_t tn = m.n_templates() * m.template_h * m.template_w;
  m.templates_color_raw =
      Tensor::from({m.n_templates(), m.template_h, m.template_w},
                   detail::array_values(tj.at("color_raw"), tn, "color_raw"), true);
  m.templates_alpha_raw =
      Tensor::from({m.n_templates(), m.template_h, m.template_w},
                   detail::array_values(tj.at("alpha_raw"), tn, "alpha_raw"), true);
  m.validate();
  return m;
}

inline void save_model(const std::string& path, const ModelParams& params,
                       const json& extra = json()) {
  json j = params_to_json(params);
  if (extra.is_object())
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream f(path);
  if (!f) throw Error("save_model: cannot open " + path);
  f << j.dump(1) << "\n";
  if (!f) throw Error("save_model: short write to " + path);
}

inline json load_model_document(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("load_model: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw Error("load_model: " + path + " is not valid JSON: " + e.what());
  }
  return j;
}

inline ModelParams load_model(const std::string& path) {
  return params_from_json(load_model_document(path));
}

// ---- variational state ----

inline json variational_to_json(const VariationalState& q) {
  json layers = json::array();
  for (const auto& layer : q.layers) {
    json caps = json::array();
    for (const auto& c : layer)
      caps.push_back({{"logit", c.logit[0]},
                      {"pose_mean", detail::tensor_array(c.pose_mean)},
                      {"pose_scale_raw", detail::tensor_array(c.pose_scale_raw)}});
    layers.push_back(std::move(caps));
  }
  return json{{"version", 1},
              {"kind", "caps-variational"},
              {"pose_mode", q.mode == PoseMode::kDelta ? "delta" : "full"},
              {"layers", layers}};
}

inline VariationalState variational_from_json(const json& j) {
  if (!j.is_object() || j.value("kind", "") != "caps-variational")
    throw Error("variational json: not a caps-variational document");
  VariationalState q;
  q.mode = j.at("pose_mode").get<std::string>() == "full" ? PoseMode::kFull : PoseMode::kDelta;
  for (const json& lj : j.at("layers")) {
    std::vector<CapsuleQ> layer;
    for (const json& cj : lj) {
      CapsuleQ c;
      c.logit = Tensor::scalar(cj.at("logit").get<double>(), true);
      c.pose_mean =
          Tensor::from({2, 3}, detail::array_values(cj.at("pose_mean"), 6, "pose_mean"), true);
      c.pose_scale_raw = Tensor::from(
          {2, 3}, detail::array_values(cj.at("pose_scale_raw"), 6, "pose_scale_raw"), true);
      layer.push_back(std::move(c));
    }
    q.layers.push_back(std::move(layer));
  }
  return q;
}

inline void save_variational(const std::string& path, const VariationalState& q) {
  std::ofstream f(path);
  if (!f) throw Error("save_variational: cannot open " + path);
  f << variational_to_json(q).dump(1) << "\n";
}

inline VariationalState load_variational(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("load_variational: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw Error("load_variational: " + path + " is not valid JSON: " + e.what());
  }
  return variational_from_json(j);
}

}  // namespace caps

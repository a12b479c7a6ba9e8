#include "caps/gradcheck.hpp"
#include "caps/inference.hpp"
#include "caps/model_io.hpp"
#include "caps/verification.hpp"

#include <catch2/catch.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace caps;

namespace {
// Toy with the real parent's affinity driven to ~0 so the child always
// attaches to the dummy and the exact posterior factorizes per capsule.
ModelParams independent_toy(RandomStream& rng) {
  ModelParams m = random_small_model(1, 1, rng);
  m.layers[0].rho_raw.mutable_values()[0] = -40.0;  // softplus -> ~4e-18
  return m;
}

// Exact per-capsule posterior logits of the toy, by enumeration with poses
// clamped at the q points.
std::pair<double, double> exact_posterior_logits(const ModelParams& m,
                                                 const LatentState& poses,
                                                 const Tensor& image) {
  double lp[2][2];
  for (int t0 = 0; t0 <= 1; ++t0)
    for (int t1 = 0; t1 <= 1; ++t1) {
      LatentState st = poses;
      st.presence[0][0] = Tensor::scalar(t0);
      st.presence[1][0] = Tensor::scalar(t1);
      lp[t0][t1] = oracle::brute_force_log_joint(m, st, image);
    }
  const double m0on = oracle::logsumexp_vec({lp[1][0], lp[1][1]});
  const double m0off = oracle::logsumexp_vec({lp[0][0], lp[0][1]});
  const double m1on = oracle::logsumexp_vec({lp[0][1], lp[1][1]});
  const double m1off = oracle::logsumexp_vec({lp[0][0], lp[1][0]});
  return {m0on - m0off, m1on - m1off};
}
}  // namespace

TEST_CASE("elbo of a latent-free model is the blank-scene likelihood") {
  ModelParams m = ModelParams::create(0, 0, 5, 5, 2);
  RandomStream rng(3);
  std::vector<double> img(25);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::from({5, 5}, img);
  VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
  ElboEstimate e = elbo_estimate(m, q, image, {1, PresenceSampling::kRelaxed}, rng);
  const double want = image_log_likelihood(image, zero_canvas(5, 5), m.sigma()).item();
  CHECK(e.value == Approx(want).margin(1e-12));
  CHECK(e.likelihood_term == Approx(want).margin(1e-12));
}

TEST_CASE("elbo value equals the sum of its term breakdown") {
  RandomStream rng(7);
  ModelParams m = random_small_model(2, 2, rng);
  std::vector<double> img(m.image_h * m.image_w);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::from({m.image_h, m.image_w}, img);
  VariationalState q = VariationalState::create(m, PoseMode::kFull, rng);
  ElboEstimate e = elbo_estimate(m, q, image, {8, PresenceSampling::kRelaxed}, rng);
  double total = e.likelihood_term;
  for (double t : e.layer_terms) total += t;
  CHECK(e.value == Approx(total).margin(1e-9));
}

TEST_CASE("hard-presence elbo is a lower bound of the enumerated evidence") {
  RandomStream rng(13);
  ModelParams m = random_small_model(1, 1, rng);
  LatentState poses = random_latents(m, rng, true);
  std::vector<double> img(m.image_h * m.image_w);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::from({m.image_h, m.image_w}, img);
  const double evidence = enumerate_presence_evidence(m, poses, image);

  auto make_q = [&](double logit0, double logit1) {
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    q.layers[0][0].logit = Tensor::scalar(logit0, true);
    q.layers[1][0].logit = Tensor::scalar(logit1, true);
    // delta poses pinned at the enumeration's pose values
    q.layers[0][0].pose_mean = Tensor::from({2, 3}, poses.pose[0][0].offset.values(), true);
    q.layers[1][0].pose_mean = Tensor::from({2, 3}, poses.pose[1][0].offset.values(), true);
    return q;
  };

  SECTION("any q stays below the evidence") {
    for (int trial = 0; trial < 50; ++trial) {
      VariationalState q = make_q(rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5));
      ElboEstimate e = elbo_estimate(m, q, image, {400, PresenceSampling::kHard}, rng);
      CHECK(e.value <= evidence + 3.0 * e.std_error + 1e-9);
    }
  }

  SECTION("the exact factorized posterior attains the evidence") {
    ModelParams toy = independent_toy(rng);
    LatentState tp = random_latents(toy, rng, true);
    const double ev = enumerate_presence_evidence(toy, tp, image);
    auto [l0, l1] = exact_posterior_logits(toy, tp, image);
    VariationalState q = VariationalState::create(toy, PoseMode::kDelta, rng);
    q.layers[0][0].logit = Tensor::scalar(l0, true);
    q.layers[1][0].logit = Tensor::scalar(l1, true);
    q.layers[0][0].pose_mean = Tensor::from({2, 3}, tp.pose[0][0].offset.values(), true);
    q.layers[1][0].pose_mean = Tensor::from({2, 3}, tp.pose[1][0].offset.values(), true);
    ElboEstimate e = elbo_estimate(toy, q, image, {2000, PresenceSampling::kHard}, rng);
    CHECK(e.value == Approx(ev).margin(3.0 * e.std_error + 1e-6));
    // at the exact posterior every sample evaluates to the evidence
    CHECK(e.std_error < 1e-9);

    SECTION("mismatched q has strictly larger sample variance") {
      VariationalState bad = q.clone();
      bad.layers[0][0].logit = Tensor::scalar(0.0, true);
      bad.layers[1][0].logit = Tensor::scalar(0.0, true);
      ElboEstimate eb = elbo_estimate(toy, bad, image, {2000, PresenceSampling::kHard}, rng);
      CHECK(eb.std_error > e.std_error);
    }
  }
}

TEST_CASE("elbo gradients pass finite differences under frozen noise") {
  RandomStream rng(17);
  ModelParams m = random_small_model(1, 2, rng);
  std::vector<double> img(m.image_h * m.image_w);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::from({m.image_h, m.image_w}, img);

  SECTION("w.r.t. variational parameters, delta poses") {
    // pack: logits (3), pose means (3 x 6)
    std::vector<double> x{0.4, -0.7, 0.9};
    for (int i = 0; i < 18; ++i) x.push_back(rng.uniform(-0.4, 0.4));
    double err = finite_difference_check(
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
          RandomStream frozen(555);
          return elbo_graph(m, q, image, {2, PresenceSampling::kRelaxed}, frozen).value;
        },
        Tensor::from({21}, x), 1e-5);
    CHECK(err < 1e-4);
  }

  SECTION("w.r.t. variational parameters, full poses") {
    std::vector<double> x{0.2};
    for (int i = 0; i < 12; ++i) x.push_back(rng.uniform(-0.3, 0.3));
    ModelParams tiny = random_small_model(1, 0, rng);
    // single top capsule, no children: prior + entropy terms only
    tiny.layers[0] = LayerParams::create(1, 0);
    tiny.templates_color_raw = Tensor::zeros({0, 3, 3}, true);
    tiny.templates_alpha_raw = Tensor::zeros({0, 3, 3}, true);
    Tensor blank = Tensor::zeros({tiny.image_h, tiny.image_w});
    double err = finite_difference_check(
        [&](const Tensor& v) {
          VariationalState q;
          q.mode = PoseMode::kFull;
          q.layers.resize(2);
          CapsuleQ c;
          c.logit = take(v, {0});
          c.pose_mean = reshape(take(v, {1, 2, 3, 4, 5, 6}), {2, 3});
          c.pose_scale_raw = reshape(take(v, {7, 8, 9, 10, 11, 12}), {2, 3});
          q.layers[0].push_back(std::move(c));
          RandomStream frozen(777);
          return elbo_graph(tiny, q, blank, {2, PresenceSampling::kRelaxed}, frozen).value;
        },
        Tensor::from({13}, x), 1e-5);
    CHECK(err < 1e-4);
  }

  SECTION("w.r.t. global parameters through the same objective") {
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    const std::size_t nt = m.n_templates() * m.template_h * m.template_w;
    // pack: rho_raw (2), gamma_raw (4), pose_offsets (12), c_raw (2), templates (2*nt)
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
    double err = finite_difference_check(
        [&](const Tensor& v) {
          ModelParams p = m.clone();
          std::size_t off = 0;
          auto grab = [&](Shape shape) {
            std::vector<std::size_t> idx(numel(shape));
            for (auto& e : idx) e = off++;
            return reshape(take(v, idx), shape);
          };
          p.layers[0].rho_raw = grab({1, 2});
          p.layers[0].gamma_raw = grab({2, 2});
          p.layers[0].pose_offsets = grab({1, 2, 6});
          p.layers[0].c_raw = grab({1, 2});
          p.templates_color_raw = grab({2, m.template_h, m.template_w});
          p.templates_alpha_raw = grab({2, m.template_h, m.template_w});
          RandomStream frozen(999);
          return elbo_graph(p, q, image, {2, PresenceSampling::kRelaxed}, frozen).value;
        },
        Tensor::from({x.size()}, x), 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("fit_free_form") {
  RandomStream rng(19);
  // one smooth asymmetric template, planted pose, clean image
  ModelParams m = ModelParams::create(1, 1, 14, 14, 6);
  m.presence_prior = 0.9;
  LayerParams& l = m.layers[0];
  l.set_rho(0, 0, 0.9);
  l.set_gamma(1, 0, 0.95);
  l.set_gamma(0, 0, 0.05);
  l.set_c(0, 0, 0.5);
  std::vector<double> tc(36), ta(36);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const double dx = x - 2.5, dy = y - 2.5;
      const double r = std::sqrt(dx * dx + dy * dy);
      tc[y * 6 + x] = std::min(0.95, std::max(0.05, 0.9 - 0.12 * r + (x < 3 ? 0.1 : -0.1)));
      ta[y * 6 + x] = r < 3.4 ? 0.95 : 0.3;
    }
  m.set_template(0, tc, ta);

  Pose planted = make_pose(4.1, 3.6, 0.15);
  LatentState truth;
  truth.presence = {{Tensor::scalar(1.0)}, {Tensor::scalar(1.0)}};
  truth.pose = {{planted}, {planted}};
  Canvas clean = composite_scene(m.materialize_templates(), truth.pose[1],
                                 truth.presence[1], 14, 14);
  Tensor image = flatten(clean).detach();

  SECTION("stationary start stays monotone with frozen noise and no momentum") {
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng, 0.0);
    for (std::size_t k = 0; k < 2; ++k) {
      q.layers[k][0].logit = Tensor::scalar(4.0, true);
      q.layers[k][0].pose_mean = Tensor::from({2, 3}, planted.offset.values(), true);
    }
    FitOptions opt;
    opt.steps = 40;
    opt.step_size = 1e-4;
    opt.beta1 = 0.0;
    opt.frozen_noise = true;
    FitResult r = fit_free_form(m, image, q, opt, rng);
    REQUIRE(r.trace.size() == 40);
    for (std::size_t i = 1; i < r.trace.size(); ++i)
      CHECK(r.trace[i].elbo >= r.trace[i - 1].elbo - 1e-7);
  }

  SECTION("perturbed init recovers the planted pose") {
    RandomStream fitrng(31);
    int hits = 0;
    for (int trial = 0; trial < 3; ++trial) {
      Pose init_pose = make_pose(4.1 + fitrng.uniform(-1.5, 1.5), 3.6 + fitrng.uniform(-1.5, 1.5),
                                 0.15 + fitrng.uniform(-0.15, 0.15));
      VariationalState q = VariationalState::create(m, PoseMode::kDelta, fitrng, 0.0);
      for (std::size_t k = 0; k < 2; ++k) {
        q.layers[k][0].logit = Tensor::scalar(2.0, true);
        q.layers[k][0].pose_mean = Tensor::from({2, 3}, init_pose.offset.values(), true);
      }
      FitOptions opt;
      opt.steps = 600;
      opt.step_size = 0.02;
      opt.frozen_noise = true;
      FitResult r = fit_free_form(m, image, q, opt, fitrng);
      Pose got(Tensor::from({2, 3}, r.state.layers[1][0].pose_mean.values()));
      auto [tx, ty] = pose_translation(got);
      const double rot = pose_rotation(got);
      if (std::abs(tx - 4.1) < 0.5 && std::abs(ty - 3.6) < 0.5 &&
          std::abs(rot - 0.15) < 2.0 * M_PI / 180.0)
        ++hits;
      CHECK(r.trace.back().elbo > r.trace.front().elbo);
    }
    CHECK(hits >= 2);
  }

  SECTION("divergence raises a structured error with the trace") {
    Tensor bad = Tensor::full({14, 14}, std::numeric_limits<double>::infinity());
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    FitOptions opt;
    opt.steps = 3;
    CHECK_THROWS_AS(fit_free_form(m, bad, q, opt, rng), FitError);
  }
}

TEST_CASE("reconstruct") {
  RandomStream rng(23);
  ModelParams m = random_small_model(1, 2, rng, 8, 3);

  SECTION("planted latents round-trip") {
    LatentState st = random_latents(m, rng, true);
    st.presence[1][0] = Tensor::scalar(1.0);
    st.presence[1][1] = Tensor::scalar(1.0);
    Canvas direct = composite_scene(m.materialize_templates(), st.pose[1], st.presence[1],
                                    m.image_h, m.image_w);
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < m.capsules_in(k); ++i) {
        q.layers[k][i].logit =
            Tensor::scalar(st.presence[k][i].item() > 0.5 ? 40.0 : -40.0, true);
        q.layers[k][i].pose_mean = Tensor::from({2, 3}, st.pose[k][i].offset.values(), true);
      }
    Canvas recon = reconstruct(m, q);
    for (std::size_t i = 0; i < recon.color.size(); ++i)
      CHECK(recon.color[i] == Approx(direct.color[i]).margin(1e-9));
  }

  SECTION("all-off logits render a blank canvas") {
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    for (auto& layer : q.layers)
      for (auto& c : layer) c.logit = Tensor::scalar(-40.0, true);
    Canvas recon = reconstruct(m, q);
    // the floored over() quotient leaves a ~1e-10 residue, far below the
    // 1/255 quantization step
    for (double v : recon.color.values()) CHECK(std::abs(v) < 1e-6);
    for (double v : recon.alpha.values()) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("trace csv format") {
  std::vector<TracePoint> trace;
  for (int i = 0; i < 3; ++i)
    trace.push_back({i, -10.0 + i, -12.0 + i, {0.5, 1.5}});
  const std::string path = "trace_test.csv";
  write_trace_csv(path, trace);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,elbo,likelihood_term,kl_layer0,kl_layer1");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 3);
  std::remove(path.c_str());
}

TEST_CASE("serialization round trips") {
  RandomStream rng(29);
  SECTION("model parameters are lossless") {
    ModelParams m = random_small_model(3, 4, rng);
    json j = params_to_json(m);
    ModelParams back = params_from_json(json::parse(j.dump()));
    CHECK(back.layers[0].rho_raw.values() == m.layers[0].rho_raw.values());
    CHECK(back.layers[0].gamma_raw.values() == m.layers[0].gamma_raw.values());
    CHECK(back.layers[0].pose_offsets.values() == m.layers[0].pose_offsets.values());
    CHECK(back.layers[0].c_raw.values() == m.layers[0].c_raw.values());
    CHECK(back.templates_color_raw.values() == m.templates_color_raw.values());
    CHECK(back.templates_alpha_raw.values() == m.templates_alpha_raw.values());
    CHECK(back.presence_prior == m.presence_prior);
    CHECK(back.sigma_raw[0] == m.sigma_raw[0]);
  }
  SECTION("variational state is lossless") {
    ModelParams m = random_small_model(2, 2, rng);
    VariationalState q = VariationalState::create(m, PoseMode::kFull, rng);
    VariationalState back = variational_from_json(variational_to_json(q));
    CHECK(back.mode == PoseMode::kFull);
    for (std::size_t k = 0; k < q.layers.size(); ++k)
      for (std::size_t i = 0; i < q.layers[k].size(); ++i) {
        CHECK(back.layers[k][i].logit.values() == q.layers[k][i].logit.values());
        CHECK(back.layers[k][i].pose_mean.values() == q.layers[k][i].pose_mean.values());
      }
  }
  SECTION("malformed documents are rejected") {
    CHECK_THROWS_AS(params_from_json(json{{"kind", "other"}}), Error);
  }
}

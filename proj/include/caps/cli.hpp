#pragma once

// Command-line surface: generate / train / infer / reconstruct / eval /
// gradcheck / oracle. Exit codes: 0 success, 1 compute error, 2 usage error.

#include "caps/data_eval.hpp"
#include "caps/model_io.hpp"
#include "caps/training.hpp"
#include "caps/verification.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace caps {

namespace cli_detail {

inline SyntheticSpec load_spec(const std::string& path, std::string* params_file) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open spec file " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("spec file is not valid JSON: ") + e.what());
  }
  if (params_file && j.contains("params_file"))
    *params_file = j.at("params_file").get<std::string>();
  return synthetic_spec_from_json(j);
}

inline std::string image_name(std::size_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "img_%04zu.%s", i, suffix);
  return buf;
}

inline int run_generate(const std::string& spec_path, const std::string& out,
                        const std::string& params_path, std::uint64_t seed_override,
                        bool has_seed) {
  std::string params_file = params_path;
  SyntheticSpec spec = load_spec(spec_path, params_path.empty() ? &params_file : nullptr);
  if (has_seed) spec.seed = seed_override;
  ModelParams params = params_file.empty()
                           ? make_benchmark_model(std::max<std::size_t>(spec.n_classes, 4))
                           : load_model(params_file);
  RandomStream rng(spec.seed);
  GeneratedData g = generate_dataset(spec, params, rng);
  write_dataset(out, g.dataset);
  write_sidecar(out + ".latents.json", g.latents, g.dataset.labels);
  std::cout << "wrote " << g.dataset.size() << " images (" << g.dataset.h << "x"
            << g.dataset.w << ", " << g.dataset.n_classes << " classes) to " << out
            << "\n";
  return 0;
}

inline int run_train(const std::string& data_path, const std::string& config_path,
                     const std::string& out, const std::string& init_path,
                     unsigned threads_override, bool has_threads) {
  Dataset data = read_dataset(data_path);
  nlohmann::json cj;
  {
    std::ifstream f(config_path);
    if (!f) throw Error("cannot open config file " + config_path);
    try {
      f >> cj;
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("config file is not valid JSON: ") + e.what());
    }
  }
  TrainConfig cfg = train_config_from_json(cj);
  if (has_threads) cfg.threads = threads_override;

  ModelParams init = [&]() {
    if (!init_path.empty()) return load_model(init_path);
    std::size_t n_top = 16, n_templates = 16, template_size = 12;
    if (cj.contains("model")) {
      n_top = cj["model"].value("n_top", n_top);
      n_templates = cj["model"].value("n_templates", n_templates);
      template_size = cj["model"].value("template_size", template_size);
    }
    ModelParams m = ModelParams::create(n_top, n_templates, data.h, data.w, template_size);
    RandomStream rng(cfg.seed ^ 0x1417);
    randomize_parameters(m, rng);
    return m;
  }();

  RandomStream rng(cfg.seed);
  auto [params, report] = fit_parameters(data, cfg, init, rng);
  save_model(out, params, nlohmann::json{{"train_config", train_config_to_json(cfg)}});
  std::cout << "epoch,train_elbo,holdout_elbo\n";
  std::cout.precision(17);
  for (const auto& e : report.epochs)
    std::cout << e.epoch << ',' << e.train_elbo << ',' << e.holdout_elbo << "\n";
  std::cout << "saved checkpoint to " << out << "\n";
  return 0;
}

inline int run_infer(const std::string& ckpt, const std::string& data_path, int steps,
                     const std::string& out_dir, double step_size, std::uint64_t seed,
                     unsigned threads, long limit, const std::string& init_kind) {
  ModelParams params = load_model(ckpt);
  Dataset data = read_dataset(data_path);
  std::filesystem::create_directories(out_dir);
  const std::size_t n =
      limit < 0 ? data.size() : std::min<std::size_t>(data.size(), static_cast<std::size_t>(limit));
  const PhiInit init = init_kind == "anchor" ? PhiInit::kAnchor : PhiInit::kMatched;
  const ModelParams frozen = detail::frozen_copy(params);
  std::vector<FitResult> results(n);
  parallel_for(n, threads, [&](std::size_t i) {
    RandomStream rng(detail::mix(seed, i, 0x1f2e));
    Tensor image = data.image_tensor(i);
    VariationalState q = init == PhiInit::kMatched
                             ? matched_filter_init(frozen, image, PoseMode::kDelta, rng)
                             : VariationalState::create(frozen, PoseMode::kDelta, rng);
    FitOptions fo;
    fo.steps = steps;
    fo.step_size = step_size;
    results[i] = fit_free_form(frozen, image, q, fo, rng);
  });
  for (std::size_t i = 0; i < n; ++i) {
    const std::filesystem::path dir(out_dir);
    save_variational((dir / image_name(i, "phi.json")).string(), results[i].state);
    write_pgm((dir / image_name(i, "recon.pgm")).string(),
              flatten(reconstruct(frozen, results[i].state)));
    write_trace_csv((dir / image_name(i, "trace.csv")).string(), results[i].trace);
  }
  std::cout << "inferred " << n << " images into " << out_dir << "\n";
  return 0;
}

inline int run_reconstruct(const std::string& ckpt, const std::string& latents,
                           const std::string& out) {
  ModelParams params = load_model(ckpt);
  VariationalState q = load_variational(latents);
  write_pgm(out, flatten(reconstruct(params, q)));
  std::cout << "wrote " << out << "\n";
  return 0;
}

inline int run_eval(const std::string& ckpt, const std::string& data_path,
                    const std::string& mode, int steps, double step_size,
                    std::uint64_t seed, unsigned threads, const std::string& csv_out) {
  ModelParams params = load_model(ckpt);
  Dataset data = read_dataset(data_path);
  if (data.n_classes < 2) throw Error("eval: dataset has fewer than two classes");
  const FeatureMode fmode =
      mode == "tA" ? FeatureMode::kPresenceAndPose : FeatureMode::kPresenceOnly;
  auto states = infer_dataset(params, data, steps, step_size, seed, threads);

  // deterministic interleaved split: every 4th image is held out
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<std::uint32_t> train_y, test_y;
  std::vector<double> recon_l2, elbos;
  const ModelParams frozen = detail::frozen_copy(params);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto f = latent_features(states[i], fmode);
    if (i % 4 == 3) {
      test_x.push_back(f);
      test_y.push_back(data.labels[i]);
      Canvas rec = reconstruct(frozen, states[i]);
      recon_l2.push_back(l2_error(flatten(rec), data.image_tensor(i)));
      RandomStream rng(detail::mix(seed, i, 0xe1b0));
      elbos.push_back(
          elbo_estimate(frozen, states[i], data.image_tensor(i), {8, PresenceSampling::kRelaxed}, rng)
              .value);
    } else {
      train_x.push_back(f);
      train_y.push_back(data.labels[i]);
    }
  }
  ReadoutModel readout = train_readout(train_x, train_y, data.n_classes);
  std::vector<std::uint32_t> pred;
  for (const auto& f : test_x) pred.push_back(readout_predict(readout, f));
  MetricsRecord metrics = eval_metrics(pred, test_y, data.n_classes, recon_l2, elbos);
  std::cout << "mode: " << (fmode == FeatureMode::kPresenceAndPose ? "{t0, A0}" : "t0")
            << ", train " << train_x.size() << ", held-out " << test_x.size() << "\n";
  std::cout << metrics_table(metrics);
  if (!csv_out.empty()) {
    write_metrics_csv(csv_out, metrics);
    std::cout << "wrote " << csv_out << "\n";
  }
  return 0;
}

inline int run_gradcheck(std::uint64_t seed) {
  bool ok = true;
  std::cout << "check                              max_rel_err\n";
  for (const auto& r : run_full_gradient_suite(seed)) {
    std::printf("%-34s %.3e%s\n", r.name.c_str(), r.max_rel_err,
                r.ok() ? "" : "  FAIL");
    ok = ok && r.ok();
  }
  std::cout << (ok ? "all gradient checks passed (rel err < 1e-4)\n"
                   : "gradient checks FAILED\n");
  return ok ? 0 : 1;
}

inline int run_oracle(std::uint64_t seed) {
  OracleResult marg = run_marginalization_oracle(seed, 12);
  std::printf("%-34s %.3e%s\n", marg.name.c_str(), marg.max_abs_err,
              marg.ok(1e-9) ? "" : "  FAIL");
  bool ok = marg.ok(1e-9);

  // hard-presence ELBO against the enumerated evidence on a random toy
  RandomStream rng(seed + 5);
  ModelParams m = random_small_model(1, 1, rng);
  LatentState poses = random_latents(m, rng, true);
  std::vector<double> img(m.image_h * m.image_w);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::from({m.image_h, m.image_w}, img);
  const double evidence = enumerate_presence_evidence(m, poses, image);
  double worst_gap = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    VariationalState q = VariationalState::create(m, PoseMode::kDelta, rng);
    q.layers[0][0].logit = Tensor::scalar(rng.uniform(-2.5, 2.5), true);
    q.layers[1][0].logit = Tensor::scalar(rng.uniform(-2.5, 2.5), true);
    q.layers[0][0].pose_mean = Tensor::from({2, 3}, poses.pose[0][0].offset.values(), true);
    q.layers[1][0].pose_mean = Tensor::from({2, 3}, poses.pose[1][0].offset.values(), true);
    ElboEstimate e = elbo_estimate(m, q, image, {400, PresenceSampling::kHard}, rng);
    worst_gap = std::max(worst_gap, e.value - (evidence + 3.0 * e.std_error));
  }
  const bool bound_ok = worst_gap <= 1e-9;
  std::printf("%-34s %.3e%s\n", "elbo_bound_violation", std::max(worst_gap, 0.0),
              bound_ok ? "" : "  FAIL");
  ok = ok && bound_ok;
  std::cout << (ok ? "all oracles agree\n" : "oracle checks FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace cli_detail

inline int run_command(const std::vector<std::string>& args) {
  CLI::App app{"generative capsule model: synthesis, training, inference, evaluation"};
  app.require_subcommand(1);

  std::string spec_path, data_path, config_path, ckpt_path, out_path, out_dir,
      init_path, params_path, latents_path, csv_out;
  std::string mode = "t", init_kind = "matched";
  int steps = 300;
  long limit = -1;
  double step_size = 0.05;
  std::uint64_t seed = 0;
  unsigned threads = 0;

  auto* generate = app.add_subcommand("generate", "sample a synthetic dataset from a model");
  generate->add_option("--spec", spec_path, "synthetic spec JSON")->required();
  generate->add_option("--out", out_path, "output dataset file")->required();
  generate->add_option("--params", params_path, "model parameter JSON (default: built-in benchmark)");
  auto* gen_seed = generate->add_option("--seed", seed, "override the spec seed");

  auto* train = app.add_subcommand("train", "fit model parameters on a dataset");
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--config", config_path, "train config JSON")->required();
  train->add_option("--out", out_path, "output checkpoint path")->required();
  train->add_option("--init", init_path, "initial parameters (default: random init)");
  auto* train_threads = train->add_option("--threads", threads, "worker threads (0 = all)");

  auto* infer = app.add_subcommand("infer", "free-form variational inference per image");
  infer->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  infer->add_option("--data", data_path, "dataset file")->required();
  infer->add_option("--steps", steps, "gradient steps per image")->required();
  infer->add_option("--out-dir", out_dir, "output directory")->required();
  infer->add_option("--step-size", step_size, "Adam step size");
  infer->add_option("--seed", seed, "noise seed");
  infer->add_option("--threads", threads, "worker threads (0 = all)");
  infer->add_option("--limit", limit, "only the first N images");
  infer->add_option("--init", init_kind, "phi init: matched|anchor")
      ->check(CLI::IsMember({"matched", "anchor"}));

  auto* reconstruct = app.add_subcommand("reconstruct", "render a canvas from saved latents");
  reconstruct->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  reconstruct->add_option("--latents", latents_path, "variational state JSON")->required();
  reconstruct->add_option("--out", out_path, "output PGM path")->required();

  auto* eval = app.add_subcommand("eval", "linear readout on inferred latents");
  eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  eval->add_option("--data", data_path, "dataset file")->required();
  eval->add_option("--mode", mode, "feature set: t (presences) or tA (presences+poses)")
      ->check(CLI::IsMember({"t", "tA"}));
  eval->add_option("--steps", steps, "inference steps per image");
  eval->add_option("--step-size", step_size, "Adam step size");
  eval->add_option("--seed", seed, "noise seed");
  eval->add_option("--threads", threads, "worker threads (0 = all)");
  eval->add_option("--out-csv", csv_out, "also write metrics CSV here");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seed", seed, "random point seed");

  auto* oracle = app.add_subcommand("oracle", "enumeration and bound oracles");
  oracle->add_option("--seed", seed, "random configuration seed");

  // CLI11 wants argv reversed
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (generate->parsed())
      return cli_detail::run_generate(spec_path, out_path, params_path, seed,
                                      gen_seed->count() > 0);
    if (train->parsed())
      return cli_detail::run_train(data_path, config_path, out_path, init_path, threads,
                                   train_threads->count() > 0);
    if (infer->parsed())
      return cli_detail::run_infer(ckpt_path, data_path, steps, out_dir, step_size, seed,
                                   threads, limit, init_kind);
    if (reconstruct->parsed())
      return cli_detail::run_reconstruct(ckpt_path, latents_path, out_path);
    if (eval->parsed())
      return cli_detail::run_eval(ckpt_path, data_path, mode, steps, step_size, seed,
                                  threads, csv_out);
    if (gradcheck->parsed()) return cli_detail::run_gradcheck(seed == 0 ? 7 : seed);
    if (oracle->parsed()) return cli_detail::run_oracle(seed == 0 ? 101 : seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n" << app.help() << "\n";
  return 2;
}

inline int run_command(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(args);
}

}  // namespace caps

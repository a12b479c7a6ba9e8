#include "caps/data_eval.hpp"
#include "caps/model_io.hpp"

#include <catch2/catch.hpp>

#include <cmath>

using namespace caps;

namespace {
struct Split {
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<std::uint32_t> train_y, test_y;
};

Split split_features(const std::vector<std::vector<double>>& x,
                     const std::vector<std::uint32_t>& y, double train_frac) {
  Split s;
  const std::size_t n_train = static_cast<std::size_t>(x.size() * train_frac);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i < n_train) {
      s.train_x.push_back(x[i]);
      s.train_y.push_back(y[i]);
    } else {
      s.test_x.push_back(x[i]);
      s.test_y.push_back(y[i]);
    }
  }
  return s;
}

double readout_accuracy(const ReadoutModel& m, const std::vector<std::vector<double>>& x,
                        const std::vector<std::uint32_t>& y) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (readout_predict(m, x[i]) == y[i]) ++ok;
  return static_cast<double>(ok) / static_cast<double>(x.size());
}
}  // namespace

TEST_CASE("readout on separable data reaches full training accuracy") {
  std::vector<std::vector<double>> x;
  std::vector<std::uint32_t> y;
  RandomStream rng(3);
  for (int i = 0; i < 40; ++i) {
    const bool cls = i % 2 == 1;
    x.push_back({rng.uniform() + (cls ? 2.5 : 0.0), rng.uniform()});
    y.push_back(cls ? 1 : 0);
  }
  ReadoutModel m = train_readout(x, y, 2);
  CHECK(readout_accuracy(m, x, y) == 1.0);
}

TEST_CASE("readout rejects degenerate input") {
  std::vector<std::vector<double>> x{{0.1}, {0.2}};
  CHECK_THROWS_AS(train_readout(x, {0, 0}, 2), DomainError);
  CHECK_THROWS_AS(train_readout(x, {0, 1}, 1), DomainError);
}

TEST_CASE("shuffled labels score at chance on held-out data") {
  RandomStream rng(11);
  std::vector<std::vector<double>> x;
  std::vector<std::uint32_t> y;
  const std::size_t n_classes = 4;
  for (int i = 0; i < 400; ++i) {
    std::vector<double> f(6);
    for (auto& v : f) v = rng.uniform(-1, 1);
    x.push_back(f);
    y.push_back(rng.index(n_classes));  // labels independent of features
  }
  Split s = split_features(x, y, 0.5);
  ReadoutModel m = train_readout(s.train_x, s.train_y, n_classes);
  const double acc = readout_accuracy(m, s.test_x, s.test_y);
  CHECK(std::abs(acc - 1.0 / n_classes) < 0.1);
}

TEST_CASE("ground-truth presences classify the synthetic benchmark") {
  ModelParams truth = make_benchmark_model(4, 6, 24, 6);
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.samples_per_class = 40;
  spec.seed = 31;
  RandomStream rng(spec.seed);
  GeneratedData g = generate_dataset(spec, truth, rng);

  std::vector<std::vector<double>> x;
  for (const auto& st : g.latents) {
    std::vector<double> f;
    for (const auto& t : st.presence[0]) f.push_back(t.item());
    x.push_back(f);
  }
  // deterministic interleaved split
  Split s;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i % 4 == 3) {
      s.test_x.push_back(x[i]);
      s.test_y.push_back(g.dataset.labels[i]);
    } else {
      s.train_x.push_back(x[i]);
      s.train_y.push_back(g.dataset.labels[i]);
    }
  }
  ReadoutModel m = train_readout(s.train_x, s.train_y, 4);
  CHECK(readout_accuracy(m, s.test_x, s.test_y) >= 0.95);
}

TEST_CASE("latent feature vectors") {
  ModelParams truth = make_benchmark_model(4, 6, 24, 6);
  RandomStream rng(7);
  VariationalState q = VariationalState::create(truth, PoseMode::kDelta, rng);
  CHECK(latent_features(q, FeatureMode::kPresenceOnly).size() == 4);
  CHECK(latent_features(q, FeatureMode::kPresenceAndPose).size() == 28);

  q.layers[0][2].logit = Tensor::scalar(1.7, true);
  auto f = latent_features(q, FeatureMode::kPresenceOnly);
  CHECK(f[2] == Approx(1.0 / (1.0 + std::exp(-1.7))).epsilon(1e-12));
}

TEST_CASE("inference concentrates presence on the forced parent") {
  ModelParams truth = make_benchmark_model(3, 6, 24, 5, 7);
  SyntheticSpec spec;
  spec.n_classes = 3;
  spec.samples_per_class = 12;
  spec.translation_jitter = 0.6;
  spec.rotation_jitter = 0.04;
  spec.noise_sigma = 0.02;
  spec.seed = 13;
  RandomStream rng(spec.seed);
  GeneratedData g = generate_dataset(spec, truth, rng);
  auto states = infer_dataset(truth, g.dataset, 350, 0.05, 99, 2);
  int hits = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    std::size_t best = 0;
    double best_v = -1.0;
    for (std::size_t p = 0; p < 3; ++p) {
      const double v = states[i].mean_presence(0, p);
      if (v > best_v) {
        best_v = v;
        best = p;
      }
    }
    if (best == g.dataset.labels[i]) ++hits;
  }
  CHECK(hits >= static_cast<int>(states.size() * 9 / 10));
}

TEST_CASE("metrics") {
  SECTION("identical predictions give accuracy one") {
    MetricsRecord r = eval_metrics({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
    CHECK(r.accuracy == 1.0);
    for (double v : r.per_class_accuracy) CHECK(v == 1.0);
  }
  SECTION("zero reconstruction error for identical images") {
    Tensor a = Tensor::from({2, 2}, {0.1, 0.2, 0.3, 0.4});
    CHECK(l2_error(a, a) == 0.0);
  }
  SECTION("length mismatch is rejected") {
    CHECK_THROWS_AS(eval_metrics({0, 1}, {0}, 2), ShapeError);
  }
  SECTION("csv and table emission") {
    MetricsRecord r = eval_metrics({0, 1, 0, 0}, {0, 1, 1, 0}, 2, {0.5, 0.7}, {-10.0, -12.0});
    CHECK(r.accuracy == 0.75);
    CHECK(r.mean_l2 == Approx(0.6));
    CHECK(r.mean_elbo == Approx(-11.0));
    const std::string table = metrics_table(r);
    CHECK(table.find("accuracy") != std::string::npos);
    write_metrics_csv("metrics_test.csv", r);
    std::ifstream f("metrics_test.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "metric,value");
    std::remove("metrics_test.csv");
  }
}

TEST_CASE("fixture metrics reproduce bit-for-bit under the fixed seed") {
  ModelParams truth = make_benchmark_model(3, 4, 20, 5, 77);
  SyntheticSpec spec;
  spec.n_classes = 3;
  spec.samples_per_class = 8;
  spec.noise_sigma = 0.02;
  spec.seed = 321;
  RandomStream rng(spec.seed);
  GeneratedData g = generate_dataset(spec, truth, rng);
  auto states = infer_dataset(truth, g.dataset, 120, 0.05, 777, 2);
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<std::uint32_t> train_y, test_y;
  std::vector<double> l2s, elbos;
  const ModelParams frozen = detail::frozen_copy(truth);
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto f = latent_features(states[i], FeatureMode::kPresenceOnly);
    if (i % 4 == 3) {
      test_x.push_back(f);
      test_y.push_back(g.dataset.labels[i]);
      l2s.push_back(
          l2_error(flatten(reconstruct(frozen, states[i])), g.dataset.image_tensor(i)));
      RandomStream er(detail::mix(777, i, 0xe1b0));
      elbos.push_back(elbo_estimate(frozen, states[i], g.dataset.image_tensor(i),
                                    {4, PresenceSampling::kRelaxed}, er)
                          .value);
    } else {
      train_x.push_back(f);
      train_y.push_back(g.dataset.labels[i]);
    }
  }
  ReadoutModel m = train_readout(train_x, train_y, 3);
  std::vector<std::uint32_t> pred;
  for (auto& f : test_x) pred.push_back(readout_predict(m, f));
  MetricsRecord r = eval_metrics(pred, test_y, 3, l2s, elbos);

  std::ifstream fx(std::string(CAPS_FIXTURE_DIR) + "/metrics_golden.json");
  REQUIRE(fx.good());
  nlohmann::json golden;
  fx >> golden;
  CHECK(r.accuracy == golden.at("accuracy").get<double>());
  CHECK(r.mean_l2 == golden.at("mean_l2").get<double>());
  CHECK(r.mean_elbo == golden.at("mean_elbo").get<double>());
  auto pca = golden.at("per_class_accuracy").get<std::vector<double>>();
  REQUIRE(pca.size() == r.per_class_accuracy.size());
  for (std::size_t c = 0; c < pca.size(); ++c) CHECK(r.per_class_accuracy[c] == pca[c]);
}

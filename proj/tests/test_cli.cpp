#include "caps/cli.hpp"

#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

using namespace caps;
namespace fs = std::filesystem;

namespace {
struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "caps_cli_test") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}
}  // namespace

TEST_CASE("cli usage errors exit with code 2") {
  CHECK(run_command(std::vector<std::string>{}) == 2);
  CHECK(run_command({"no-such-subcommand"}) == 2);
  CHECK(run_command({"generate"}) == 2);                       // missing required flags
  CHECK(run_command({"generate", "--unknown-flag", "x"}) == 2);
  CHECK(run_command({"eval", "--ckpt", "a", "--data", "b", "--mode", "bogus"}) == 2);
}

TEST_CASE("cli compute errors exit with code 1") {
  CHECK(run_command({"reconstruct", "--ckpt", "/nonexistent.json", "--latents", "x",
                     "--out", "y"}) == 1);
  TempDir dir;
  {
    std::ofstream f(dir / "bad.json");
    f << "{ not json";
  }
  CHECK(run_command({"generate", "--spec", dir / "bad.json", "--out", dir / "d.caps"}) == 1);
}

TEST_CASE("cli pipeline produces the documented artifacts") {
  TempDir dir;
  {
    std::ofstream f(dir / "spec.json");
    f << R"({"n_classes": 2, "samples_per_class": 3, "noise_sigma": 0.02, "seed": 11})";
  }
  REQUIRE(run_command({"generate", "--spec", dir / "spec.json", "--out", dir / "d.caps"}) == 0);
  Dataset d = read_dataset(dir / "d.caps");
  CHECK(d.size() == 6);
  CHECK(d.n_classes == 2);
  CHECK(fs::exists(dir / "d.caps.latents.json"));

  // generate is deterministic in the spec seed
  REQUIRE(run_command({"generate", "--spec", dir / "spec.json", "--out", dir / "d2.caps"}) == 0);
  CHECK(slurp(dir / "d.caps") == slurp(dir / "d2.caps"));

  {
    std::ofstream f(dir / "config.json");
    f << R"({"epochs": 1, "batch_size": 4, "inner_inference_steps": 4, "seed": 3,
             "eval_steps": 3, "eval_samples": 1, "eval_train_cap": 4,
             "freeze_templates": true,
             "model": {"n_top": 2, "n_templates": 3, "template_size": 5}})";
  }
  REQUIRE(run_command({"train", "--data", dir / "d.caps", "--config", dir / "config.json",
                       "--out", dir / "ckpt.json"}) == 0);
  ModelParams loaded = load_model(dir / "ckpt.json");
  CHECK(loaded.n_top == 2);
  CHECK(loaded.n_templates() == 3);
  // checkpoint echoes the train config
  json doc = load_model_document(dir / "ckpt.json");
  CHECK(doc.contains("train_config"));
  CHECK(doc["train_config"]["epochs"] == 1);

  REQUIRE(run_command({"infer", "--ckpt", dir / "ckpt.json", "--data", dir / "d.caps",
                       "--steps", "10", "--out-dir", dir / "out", "--limit", "2",
                       "--seed", "5"}) == 0);
  CHECK(fs::exists(fs::path(dir / "out") / "img_0000.phi.json"));
  CHECK(fs::exists(fs::path(dir / "out") / "img_0000.recon.pgm"));
  CHECK(fs::exists(fs::path(dir / "out") / "img_0001.trace.csv"));
  {
    std::ifstream f(fs::path(dir / "out") / "img_0000.trace.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,elbo,likelihood_term,kl_layer0,kl_layer1");
  }

  REQUIRE(run_command({"reconstruct", "--ckpt", dir / "ckpt.json", "--latents",
                       (fs::path(dir / "out") / "img_0000.phi.json").string(), "--out",
                       dir / "recon.pgm"}) == 0);
  const std::string pgm = slurp(dir / "recon.pgm");
  CHECK(pgm.substr(0, 3) == "P5\n");

  REQUIRE(run_command({"eval", "--ckpt", dir / "ckpt.json", "--data", dir / "d.caps",
                       "--mode", "tA", "--steps", "8", "--out-csv", dir / "m.csv"}) == 0);
  const std::string csv = slurp(dir / "m.csv");
  CHECK(csv.rfind("metric,value", 0) == 0);
}

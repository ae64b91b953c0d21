// Drives the installed command-line binary end to end: the all-in-one run,
// the equivalent stage-by-stage sequence, seed and kernel overrides, the
// explicit-proportion retrain, and error exits for bad invocations.
//
// Invoked as: test_cli <path-to-entsel-binary>

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "entsel/entropy.hpp"
#include "entsel/pipeline.hpp"

using namespace entsel;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_binary;

fs::path test_root() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / "entsel_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string shq(const std::string& s) { return "'" + s + "'"; }

int run_cli(const std::string& args) {
  const std::string cmd = shq(g_binary) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

RunConfig cli_config() {
  RunConfig cfg = default_run_config();
  cfg.seed = 4242;
  cfg.dataset.synthetic.n_groups = 12;
  cfg.dataset.synthetic.samples_per_group = {3, 10, 0.25};
  cfg.dataset.synthetic.duplicate_fraction = 0.5;
  cfg.dataset.synthetic.perturbation_sigma = 0.05;
  cfg.dataset.synthetic.class_prior = 0.4;
  cfg.dataset.synthetic.feature_dim = 6;
  cfg.dataset.synthetic.class_separation = 2.5;
  cfg.hidden_width = 8;
  cfg.train.batch_size = 16;
  cfg.train.stage_a_lr = 0.02;
  cfg.train.stage_b_lr = 0.005;
  cfg.train.max_epochs_a = 4;
  cfg.train.max_epochs_b = 4;
  cfg.optimizer.total_calls = 8;
  cfg.optimizer.random_starts = 3;
  cfg.histogram_bins = 10;
  return cfg;
}

const fs::path& config_path() {
  static const fs::path p = [] {
    const fs::path path = test_root() / "config.json";
    std::ofstream f(path, std::ios::binary);
    f << run_config_to_json(cli_config()).dump(2) << "\n";
    return path;
  }();
  return p;
}

// One shared `run` invocation; later cases compare against its artifacts.
const fs::path& run_dir() {
  static const fs::path dir = [] {
    const fs::path d = test_root() / "run";
    REQUIRE(run_cli("run --config " + shq(config_path().string()) + " --out " +
                    shq(d.string())) == 0);
    return d;
  }();
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("the all-in-one subcommand produces a complete run") {
  const fs::path& dir = run_dir();
  REQUIRE(fs::exists(dir / artifact::kManifestJson));
  const json m = json::parse(read_file(dir / artifact::kManifestJson));
  CHECK(m.at("incomplete").get<bool>() == false);
  CHECK(m.at("seed").get<std::uint64_t>() == 4242);
  CHECK(fs::exists(dir / artifact::kMetricsJson));
  CHECK(fs::exists(dir / artifact::kEntropyGapJson));
}

TEST_CASE("the stage sequence reproduces the all-in-one artifacts") {
  const fs::path dir = test_root() / "staged";
  const std::string tail =
      " --config " + shq(config_path().string()) + " --out " + shq(dir.string());
  for (const char* sub : {"generate", "split", "train-baseline", "score", "optimize",
                          "train-entropy", "evaluate", "compare", "export"}) {
    INFO("subcommand: " << sub);
    REQUIRE(run_cli(std::string(sub) + tail) == 0);
  }
  for (const char* rel : {artifact::kTraceCsv, artifact::kScoresCsv, artifact::kMetricsJson,
                          artifact::kEntropyGapJson, artifact::kValPredictionsCsv})
    CHECK(read_file(dir / rel) == read_file(run_dir() / rel));
}

TEST_CASE("a seed override changes the outcome") {
  const fs::path dir = test_root() / "reseeded";
  REQUIRE(run_cli("run --seed 5 --config " + shq(config_path().string()) + " --out " +
                  shq(dir.string())) == 0);
  CHECK(read_file(dir / artifact::kTraceCsv) != read_file(run_dir() / artifact::kTraceCsv));
  const json m = json::parse(read_file(dir / artifact::kManifestJson));
  CHECK(m.at("seed").get<std::uint64_t>() == 5);
}

TEST_CASE("an explicit proportion retrains the selection") {
  const fs::path dir = test_root() / "override";
  fs::copy(run_dir(), dir, fs::copy_options::recursive);
  REQUIRE(run_cli("train-entropy --proportion 0.55 --config " +
                  shq(config_path().string()) + " --out " + shq(dir.string())) == 0);
  const EntropyScoreTable table = load_scores_csv(dir / artifact::kScoresCsv);
  const std::size_t want = static_cast<std::size_t>(
      std::floor(0.55 * static_cast<double>(table.rows.size()) + 0.5));
  std::size_t informative = 0;
  for (const EntropyScoreRow& row : table.rows) informative += row.informative ? 1 : 0;
  CHECK(informative == want);
}

TEST_CASE("the kernel backend can be forced to the portable implementation") {
  const fs::path dir = test_root() / "scalar";
  REQUIRE(run_cli("run --kernels scalar --config " + shq(config_path().string()) +
                  " --out " + shq(dir.string())) == 0);
  const json m = json::parse(read_file(dir / artifact::kManifestJson));
  CHECK(m.at("kernel_backend").get<std::string>() == "scalar");
}

TEST_CASE("bad invocations exit nonzero") {
  const std::string out = shq((test_root() / "never").string());
  CHECK(run_cli("run --config " + shq((test_root() / "missing.json").string()) +
                " --out " + out) != 0);
  CHECK(run_cli("frobnicate --config " + shq(config_path().string()) + " --out " + out) !=
        0);
  CHECK(run_cli("") != 0);
  CHECK(run_cli("run --out " + out) != 0);
  CHECK(run_cli("run --kernels warp9 --config " + shq(config_path().string()) +
                " --out " + out) != 0);
  CHECK(!fs::exists(test_root() / "never" / artifact::kManifestJson));
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <entsel-binary>\n");
    return 2;
  }
  g_binary = argv[1];
  doctest::Context context;
  return context.run();
}

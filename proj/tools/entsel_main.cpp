// Command-line front end for the informative-sample-selection pipeline.
// Every subcommand reads the run configuration from --config and works
// inside the --out directory, so a sequence of subcommands and the
// all-in-one `run` produce identical artifact trees.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <exception>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "entsel/kernels.hpp"
#include "entsel/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  std::string kernels = "auto";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Run configuration JSON file")
      ->required();
  cmd->add_option("--out", args.out_dir, "Artifact directory")->required();
  cmd->add_option("--seed", args.seed_override,
                  "Override the seed from the configuration file");
  cmd->add_option("--kernels", args.kernels, "Kernel backend: auto, scalar or avx2")
      ->check(CLI::IsMember({"auto", "scalar", "avx2"}));
}

entsel::RunConfig load_config(const CommonArgs& args) {
  if (args.kernels == "auto")
    entsel::kernels::use_auto();
  else if (args.kernels == "scalar")
    entsel::kernels::force(entsel::kernels::Backend::scalar);
  else
    entsel::kernels::force(entsel::kernels::Backend::avx2);
  entsel::RunConfig cfg = entsel::load_run_config(args.config_path);
  if (args.seed_override) cfg.seed = *args.seed_override;
  return cfg;
}

void print_run_summary(const entsel::RunManifest& manifest, const std::string& out_dir) {
  const nlohmann::json& m = manifest.json;
  std::cout << "kernel backend:         " << m.at("kernel_backend").get<std::string>()
            << "\n";
  if (m.contains("counts")) {
    const nlohmann::json& c = m.at("counts");
    const auto count = [&](const char* key) -> std::string {
      return c.contains(key) ? std::to_string(c.at(key).get<std::uint64_t>()) : "?";
    };
    std::cout << "samples:                " << count("total") << " internal ("
              << count("train") << " train / " << count("validation") << " validation / "
              << count("test") << " test), " << count("external") << " external\n";
    std::cout << "training subset:        " << count("informative") << " informative / "
              << count("redundant") << " redundant\n";
  }
  if (!m.at("informative_proportion").is_null())
    std::cout << "informative proportion: " << m.at("informative_proportion").get<double>()
              << "\n";
  if (!m.at("best_validation_loss").is_null())
    std::cout << "best validation loss:   " << m.at("best_validation_loss").get<double>()
              << "\n";
  std::cout << "artifacts:              " << m.at("artifacts").size() << " files in "
            << out_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-based informative training sample selection pipeline"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"generate", "Produce (or canonicalize) the internal and external datasets"},
      {"split", "Assign groups to train/validation/test splits"},
      {"train-baseline", "Train the full-data model"},
      {"score", "Score training samples by prediction entropy"},
      {"optimize", "Search the informative-proportion space"},
      {"train-entropy", "Materialize (or retrain) the informative-subset model"},
      {"evaluate", "Evaluate both models on every held-out set"},
      {"compare", "Run recall comparisons between the two models"},
      {"export", "Write histogram, embedding and gap-test artifacts"},
      {"run", "Run the whole pipeline end to end"},
  };
  std::vector<CommonArgs> args(std::size(subs));
  std::vector<CLI::App*> cmds;
  for (std::size_t i = 0; i < std::size(subs); ++i) {
    CLI::App* cmd = app.add_subcommand(subs[i].name, subs[i].help);
    add_common(cmd, args[i]);
    cmds.push_back(cmd);
  }
  double proportion = 0.0;
  CLI::Option* prop_opt =
      cmds[5]->add_option("--proportion", proportion,
                          "Retrain at this informative proportion instead of the optimum");

  CLI11_PARSE(app, argc, argv);

  const CLI::App* active = app.get_subcommands().front();
  const std::string name = active->get_name();
  const std::size_t idx =
      static_cast<std::size_t>(std::find_if(std::begin(subs), std::end(subs),
                                            [&](const Sub& s) { return name == s.name; }) -
                               std::begin(subs));
  try {
    const entsel::RunConfig cfg = load_config(args[idx]);
    const std::filesystem::path out = args[idx].out_dir;
    if (name == "generate") {
      entsel::stage_generate(cfg, out);
    } else if (name == "split") {
      entsel::stage_split(cfg, out);
    } else if (name == "train-baseline") {
      entsel::stage_train_baseline(cfg, out);
    } else if (name == "score") {
      entsel::stage_score(cfg, out);
    } else if (name == "optimize") {
      entsel::stage_optimize(cfg, out);
    } else if (name == "train-entropy") {
      std::optional<double> override_p;
      if (prop_opt->count() > 0) override_p = proportion;
      entsel::stage_train_entropy(cfg, out, override_p);
    } else if (name == "evaluate") {
      entsel::stage_evaluate(cfg, out);
    } else if (name == "compare") {
      const nlohmann::json comparisons = entsel::stage_compare(cfg, out);
      std::cout << comparisons.dump(2) << "\n";
    } else if (name == "export") {
      entsel::stage_export(cfg, out);
    } else {
      const entsel::RunManifest manifest = entsel::run_pipeline(cfg, out);
      print_run_summary(manifest, args[idx].out_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

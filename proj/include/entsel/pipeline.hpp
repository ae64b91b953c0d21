#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "entsel/bayesopt.hpp"
#include "entsel/classifier.hpp"
#include "entsel/dataset.hpp"
#include "entsel/entropy.hpp"
#include "entsel/metrics.hpp"

namespace entsel {

// Where the pipeline's data comes from: generated on the fly, or existing
// CSV files that get validated and canonicalized into the run directory.
struct DatasetSource {
  enum class Kind { synthetic, csv };
  Kind kind = Kind::synthetic;
  SyntheticConfig synthetic;  // seed/offsets filled from the run seed
  bool external_enabled = true;
  double external_mean_shift = 0.5;   // added to every feature mean
  std::size_t external_n_groups = 0;  // 0 -> same as internal
  std::filesystem::path internal_csv, external_csv;
};

struct RunConfig {
  std::uint64_t seed = 42;
  DatasetSource dataset;
  SplitFractions fractions;
  std::size_t hidden_width = 16;  // dense backbone width (0 -> plain head)
  std::size_t conv_channels = 4;  // conv backbone, grid datasets
  std::size_t conv_kernel = 3;
  TrainConfig train;           // seed field is ignored (derived from run seed)
  BoConfig optimizer;          // idem
  SearchSpace proportion_space;
  std::size_t histogram_bins = 20;
};

RunConfig default_run_config();
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical echo with every field spelled out; reruns of the same config
// serialize byte-identically.
nlohmann::json run_config_to_json(const RunConfig& config);

// Relative artifact paths inside a run directory.
namespace artifact {
inline constexpr const char* kInternalCsv = "data/internal.csv";
inline constexpr const char* kExternalCsv = "data/external.csv";
inline constexpr const char* kSplitsCsv = "data/splits.csv";
inline constexpr const char* kBaselineCkpt = "checkpoints/baseline.json";
inline constexpr const char* kEntropyCkpt = "checkpoints/entropy.json";
inline constexpr const char* kScoresCsv = "scores.csv";
inline constexpr const char* kTraceCsv = "trace.csv";
inline constexpr const char* kOptimizationJson = "reports/optimization.json";
inline constexpr const char* kMetricsJson = "reports/metrics.json";
inline constexpr const char* kEntropyGapJson = "reports/entropy_gap.json";
inline constexpr const char* kValPredictionsCsv = "reports/validation_predictions.csv";
inline constexpr const char* kLossBaselineCsv = "figures/loss_baseline.csv";
inline constexpr const char* kLossEntropyCsv = "figures/loss_entropy.csv";
inline constexpr const char* kHistogramCsv = "figures/entropy_histogram.csv";
inline constexpr const char* kManifestJson = "manifest.json";
inline constexpr const char* kTimingsJson = "timings.json";
}  // namespace artifact

// Each stage reads its inputs from files earlier stages wrote into `out`,
// so the subcommand sequence and the all-in-one run produce identical trees.
void stage_generate(const RunConfig& config, const std::filesystem::path& out);
void stage_split(const RunConfig& config, const std::filesystem::path& out);
void stage_train_baseline(const RunConfig& config, const std::filesystem::path& out);
void stage_score(const RunConfig& config, const std::filesystem::path& out);
void stage_optimize(const RunConfig& config, const std::filesystem::path& out);
void stage_train_entropy(const RunConfig& config, const std::filesystem::path& out,
                         std::optional<double> proportion_override = {});
void stage_evaluate(const RunConfig& config, const std::filesystem::path& out);
nlohmann::json stage_compare(const RunConfig& config, const std::filesystem::path& out);
void stage_export(const RunConfig& config, const std::filesystem::path& out);

struct RunManifest {
  nlohmann::json json;  // exactly what manifest.json holds
};

// Runs every stage in order, then writes manifest.json (deterministic:
// config echo, seed, counts, informative proportion, artifact SHA-256
// inventory) and timings.json (wall-clock sidecar, excluded from the
// inventory).  A failing stage still leaves a manifest behind, flagged
// incomplete with the stage name.
RunManifest run_pipeline(const RunConfig& config, const std::filesystem::path& out);

// Cross-artifact consistency checks run at the end of every pipeline run:
// split partition and group exclusivity, informative/redundant partition of
// the training split, proportion inside the search space, entropy-model
// validation loss equal to the trace optimum, thresholds reproducible from
// the archived validation predictions, and external group disjointness.
// Throws with the violated property's name.
void verify_run(const RunConfig& config, const std::filesystem::path& out);

// Per-truth-class normalized confusion flows (abnormal->abnormal,
// abnormal->normal, normal->normal, normal->abnormal).
struct SankeyFlows {
  double abnormal_to_abnormal = 0.0;
  double abnormal_to_normal = 0.0;
  double normal_to_normal = 0.0;
  double normal_to_abnormal = 0.0;
};

SankeyFlows export_sankey(const ConfusionMatrix& cm);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace entsel

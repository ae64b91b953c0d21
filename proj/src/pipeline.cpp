#include "entsel/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "entsel/format.hpp"
#include "entsel/kernels.hpp"
#include "entsel/rng.hpp"

namespace entsel {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw std::runtime_error("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw std::runtime_error("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::runtime_error(std::string("config: key '") + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig run_config_from_json(const json& j) {
  check_keys(j, {"seed", "dataset", "split", "model", "train", "optimizer",
                 "histogram_bins"},
             "top level");
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, {"source", "synthetic", "external", "internal_csv", "external_csv"},
               "dataset");
    const std::string source = get_or<std::string>(d, "source", "synthetic");
    if (source == "synthetic")
      cfg.dataset.kind = DatasetSource::Kind::synthetic;
    else if (source == "csv")
      cfg.dataset.kind = DatasetSource::Kind::csv;
    else
      throw std::runtime_error("config: dataset.source must be 'synthetic' or 'csv'");
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      check_keys(s,
                 {"n_groups", "group_size_min", "group_size_max", "heavy_tail_weight",
                  "duplicate_fraction", "perturbation_sigma", "class_prior",
                  "feature_dim", "grid_rows", "grid_cols", "class_separation"},
                 "dataset.synthetic");
      SyntheticConfig& sc = cfg.dataset.synthetic;
      sc.n_groups = get_or<std::size_t>(s, "n_groups", sc.n_groups);
      sc.samples_per_group.min = get_or<std::size_t>(s, "group_size_min", sc.samples_per_group.min);
      sc.samples_per_group.max = get_or<std::size_t>(s, "group_size_max", sc.samples_per_group.max);
      sc.samples_per_group.heavy_tail_weight =
          get_or<double>(s, "heavy_tail_weight", sc.samples_per_group.heavy_tail_weight);
      sc.duplicate_fraction = get_or<double>(s, "duplicate_fraction", sc.duplicate_fraction);
      sc.perturbation_sigma = get_or<double>(s, "perturbation_sigma", sc.perturbation_sigma);
      sc.class_prior = get_or<double>(s, "class_prior", sc.class_prior);
      sc.feature_dim = get_or<std::size_t>(s, "feature_dim", sc.feature_dim);
      const std::size_t rows = get_or<std::size_t>(s, "grid_rows", 0);
      const std::size_t cols = get_or<std::size_t>(s, "grid_cols", 0);
      if (rows > 0 || cols > 0) {
        if (rows == 0 || cols == 0)
          throw std::runtime_error("config: grid_rows and grid_cols must both be set");
        sc.grid = GridShape{rows, cols};
        sc.feature_dim = 0;
      }
      sc.class_separation = get_or<double>(s, "class_separation", sc.class_separation);
    }
    if (d.contains("external")) {
      const json& e = d.at("external");
      check_keys(e, {"enabled", "mean_shift", "n_groups"}, "dataset.external");
      cfg.dataset.external_enabled = get_or<bool>(e, "enabled", cfg.dataset.external_enabled);
      cfg.dataset.external_mean_shift =
          get_or<double>(e, "mean_shift", cfg.dataset.external_mean_shift);
      cfg.dataset.external_n_groups =
          get_or<std::size_t>(e, "n_groups", cfg.dataset.external_n_groups);
    }
    cfg.dataset.internal_csv = get_or<std::string>(d, "internal_csv", "");
    cfg.dataset.external_csv = get_or<std::string>(d, "external_csv", "");
  }

  if (j.contains("split")) {
    const json& s = j.at("split");
    check_keys(s, {"train", "validation", "test"}, "split");
    cfg.fractions.train = get_or<double>(s, "train", cfg.fractions.train);
    cfg.fractions.validation = get_or<double>(s, "validation", cfg.fractions.validation);
    cfg.fractions.test = get_or<double>(s, "test", cfg.fractions.test);
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"hidden_width", "conv_channels", "conv_kernel"}, "model");
    cfg.hidden_width = get_or<std::size_t>(m, "hidden_width", cfg.hidden_width);
    cfg.conv_channels = get_or<std::size_t>(m, "conv_channels", cfg.conv_channels);
    cfg.conv_kernel = get_or<std::size_t>(m, "conv_kernel", cfg.conv_kernel);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"batch_size", "stage_a_lr", "stage_b_lr", "adam_beta1", "adam_beta2",
                "adam_epsilon", "max_epochs_a", "max_epochs_b"},
               "train");
    cfg.train.batch_size = get_or<std::size_t>(t, "batch_size", cfg.train.batch_size);
    cfg.train.stage_a_lr = get_or<double>(t, "stage_a_lr", cfg.train.stage_a_lr);
    cfg.train.stage_b_lr = get_or<double>(t, "stage_b_lr", cfg.train.stage_b_lr);
    cfg.train.adam_beta1 = get_or<double>(t, "adam_beta1", cfg.train.adam_beta1);
    cfg.train.adam_beta2 = get_or<double>(t, "adam_beta2", cfg.train.adam_beta2);
    cfg.train.adam_epsilon = get_or<double>(t, "adam_epsilon", cfg.train.adam_epsilon);
    cfg.train.max_epochs_a = get_or<std::size_t>(t, "max_epochs_a", cfg.train.max_epochs_a);
    cfg.train.max_epochs_b = get_or<std::size_t>(t, "max_epochs_b", cfg.train.max_epochs_b);
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o,
               {"total_calls", "random_starts", "xi", "candidate_grid_size",
                "proportion_lower", "proportion_upper"},
               "optimizer");
    cfg.optimizer.total_calls = get_or<std::size_t>(o, "total_calls", cfg.optimizer.total_calls);
    cfg.optimizer.random_starts =
        get_or<std::size_t>(o, "random_starts", cfg.optimizer.random_starts);
    cfg.optimizer.xi = get_or<double>(o, "xi", cfg.optimizer.xi);
    cfg.optimizer.candidate_grid_size =
        get_or<std::size_t>(o, "candidate_grid_size", cfg.optimizer.candidate_grid_size);
    cfg.proportion_space.lower = get_or<double>(o, "proportion_lower", cfg.proportion_space.lower);
    cfg.proportion_space.upper = get_or<double>(o, "proportion_upper", cfg.proportion_space.upper);
  }

  cfg.histogram_bins = get_or<std::size_t>(j, "histogram_bins", cfg.histogram_bins);

  if (!(cfg.proportion_space.lower > 0.0 && cfg.proportion_space.upper <= 1.0 &&
        cfg.proportion_space.lower < cfg.proportion_space.upper))
    throw std::runtime_error("config: proportion bounds must satisfy 0 < lower < upper <= 1");
  if (cfg.histogram_bins == 0)
    throw std::runtime_error("config: histogram_bins must be positive");
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config: bad JSON in " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["dataset"]["source"] =
      cfg.dataset.kind == DatasetSource::Kind::synthetic ? "synthetic" : "csv";
  const SyntheticConfig& sc = cfg.dataset.synthetic;
  j["dataset"]["synthetic"] = {{"n_groups", sc.n_groups},
                               {"group_size_min", sc.samples_per_group.min},
                               {"group_size_max", sc.samples_per_group.max},
                               {"heavy_tail_weight", sc.samples_per_group.heavy_tail_weight},
                               {"duplicate_fraction", sc.duplicate_fraction},
                               {"perturbation_sigma", sc.perturbation_sigma},
                               {"class_prior", sc.class_prior},
                               {"feature_dim", sc.feature_dim},
                               {"grid_rows", sc.grid ? sc.grid->rows : 0},
                               {"grid_cols", sc.grid ? sc.grid->cols : 0},
                               {"class_separation", sc.class_separation}};
  j["dataset"]["external"] = {{"enabled", cfg.dataset.external_enabled},
                              {"mean_shift", cfg.dataset.external_mean_shift},
                              {"n_groups", cfg.dataset.external_n_groups}};
  j["dataset"]["internal_csv"] = cfg.dataset.internal_csv.generic_string();
  j["dataset"]["external_csv"] = cfg.dataset.external_csv.generic_string();
  j["split"] = {{"train", cfg.fractions.train},
                {"validation", cfg.fractions.validation},
                {"test", cfg.fractions.test}};
  j["model"] = {{"hidden_width", cfg.hidden_width},
                {"conv_channels", cfg.conv_channels},
                {"conv_kernel", cfg.conv_kernel}};
  j["train"] = {{"batch_size", cfg.train.batch_size},
                {"stage_a_lr", cfg.train.stage_a_lr},
                {"stage_b_lr", cfg.train.stage_b_lr},
                {"adam_beta1", cfg.train.adam_beta1},
                {"adam_beta2", cfg.train.adam_beta2},
                {"adam_epsilon", cfg.train.adam_epsilon},
                {"max_epochs_a", cfg.train.max_epochs_a},
                {"max_epochs_b", cfg.train.max_epochs_b}};
  j["optimizer"] = {{"total_calls", cfg.optimizer.total_calls},
                    {"random_starts", cfg.optimizer.random_starts},
                    {"xi", cfg.optimizer.xi},
                    {"candidate_grid_size", cfg.optimizer.candidate_grid_size},
                    {"proportion_lower", cfg.proportion_space.lower},
                    {"proportion_upper", cfg.proportion_space.upper}};
  j["histogram_bins"] = cfg.histogram_bins;
  return j;
}

// ---------------------------------------------------------------------------
// Shared stage plumbing

namespace {

SyntheticConfig internal_synthetic(const RunConfig& cfg) {
  SyntheticConfig sc = cfg.dataset.synthetic;
  sc.seed = derive_seed(cfg.seed, "data/internal");
  sc.mean_shift = 0.0;
  sc.group_id_offset = 0;
  sc.sample_id_offset = 0;
  return sc;
}

constexpr std::uint64_t kExternalIdOffset = 1000000;

SyntheticConfig external_synthetic(const RunConfig& cfg) {
  SyntheticConfig sc = cfg.dataset.synthetic;
  if (cfg.dataset.external_n_groups > 0) sc.n_groups = cfg.dataset.external_n_groups;
  sc.seed = derive_seed(cfg.seed, "data/external");
  sc.mean_shift = cfg.dataset.external_mean_shift;
  sc.group_id_offset = kExternalIdOffset;
  sc.sample_id_offset = kExternalIdOffset;
  return sc;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  return tc;
}

BoConfig optimizer_config(const RunConfig& cfg) {
  BoConfig bc = cfg.optimizer;
  bc.seed = derive_seed(cfg.seed, "optimize");
  return bc;
}

Dataset load_internal(const fs::path& out) { return load_csv(out / artifact::kInternalCsv); }

std::optional<Dataset> load_external(const fs::path& out) {
  const fs::path p = out / artifact::kExternalCsv;
  if (!fs::exists(p)) return std::nullopt;
  return load_csv(p);
}

ModelConfig model_config(const RunConfig& cfg, const Dataset& data) {
  return model_config_for(data, cfg.hidden_width, cfg.conv_channels, cfg.conv_kernel);
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("bad JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

// Checkpoint whose stored validation loss no longer matches the data would
// poison everything downstream; recheck whenever one is loaded for use.
Checkpoint load_checked_checkpoint(const fs::path& path, const Dataset& data,
                                   const std::vector<std::uint64_t>& val_ids) {
  auto [ckpt, tc] = load_checkpoint(path);
  (void)tc;
  const double recomputed = mean_loss(ckpt.params, data, val_ids);
  if (!(std::fabs(recomputed - ckpt.validation_loss) <= 1e-10))
    throw std::runtime_error("checkpoint " + path.string() +
                             ": stored validation loss " + g17(ckpt.validation_loss) +
                             " does not match recomputed " + g17(recomputed));
  return std::move(ckpt);
}

std::vector<double> abnormal_probs(const ModelParams& model, const Dataset& data,
                                   const std::vector<std::uint64_t>& ids) {
  const auto probs = predict_proba(model, data, ids);
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i][1];
  return out;
}

std::vector<int> labels_of(const Dataset& data, const std::vector<std::uint64_t>& ids) {
  std::vector<int> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = data.by_id(ids[i]).label;
  return out;
}

json metric_value_json(const MetricValue& v) {
  return json{{"value", v.value}, {"degenerate", v.degenerate}};
}

json report_json(const MetricReport& rep) {
  const auto ci = clopper_pearson(rep.counts.tp, std::max<std::int64_t>(rep.counts.tp + rep.counts.fn, 1));
  json j;
  j["counts"] = {{"tp", rep.counts.tp}, {"fp", rep.counts.fp},
                 {"tn", rep.counts.tn}, {"fn", rep.counts.fn}};
  j["balanced_accuracy"] = metric_value_json(rep.balanced_accuracy);
  j["precision"] = metric_value_json(rep.precision);
  j["recall"] = metric_value_json(rep.recall);
  j["specificity"] = metric_value_json(rep.specificity);
  j["f_score"] = metric_value_json(rep.f_score);
  j["mcc"] = metric_value_json(rep.mcc);
  if (rep.counts.tp + rep.counts.fn > 0)
    j["recall_ci"] = {ci.first, ci.second};
  else
    j["recall_ci"] = nullptr;
  return j;
}

struct LoadedScores {
  EntropyScoreTable table;
  std::vector<std::uint64_t> informative_ids, redundant_ids;  // ascending
};

LoadedScores load_scores(const fs::path& out) {
  LoadedScores s;
  s.table = load_scores_csv(out / artifact::kScoresCsv);
  for (const auto& row : s.table.rows)
    (row.informative ? s.informative_ids : s.redundant_ids).push_back(row.sample_id);
  std::sort(s.informative_ids.begin(), s.informative_ids.end());
  std::sort(s.redundant_ids.begin(), s.redundant_ids.end());
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

void stage_generate(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out / "data");
  Dataset internal;
  std::optional<Dataset> external;
  if (cfg.dataset.kind == DatasetSource::Kind::synthetic) {
    internal = generate_synthetic(internal_synthetic(cfg));
    if (cfg.dataset.external_enabled) external = generate_synthetic(external_synthetic(cfg));
  } else {
    if (cfg.dataset.internal_csv.empty())
      throw std::runtime_error("generate: csv source needs dataset.internal_csv");
    internal = load_csv(cfg.dataset.internal_csv);
    if (!cfg.dataset.external_csv.empty()) external = load_csv(cfg.dataset.external_csv);
  }
  if (external) {
    std::set<std::uint64_t> internal_groups;
    for (const auto& s : internal.samples) internal_groups.insert(s.group_id);
    for (const auto& s : external->samples)
      if (internal_groups.count(s.group_id))
        throw std::runtime_error("generate: external group " + std::to_string(s.group_id) +
                                 " collides with an internal group");
    if (external->feature_dim != internal.feature_dim)
      throw std::runtime_error("generate: external feature_dim differs from internal");
  }
  save_csv(internal, out / artifact::kInternalCsv);
  if (external) save_csv(*external, out / artifact::kExternalCsv);
}

void stage_split(const RunConfig& cfg, const fs::path& out) {
  const Dataset data = load_internal(out);
  const SplitAssignment splits =
      split_by_group(data, cfg.fractions, derive_seed(cfg.seed, "split"));
  save_splits_csv(splits, out / artifact::kSplitsCsv);
}

void stage_train_baseline(const RunConfig& cfg, const fs::path& out) {
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "figures");
  const TrainConfig tc = train_config(cfg);
  const TrainResult result =
      train_two_stage(data, splits.ids_in(Split::train), splits.ids_in(Split::validation),
                      model_config(cfg, data), tc);
  save_checkpoint(result.best, tc, out / artifact::kBaselineCkpt);
  save_loss_curves_csv(result.curves, out / artifact::kLossBaselineCsv);
}

void stage_score(const RunConfig& cfg, const fs::path& out) {
  (void)cfg;
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const Checkpoint ckpt = load_checked_checkpoint(out / artifact::kBaselineCkpt, data,
                                                  splits.ids_in(Split::validation));
  const EntropyScoreTable table =
      score_training_set(ckpt.params, data, splits.ids_in(Split::train));
  save_scores_csv(table, out / artifact::kScoresCsv);
}

void stage_optimize(const RunConfig& cfg, const fs::path& out) {
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const std::vector<std::uint64_t> val_ids = splits.ids_in(Split::validation);
  EntropyScoreTable table = load_scores_csv(out / artifact::kScoresCsv);
  const ModelConfig mc = model_config(cfg, data);
  const TrainConfig tc = train_config(cfg);
  fs::create_directories(out / "reports");
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "figures");

  // Same selected count -> same subset -> same deterministic training; cache
  // on the count so near-identical proportions cost nothing.
  std::unordered_map<std::size_t, double> cache;
  bool have_best = false;
  double best_loss = 0.0;
  Checkpoint best_ckpt;
  LossCurves best_curves;
  const auto objective = [&](double proportion) {
    EntropyScoreTable working = table;
    const Selection sel = select_informative(working, proportion);
    const auto hit = cache.find(sel.selected_count);
    if (hit != cache.end()) return hit->second;
    const TrainResult r =
        train_two_stage(data, sel.informative_ids, val_ids, mc, tc);
    cache.emplace(sel.selected_count, r.best.validation_loss);
    if (!have_best || r.best.validation_loss < best_loss) {
      have_best = true;
      best_loss = r.best.validation_loss;
      best_ckpt = r.best;
      best_curves = r.curves;
    }
    return r.best.validation_loss;
  };

  const OptimizationTrace trace =
      minimize(objective, cfg.proportion_space, optimizer_config(cfg));
  if (!have_best || trace.best_y != best_loss)
    throw std::runtime_error("optimize: trace optimum does not match the retained model");

  const Selection sel = select_informative(table, trace.best_x);
  (void)sel;
  save_scores_csv(table, out / artifact::kScoresCsv);
  save_trace_csv(trace, out / artifact::kTraceCsv);
  save_checkpoint(best_ckpt, tc, out / artifact::kEntropyCkpt);
  save_loss_curves_csv(best_curves, out / artifact::kLossEntropyCsv);

  json summary;
  summary["best_proportion"] = trace.best_x;
  summary["best_validation_loss"] = trace.best_y;
  summary["config"] = run_config_to_json(cfg);
  summary["seed"] = cfg.seed;
  write_json_file(summary, out / artifact::kOptimizationJson);
}

void stage_train_entropy(const RunConfig& cfg, const fs::path& out,
                         std::optional<double> proportion_override) {
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const std::vector<std::uint64_t> val_ids = splits.ids_in(Split::validation);
  EntropyScoreTable table = load_scores_csv(out / artifact::kScoresCsv);
  const TrainConfig tc = train_config(cfg);
  const fs::path ckpt_path = out / artifact::kEntropyCkpt;

  if (proportion_override) {
    // Explicit retrain at a chosen proportion (exploratory use).
    const Selection sel = select_informative(table, *proportion_override);
    const TrainResult r =
        train_two_stage(data, sel.informative_ids, val_ids, model_config(cfg, data), tc);
    save_scores_csv(table, out / artifact::kScoresCsv);
    save_checkpoint(r.best, tc, ckpt_path);
    save_loss_curves_csv(r.curves, out / artifact::kLossEntropyCsv);
    return;
  }

  const json summary = read_json_file(out / artifact::kOptimizationJson);
  const double best_p = summary.at("best_proportion").get<double>();
  const double best_loss = summary.at("best_validation_loss").get<double>();

  if (!fs::exists(ckpt_path)) {
    const Selection sel = select_informative(table, best_p);
    const TrainResult r =
        train_two_stage(data, sel.informative_ids, val_ids, model_config(cfg, data), tc);
    save_checkpoint(r.best, tc, ckpt_path);
    save_loss_curves_csv(r.curves, out / artifact::kLossEntropyCsv);
    if (r.best.validation_loss != best_loss)
      throw std::runtime_error("train-entropy: retrained validation loss " +
                               g17(r.best.validation_loss) +
                               " does not reproduce the recorded optimum " + g17(best_loss));
    return;
  }

  // Default path: the optimum's checkpoint was persisted during the search;
  // verify it instead of training an extra time.
  const Checkpoint ckpt = load_checked_checkpoint(ckpt_path, data, val_ids);
  if (ckpt.validation_loss != best_loss)
    throw std::runtime_error("train-entropy: checkpoint validation loss " +
                             g17(ckpt.validation_loss) +
                             " does not match the recorded optimum " + g17(best_loss));
}

namespace {

struct ModelEvaluation {
  std::string name;
  Checkpoint ckpt;
  double threshold = 0.0;
  std::vector<double> val_probs;
  // name -> (report, in_sample)
  std::vector<std::pair<std::string, MetricReport>> reports;
  std::vector<std::pair<std::string, bool>> in_sample;
};

}  // namespace

void stage_evaluate(const RunConfig& cfg, const fs::path& out) {
  (void)cfg;
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const std::optional<Dataset> external = load_external(out);
  const LoadedScores scores = load_scores(out);
  const std::vector<std::uint64_t> val_ids = splits.ids_in(Split::validation);
  const std::vector<std::uint64_t> test_ids = splits.ids_in(Split::test);
  const std::vector<int> val_labels = labels_of(data, val_ids);
  fs::create_directories(out / "reports");
  fs::create_directories(out / "figures");

  std::vector<ModelEvaluation> models(2);
  models[0].name = "baseline";
  models[0].ckpt = load_checked_checkpoint(out / artifact::kBaselineCkpt, data, val_ids);
  models[1].name = "entropy";
  models[1].ckpt = load_checked_checkpoint(out / artifact::kEntropyCkpt, data, val_ids);

  for (ModelEvaluation& m : models) {
    m.val_probs = abnormal_probs(m.ckpt.params, data, val_ids);
    m.threshold = select_threshold_max_f(m.val_probs, val_labels);

    const auto eval_on = [&](const std::string& name, const Dataset& d,
                             const std::vector<std::uint64_t>& ids, bool in_sample) {
      if (ids.empty()) return;
      const auto probs = abnormal_probs(m.ckpt.params, d, ids);
      const auto labels = labels_of(d, ids);
      m.reports.emplace_back(name, evaluate_at_threshold(probs, labels, m.threshold));
      m.in_sample.emplace_back(name, in_sample);
    };
    eval_on("validation", data, val_ids, false);
    eval_on("internal_test", data, test_ids, false);
    if (external) eval_on("external_test", *external, external->all_ids(), false);
    // The redundant rows were part of the baseline's training set but not of
    // the entropy model's.
    eval_on("redundant", data, scores.redundant_ids, m.name == "baseline");
  }

  json metrics;
  const json opt_summary = read_json_file(out / artifact::kOptimizationJson);
  metrics["informative_proportion"] = opt_summary.at("best_proportion");
  for (const ModelEvaluation& m : models) {
    json jm;
    jm["threshold"] = m.threshold;
    jm["validation_loss"] = m.ckpt.validation_loss;
    jm["checkpoint_stage"] = m.ckpt.stage;
    jm["checkpoint_epoch"] = m.ckpt.epoch;
    for (std::size_t i = 0; i < m.reports.size(); ++i) {
      json jr = report_json(m.reports[i].second);
      jr["in_sample"] = m.in_sample[i].second;
      jm["evaluations"][m.reports[i].first] = std::move(jr);
    }
    metrics["models"][m.name] = std::move(jm);
  }
  write_json_file(metrics, out / artifact::kMetricsJson);

  // Validation predictions back the threshold-provenance check.
  {
    std::ofstream vp(out / artifact::kValPredictionsCsv, std::ios::binary);
    if (!vp) throw std::runtime_error("evaluate: cannot open validation predictions file");
    vp << "model,sample_id,label,p_abnormal\n";
    for (const ModelEvaluation& m : models)
      for (std::size_t i = 0; i < val_ids.size(); ++i)
        vp << m.name << "," << val_ids[i] << "," << val_labels[i] << ","
           << g17(m.val_probs[i]) << "\n";
    if (!vp) throw std::runtime_error("evaluate: write failed for validation predictions");
  }

  for (const ModelEvaluation& m : models) {
    std::ofstream cm(out / ("figures/confusion_" + m.name + ".csv"), std::ios::binary);
    if (!cm) throw std::runtime_error("evaluate: cannot open confusion file");
    cm << "split,TP,FP,TN,FN\n";
    for (const auto& [name, rep] : m.reports)
      cm << name << "," << rep.counts.tp << "," << rep.counts.fp << "," << rep.counts.tn
         << "," << rep.counts.fn << "\n";
    if (!cm) throw std::runtime_error("evaluate: write failed for confusion file");

    std::ofstream sk(out / ("figures/sankey_" + m.name + ".csv"), std::ios::binary);
    if (!sk) throw std::runtime_error("evaluate: cannot open sankey file");
    sk << "split,truth,prediction,flow\n";
    for (const auto& [name, rep] : m.reports) {
      if (rep.counts.tp + rep.counts.fn == 0 || rep.counts.tn + rep.counts.fp == 0)
        continue;  // flows are per-truth-class; a missing class has none
      const SankeyFlows flows = export_sankey(rep.counts);
      sk << name << ",abnormal,abnormal," << g17(flows.abnormal_to_abnormal) << "\n";
      sk << name << ",abnormal,normal," << g17(flows.abnormal_to_normal) << "\n";
      sk << name << ",normal,normal," << g17(flows.normal_to_normal) << "\n";
      sk << name << ",normal,abnormal," << g17(flows.normal_to_abnormal) << "\n";
    }
    if (!sk) throw std::runtime_error("evaluate: write failed for sankey file");
  }
}

nlohmann::json stage_compare(const RunConfig& cfg, const fs::path& out) {
  (void)cfg;
  json metrics = read_json_file(out / artifact::kMetricsJson);
  const json& base_evals = metrics.at("models").at("baseline").at("evaluations");
  const json& ent_evals = metrics.at("models").at("entropy").at("evaluations");

  json comparisons = json::object();
  for (const auto& [name, base_eval] : base_evals.items()) {
    if (name == "validation" || !ent_evals.contains(name)) continue;
    const json& ent_eval = ent_evals.at(name);
    const auto counts_of = [](const json& e) {
      return std::pair<std::int64_t, std::int64_t>(
          e.at("counts").at("tp").get<std::int64_t>(),
          e.at("counts").at("tp").get<std::int64_t>() +
              e.at("counts").at("fn").get<std::int64_t>());
    };
    const auto [k1, n1] = counts_of(base_eval);
    const auto [k2, n2] = counts_of(ent_eval);
    if (n1 == 0 || n2 == 0) {
      comparisons[name] = nullptr;  // recall undefined on one side
      continue;
    }
    const double r1 = static_cast<double>(k1) / static_cast<double>(n1);
    const double r2 = static_cast<double>(k2) / static_cast<double>(n2);
    const RecallComparison rc =
        compare_recall(r1, clopper_pearson(k1, n1), r2, clopper_pearson(k2, n2));
    comparisons[name] = {{"baseline_recall", rc.recall1},
                         {"entropy_recall", rc.recall2},
                         {"baseline_ci", {rc.ci1_lower, rc.ci1_upper}},
                         {"entropy_ci", {rc.ci2_lower, rc.ci2_upper}},
                         {"baseline_se", rc.se1},
                         {"entropy_se", rc.se2},
                         {"delta_recall", rc.delta},
                         {"delta_se", rc.delta_se},
                         {"z", rc.z},
                         {"p", rc.p},
                         {"significant", rc.significant}};
  }
  metrics["comparisons"] = comparisons;
  write_json_file(metrics, out / artifact::kMetricsJson);
  return comparisons;
}

void stage_export(const RunConfig& cfg, const fs::path& out) {
  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const std::optional<Dataset> external = load_external(out);
  const LoadedScores scores = load_scores(out);
  const std::vector<std::uint64_t> val_ids = splits.ids_in(Split::validation);
  fs::create_directories(out / "figures");
  fs::create_directories(out / "reports");

  const EntropyHistogram hist_inf =
      entropy_histogram(scores.table, cfg.histogram_bins, SubsetFilter::informative);
  const EntropyHistogram hist_red =
      entropy_histogram(scores.table, cfg.histogram_bins, SubsetFilter::redundant);
  save_histogram_csv(hist_inf, hist_red, out / artifact::kHistogramCsv);

  const EntropyGapResult gap = entropy_gap_test(scores.table);
  json jg;
  jg["mean_informative"] = gap.mean_informative;
  jg["mean_redundant"] = gap.mean_redundant;
  jg["ci_informative"] = {gap.stats.ci2_lower, gap.stats.ci2_upper};
  jg["ci_redundant"] = {gap.stats.ci1_lower, gap.stats.ci1_upper};
  jg["delta"] = gap.stats.delta;
  jg["delta_se"] = gap.stats.delta_se;
  jg["z"] = gap.stats.z;
  jg["p"] = gap.stats.p;
  jg["significant"] = gap.stats.significant;
  write_json_file(jg, out / artifact::kEntropyGapJson);

  const std::pair<const char*, const char*> model_files[2] = {
      {"baseline", artifact::kBaselineCkpt}, {"entropy", artifact::kEntropyCkpt}};
  for (const auto& [name, ckpt_file] : model_files) {
    const Checkpoint ckpt = load_checked_checkpoint(out / ckpt_file, data, val_ids);
    const std::size_t m = ckpt.params.config.embedding_dim();
    const auto dump = [&](const std::string& split, const Dataset& d,
                          const std::vector<std::uint64_t>& ids) {
      std::ofstream f(out / ("figures/embeddings_" + std::string(name) + "_" + split + ".csv"),
                      std::ios::binary);
      if (!f) throw std::runtime_error("export: cannot open embeddings file");
      f << "sample_id,label";
      for (std::size_t e = 0; e < m; ++e) f << ",e" << e;
      f << "\n";
      const auto embs = penultimate_embeddings(ckpt.params, d, ids);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        f << ids[i] << "," << d.by_id(ids[i]).label;
        for (const double v : embs[i]) f << "," << g17(v);
        f << "\n";
      }
      if (!f) throw std::runtime_error("export: write failed for embeddings file");
    };
    dump("train", data, splits.ids_in(Split::train));
    dump("validation", data, val_ids);
    dump("test", data, splits.ids_in(Split::test));
    if (external) dump("external", *external, external->all_ids());
    dump("redundant", data, scores.redundant_ids);
  }
}

// ---------------------------------------------------------------------------
// Manifest, timings, verification

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256_file: cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256_file: digest init failed");
  }
  char buf[65536];
  while (in.good()) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got)) != 1) {
      EVP_MD_CTX_free(ctx);
      throw std::runtime_error("sha256_file: digest update failed");
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256_file: digest final failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex(static_cast<std::size_t>(len) * 2, '0');
  for (unsigned int i = 0; i < len; ++i)
    std::snprintf(hex.data() + 2 * i, 3, "%02x", digest[i]);
  return hex;
}

SankeyFlows export_sankey(const ConfusionMatrix& cm) {
  const std::int64_t pos = cm.tp + cm.fn;
  const std::int64_t neg = cm.tn + cm.fp;
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("export_sankey: a truth class is empty");
  SankeyFlows f;
  f.abnormal_to_abnormal = static_cast<double>(cm.tp) / static_cast<double>(pos);
  f.abnormal_to_normal = static_cast<double>(cm.fn) / static_cast<double>(pos);
  f.normal_to_normal = static_cast<double>(cm.tn) / static_cast<double>(neg);
  f.normal_to_abnormal = static_cast<double>(cm.fp) / static_cast<double>(neg);
  return f;
}

namespace {

json build_manifest(const RunConfig& cfg, const fs::path& out, bool incomplete,
                    const std::string& failed_stage) {
  json m;
  m["schema_version"] = 1;
  m["seed"] = cfg.seed;
  m["kernel_backend"] = kernels::backend_name(kernels::active());
  m["config"] = run_config_to_json(cfg);
  m["incomplete"] = incomplete;
  m["failed_stage"] = incomplete ? json(failed_stage) : json(nullptr);

  m["informative_proportion"] = nullptr;
  m["best_validation_loss"] = nullptr;
  m["counts"] = json::object();
  try {
    const json opt = read_json_file(out / artifact::kOptimizationJson);
    m["informative_proportion"] = opt.at("best_proportion");
    m["best_validation_loss"] = opt.at("best_validation_loss");
  } catch (const std::exception&) {
  }
  try {
    const Dataset data = load_internal(out);
    m["counts"]["total"] = data.samples.size();
    const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
    m["counts"]["train"] = splits.ids_in(Split::train).size();
    m["counts"]["validation"] = splits.ids_in(Split::validation).size();
    m["counts"]["test"] = splits.ids_in(Split::test).size();
  } catch (const std::exception&) {
  }
  try {
    const std::optional<Dataset> external = load_external(out);
    m["counts"]["external"] = external ? json(external->samples.size()) : json(0);
  } catch (const std::exception&) {
  }
  try {
    const LoadedScores scores = load_scores(out);
    m["counts"]["informative"] = scores.informative_ids.size();
    m["counts"]["redundant"] = scores.redundant_ids.size();
  } catch (const std::exception&) {
  }

  json artifacts = json::array();
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), out);
    const std::string rel_s = rel.generic_string();
    if (rel_s == artifact::kManifestJson || rel_s == artifact::kTimingsJson) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) {
              return a.generic_string() < b.generic_string();
            });
  for (const fs::path& rel : files) {
    json a;
    a["path"] = rel.generic_string();
    a["sha256"] = sha256_file(out / rel);
    a["bytes"] = fs::file_size(out / rel);
    artifacts.push_back(std::move(a));
  }
  m["artifacts"] = std::move(artifacts);
  return m;
}

}  // namespace

void verify_run(const RunConfig& cfg, const fs::path& out) {
  const auto fail = [](const std::string& what) {
    throw std::runtime_error("verify_run: " + what);
  };

  const Dataset data = load_internal(out);
  const SplitAssignment splits = load_splits_csv(data, out / artifact::kSplitsCsv);
  const std::vector<std::uint64_t> train_ids = splits.ids_in(Split::train);
  const std::vector<std::uint64_t> val_ids = splits.ids_in(Split::validation);
  const std::vector<std::uint64_t> test_ids = splits.ids_in(Split::test);

  // Split partition: loader already enforced completeness and group
  // exclusivity; double-check conservation.
  if (train_ids.size() + val_ids.size() + test_ids.size() != data.samples.size())
    fail("splits do not conserve the sample count");

  // Informative/redundant must partition the training split.
  const LoadedScores scores = load_scores(out);
  {
    std::vector<std::uint64_t> merged = scores.informative_ids;
    merged.insert(merged.end(), scores.redundant_ids.begin(), scores.redundant_ids.end());
    std::sort(merged.begin(), merged.end());
    if (merged != train_ids)
      fail("informative + redundant ids do not partition the training split");
  }

  const json opt = read_json_file(out / artifact::kOptimizationJson);
  const double ip = opt.at("best_proportion").get<double>();
  const double best_loss = opt.at("best_validation_loss").get<double>();
  if (!(ip >= cfg.proportion_space.lower - 1e-12 &&
        ip <= cfg.proportion_space.upper + 1e-12))
    fail("informative proportion " + g17(ip) + " escapes the search space");

  // Selection must be reproducible from the proportion alone.
  {
    EntropyScoreTable copy = scores.table;
    const Selection sel = select_informative(copy, ip);
    if (sel.informative_ids != scores.informative_ids ||
        sel.redundant_ids != scores.redundant_ids)
      fail("stored informative flags do not match re-selection at the stored proportion");
  }

  // Trace bookkeeping: full budget spent, optimum consistent with the summary.
  {
    const OptimizationTrace trace = load_trace_csv(out / artifact::kTraceCsv);
    if (trace.entries.size() != cfg.optimizer.total_calls)
      fail("trace does not contain exactly total_calls entries");
    if (trace.best_x != ip || std::fabs(trace.best_y - best_loss) > 1e-9)
      fail("trace optimum disagrees with the optimization summary");
  }

  // Checkpoints recompute to their stored validation losses (also checks the
  // entropy model equals the trace optimum).
  (void)load_checked_checkpoint(out / artifact::kBaselineCkpt, data, val_ids);
  const Checkpoint ent = load_checked_checkpoint(out / artifact::kEntropyCkpt, data, val_ids);
  if (std::fabs(ent.validation_loss - best_loss) > 1e-9)
    fail("entropy checkpoint loss differs from the trace optimum");

  // Thresholds must be reproducible from the archived validation predictions.
  {
    const json metrics = read_json_file(out / artifact::kMetricsJson);
    std::ifstream vp(out / artifact::kValPredictionsCsv, std::ios::binary);
    if (!vp) fail("validation predictions file missing");
    std::string line;
    if (!std::getline(vp, line) || line != "model,sample_id,label,p_abnormal")
      fail("validation predictions file has a bad header");
    std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<int>>> preds;
    while (std::getline(vp, line)) {
      if (line.empty()) continue;
      const auto fields = split_fields(line);
      if (fields.size() != 4) fail("validation predictions file malformed");
      preds[fields[0]].first.push_back(parse_double(fields[3], "verify_run"));
      preds[fields[0]].second.push_back(static_cast<int>(parse_u64(fields[2], "verify_run")));
    }
    for (const char* name : {"baseline", "entropy"}) {
      const auto it = preds.find(name);
      if (it == preds.end()) fail(std::string("no archived predictions for ") + name);
      const double recomputed =
          select_threshold_max_f(it->second.first, it->second.second);
      const double stored =
          metrics.at("models").at(name).at("threshold").get<double>();
      if (recomputed != stored)
        fail(std::string("threshold for ") + name +
             " is not reproducible from the archived validation predictions");
    }
  }

  // External groups must stay disjoint from internal ones.
  const std::optional<Dataset> external = load_external(out);
  if (external) {
    std::set<std::uint64_t> internal_groups;
    for (const auto& s : data.samples) internal_groups.insert(s.group_id);
    for (const auto& s : external->samples)
      if (internal_groups.count(s.group_id)) fail("external group ids overlap internal ones");
  }
}

RunManifest run_pipeline(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  using StageFn = std::function<void()>;
  const std::vector<std::pair<std::string, StageFn>> stages = {
      {"generate", [&] { stage_generate(cfg, out); }},
      {"split", [&] { stage_split(cfg, out); }},
      {"train-baseline", [&] { stage_train_baseline(cfg, out); }},
      {"score", [&] { stage_score(cfg, out); }},
      {"optimize", [&] { stage_optimize(cfg, out); }},
      {"train-entropy", [&] { stage_train_entropy(cfg, out); }},
      {"evaluate", [&] { stage_evaluate(cfg, out); }},
      {"compare", [&] { (void)stage_compare(cfg, out); }},
      {"export", [&] { stage_export(cfg, out); }},
      {"verify", [&] { verify_run(cfg, out); }},
  };

  json timings;
  timings["stages"] = json::array();
  double total = 0.0;
  for (const auto& [name, fn] : stages) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
    } catch (const std::exception& e) {
      write_json_file(build_manifest(cfg, out, true, name), out / artifact::kManifestJson);
      write_json_file(timings, out / artifact::kTimingsJson);
      throw std::runtime_error("stage '" + name + "' failed: " + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings["stages"].push_back({{"name", name}, {"seconds", secs}});
    total += secs;
  }
  timings["total_seconds"] = total;

  RunManifest manifest;
  manifest.json = build_manifest(cfg, out, false, "");
  write_json_file(manifest.json, out / artifact::kManifestJson);
  write_json_file(timings, out / artifact::kTimingsJson);
  return manifest;
}

}  // namespace entsel

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "entsel/dataset.hpp"

namespace entsel {

// Channel-major feature stack: values[(c * rows + i) * cols + j].
struct FeatureMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<double> values;

  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return values[(c * rows + i) * cols + j];
  }
};

// Global average pooling: one spatial mean per channel.
std::vector<double> gap_pool(const FeatureMap& map);

// Numerically safe softmax (max-subtracted).  Rejects non-finite logits.
std::vector<double> softmax(const std::vector<double>& logits);

// -log p[label], with probabilities floored at 1e-12 before the log.
double cross_entropy(const std::vector<double>& probs, int label);

// The classifier is a tiny two-class net: an optional backbone (one dense
// ReLU layer on feature vectors, or one valid-padded conv layer + ReLU +
// global average pooling on grids) followed by a dense softmax head on the
// pooled/hidden representation.
enum class BackboneKind { identity, dense, conv };

std::string_view backbone_name(BackboneKind k);
BackboneKind parse_backbone(std::string_view name);

struct ModelConfig {
  BackboneKind backbone = BackboneKind::dense;
  std::size_t input_dim = 0;     // identity/dense pathways
  std::size_t hidden_width = 0;  // dense backbone width
  GridShape grid;                // conv pathway input shape
  std::size_t conv_channels = 0;
  std::size_t conv_kernel = 3;

  std::size_t feature_dim() const;    // expected input feature count
  std::size_t embedding_dim() const;  // penultimate representation width
  void validate() const;
};

// Flat parameter block: [backbone weights | backbone bias | head weights |
// head bias].  Keeping one contiguous array makes the optimizer and the
// finite-difference checks trivial.
struct ParamLayout {
  std::size_t backbone_w = 0, backbone_b = 0, head_w = 0, head_b = 0;  // sizes
  std::size_t off_backbone_w = 0, off_backbone_b = 0, off_head_w = 0, off_head_b = 0;
  std::size_t total = 0;

  static ParamLayout of(const ModelConfig& config);
};

struct ModelParams {
  ModelConfig config;
  std::vector<double> values;

  std::size_t param_count() const { return values.size(); }
};

// Seeded Gaussian initialization (fan-in scaled weights, zero biases).
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Picks the pathway from the dataset shape: grids get the conv backbone,
// vectors the dense one (or none when hidden_width is 0).
ModelConfig model_config_for(const Dataset& data, std::size_t hidden_width,
                             std::size_t conv_channels, std::size_t conv_kernel);

std::vector<double> predict_proba_one(const ModelParams& model,
                                      const std::vector<double>& features);
// Probabilities in the order of `ids`; identical to calling
// predict_proba_one per sample.
std::vector<std::vector<double>> predict_proba(const ModelParams& model,
                                               const Dataset& data,
                                               const std::vector<std::uint64_t>& ids);
double abnormal_probability(const ModelParams& model, const std::vector<double>& features);

std::vector<double> penultimate_one(const ModelParams& model,
                                    const std::vector<double>& features);
std::vector<std::vector<double>> penultimate_embeddings(const ModelParams& model,
                                                        const Dataset& data,
                                                        const std::vector<std::uint64_t>& ids);

// Mean cross-entropy over `ids`, accumulated in their given order.
// Propagates non-finite values instead of throwing (the trainer checks).
double mean_loss(const ModelParams& model, const Dataset& data,
                 const std::vector<std::uint64_t>& ids);

// Mean loss over a batch plus d(loss)/d(param) for every parameter.
// `grad` is resized and overwritten.
double loss_and_gradients(const ModelParams& model, const Dataset& data,
                          const std::vector<std::uint64_t>& ids,
                          std::vector<double>& grad);

struct TrainConfig {
  std::size_t batch_size = 512;
  double stage_a_lr = 1e-3;
  double stage_b_lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t max_epochs_a = 30;
  std::size_t max_epochs_b = 30;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  ModelParams params;
  std::string stage;      // "A" or "B"; epoch 0 of stage A is the initial model
  std::size_t epoch = 0;  // within the stage
  double validation_loss = 0.0;
};

struct StageCurve {
  std::vector<double> train_loss;  // one entry per completed epoch
  std::vector<double> val_loss;
};

struct LossCurves {
  StageCurve stage_a, stage_b;
};

struct TrainResult {
  ModelParams final_params;  // end of stage B (not necessarily the best)
  LossCurves curves;
  Checkpoint best;  // global minimum validation loss across both stages
};

// Stage A trains the head with the backbone frozen (lr stage_a_lr); stage B
// restarts Adam and fine-tunes everything from the best stage-A snapshot
// (lr stage_b_lr).  The initial model is evaluated and checkpointed before
// any update, and a snapshot is kept every time validation loss improves;
// the best one is returned.  Deterministic for a fixed seed.
TrainResult train_two_stage(const Dataset& data,
                            const std::vector<std::uint64_t>& train_ids,
                            const std::vector<std::uint64_t>& val_ids,
                            const ModelConfig& model_config,
                            const TrainConfig& train_config);

void save_checkpoint(const Checkpoint& ckpt, const TrainConfig& train_config,
                     const std::filesystem::path& path);
std::pair<Checkpoint, TrainConfig> load_checkpoint(const std::filesystem::path& path);

// CSV schema: stage,epoch,train_loss,val_loss (epoch is 1-based per stage).
void save_loss_curves_csv(const LossCurves& curves, const std::filesystem::path& path);
LossCurves load_loss_curves_csv(const std::filesystem::path& path);

}  // namespace entsel

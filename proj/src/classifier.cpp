#include "entsel/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "entsel/format.hpp"
#include "entsel/kernels.hpp"
#include "entsel/rng.hpp"

namespace entsel {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr std::size_t kClasses = 2;

// Scratch space reused across samples so the inner loops do not allocate.
struct Workspace {
  std::vector<double> hidden_pre, hidden;  // dense backbone
  std::vector<double> conv_pre, conv_act;  // conv backbone, channel-major
  std::vector<double> pooled;
  std::vector<double> logits, probs;
  std::vector<double> demb, dpre;
};

void raw_softmax(const std::vector<double>& logits, std::vector<double>& probs) {
  probs.resize(logits.size());
  double mx = logits[0];
  for (const double l : logits)
    if (l > mx) mx = l;
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
}

double raw_cross_entropy(const std::vector<double>& probs, int label) {
  const double p = probs[static_cast<std::size_t>(label)];
  if (std::isnan(p)) return p;
  return -std::log(p > kProbFloor ? p : kProbFloor);
}

std::size_t conv_out_rows(const ModelConfig& c) { return c.grid.rows - c.conv_kernel + 1; }
std::size_t conv_out_cols(const ModelConfig& c) { return c.grid.cols - c.conv_kernel + 1; }

// Runs the network on one sample; returns a pointer to the penultimate
// (embedding) representation, which lives either in `x` or in `ws`.
const double* forward_raw(const ModelParams& model, const double* x, Workspace& ws) {
  const ModelConfig& cfg = model.config;
  const ParamLayout lay = ParamLayout::of(cfg);
  const double* bw = model.values.data() + lay.off_backbone_w;
  const double* bb = model.values.data() + lay.off_backbone_b;
  const double* hw = model.values.data() + lay.off_head_w;
  const double* hb = model.values.data() + lay.off_head_b;
  const std::size_t m = cfg.embedding_dim();

  const double* emb = x;
  switch (cfg.backbone) {
    case BackboneKind::identity:
      break;
    case BackboneKind::dense: {
      ws.hidden_pre.resize(cfg.hidden_width);
      ws.hidden.resize(cfg.hidden_width);
      for (std::size_t k = 0; k < cfg.hidden_width; ++k)
        ws.hidden_pre[k] = kernels::dot(bw + k * cfg.input_dim, x, cfg.input_dim) + bb[k];
      kernels::relu(ws.hidden_pre.data(), ws.hidden.data(), cfg.hidden_width);
      emb = ws.hidden.data();
      break;
    }
    case BackboneKind::conv: {
      const std::size_t oh = conv_out_rows(cfg), ow = conv_out_cols(cfg);
      const std::size_t kk = cfg.conv_kernel;
      const std::size_t plane = oh * ow;
      ws.conv_pre.resize(cfg.conv_channels * plane);
      ws.conv_act.resize(cfg.conv_channels * plane);
      ws.pooled.resize(cfg.conv_channels);
      for (std::size_t c = 0; c < cfg.conv_channels; ++c) {
        const double* filt = bw + c * kk * kk;
        double* pre = ws.conv_pre.data() + c * plane;
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = bb[c];
            for (std::size_t a = 0; a < kk; ++a)
              acc += kernels::dot(filt + a * kk, x + (i + a) * cfg.grid.cols + j, kk);
            pre[i * ow + j] = acc;
          }
        }
      }
      kernels::relu(ws.conv_pre.data(), ws.conv_act.data(), ws.conv_act.size());
      // Global average pooling over each activation plane.
      for (std::size_t c = 0; c < cfg.conv_channels; ++c)
        ws.pooled[c] = kernels::sum(ws.conv_act.data() + c * plane, plane) /
                       static_cast<double>(plane);
      emb = ws.pooled.data();
      break;
    }
  }

  ws.logits.resize(kClasses);
  for (std::size_t o = 0; o < kClasses; ++o)
    ws.logits[o] = kernels::dot(hw + o * m, emb, m) + hb[o];
  raw_softmax(ws.logits, ws.probs);
  return emb;
}

// Accumulates d(mean loss)/d(params) for one sample into `grad`.  Must run
// straight after forward_raw for the same sample (reads the workspace).
void backward_raw(const ModelParams& model, const double* x, const double* emb,
                  int label, double scale, Workspace& ws, double* grad) {
  const ModelConfig& cfg = model.config;
  const ParamLayout lay = ParamLayout::of(cfg);
  const double* hw = model.values.data() + lay.off_head_w;
  double* gbw = grad + lay.off_backbone_w;
  double* gbb = grad + lay.off_backbone_b;
  double* ghw = grad + lay.off_head_w;
  double* ghb = grad + lay.off_head_b;
  const std::size_t m = cfg.embedding_dim();

  // Softmax + cross-entropy collapse to (p - onehot).
  double dlogits[kClasses];
  for (std::size_t o = 0; o < kClasses; ++o)
    dlogits[o] = (ws.probs[o] - (static_cast<int>(o) == label ? 1.0 : 0.0)) * scale;

  for (std::size_t o = 0; o < kClasses; ++o) {
    kernels::axpy(dlogits[o], emb, ghw + o * m, m);
    ghb[o] += dlogits[o];
  }
  if (cfg.backbone == BackboneKind::identity) return;

  ws.demb.assign(m, 0.0);
  for (std::size_t o = 0; o < kClasses; ++o)
    kernels::axpy(dlogits[o], hw + o * m, ws.demb.data(), m);

  if (cfg.backbone == BackboneKind::dense) {
    ws.dpre.resize(m);
    kernels::relu_mask(ws.hidden_pre.data(), ws.demb.data(), ws.dpre.data(), m);
    for (std::size_t k = 0; k < m; ++k) {
      kernels::axpy(ws.dpre[k], x, gbw + k * cfg.input_dim, cfg.input_dim);
      gbb[k] += ws.dpre[k];
    }
    return;
  }

  // conv backbone: pooling spreads each channel's gradient uniformly.
  const std::size_t oh = conv_out_rows(cfg), ow = conv_out_cols(cfg);
  const std::size_t kk = cfg.conv_kernel;
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < cfg.conv_channels; ++c) {
    const double dpool = ws.demb[c] / static_cast<double>(plane);
    const double* pre = ws.conv_pre.data() + c * plane;
    double* gfilt = gbw + c * kk * kk;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        if (pre[i * ow + j] <= 0.0) continue;
        for (std::size_t a = 0; a < kk; ++a)
          kernels::axpy(dpool, x + (i + a) * cfg.grid.cols + j, gfilt + a * kk, kk);
        gbb[c] += dpool;
      }
    }
  }
}

std::vector<const SampleRecord*> resolve(const Dataset& data,
                                         const std::vector<std::uint64_t>& ids,
                                         const ModelConfig& cfg) {
  std::vector<const SampleRecord*> out;
  out.reserve(ids.size());
  for (const std::uint64_t id : ids) {
    const SampleRecord& rec = data.by_id(id);
    if (rec.features.size() != cfg.feature_dim())
      throw std::invalid_argument("classifier: sample " + std::to_string(id) +
                                  " has " + std::to_string(rec.features.size()) +
                                  " features, model expects " +
                                  std::to_string(cfg.feature_dim()));
    out.push_back(&rec);
  }
  return out;
}

double batch_loss_and_grad(const ModelParams& model,
                           const std::vector<const SampleRecord*>& batch,
                           Workspace& ws, std::vector<double>& grad) {
  grad.assign(model.values.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const SampleRecord* rec : batch) {
    const double* emb = forward_raw(model, rec->features.data(), ws);
    loss += raw_cross_entropy(ws.probs, rec->label);
    backward_raw(model, rec->features.data(), emb, rec->label, scale, ws, grad.data());
  }
  return loss * scale;
}

void require_both_classes(const std::vector<const SampleRecord*>& recs, const char* which) {
  bool has[2] = {false, false};
  for (const SampleRecord* r : recs) has[r->label] = true;
  if (!has[0] || !has[1])
    throw std::invalid_argument(std::string("train_two_stage: ") + which +
                                " split must contain both classes");
}

}  // namespace

// ---------------------------------------------------------------------------
// Public building blocks

std::vector<double> gap_pool(const FeatureMap& map) {
  if (map.rows == 0 || map.cols == 0 || map.channels == 0)
    throw std::invalid_argument("gap_pool: empty feature map");
  if (map.values.size() != map.rows * map.cols * map.channels)
    throw std::invalid_argument("gap_pool: value count does not match shape");
  const std::size_t plane = map.rows * map.cols;
  std::vector<double> pooled(map.channels);
  for (std::size_t c = 0; c < map.channels; ++c)
    pooled[c] =
        kernels::sum(map.values.data() + c * plane, plane) / static_cast<double>(plane);
  return pooled;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.size() < 2) throw std::invalid_argument("softmax: need at least 2 logits");
  for (const double l : logits)
    if (!std::isfinite(l)) throw std::invalid_argument("softmax: non-finite logit");
  std::vector<double> probs;
  raw_softmax(logits, probs);
  return probs;
}

double cross_entropy(const std::vector<double>& probs, int label) {
  if (probs.size() < 2)
    throw std::invalid_argument("cross_entropy: need at least 2 probabilities");
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw std::invalid_argument("cross_entropy: label outside [0, " +
                                std::to_string(probs.size()) + ")");
  for (const double p : probs)
    if (!(p >= 0.0 && p <= 1.0 + 1e-12))
      throw std::invalid_argument("cross_entropy: probability outside [0, 1]");
  return raw_cross_entropy(probs, label);
}

std::string_view backbone_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::identity: return "identity";
    case BackboneKind::dense: return "dense";
    case BackboneKind::conv: return "conv";
  }
  return "?";
}

BackboneKind parse_backbone(std::string_view name) {
  if (name == "identity") return BackboneKind::identity;
  if (name == "dense") return BackboneKind::dense;
  if (name == "conv") return BackboneKind::conv;
  throw std::runtime_error("unknown backbone '" + std::string(name) + "'");
}

std::size_t ModelConfig::feature_dim() const {
  return backbone == BackboneKind::conv ? grid.rows * grid.cols : input_dim;
}

std::size_t ModelConfig::embedding_dim() const {
  switch (backbone) {
    case BackboneKind::identity: return input_dim;
    case BackboneKind::dense: return hidden_width;
    case BackboneKind::conv: return conv_channels;
  }
  return 0;
}

void ModelConfig::validate() const {
  switch (backbone) {
    case BackboneKind::identity:
      if (input_dim == 0) throw std::invalid_argument("model: input_dim must be positive");
      break;
    case BackboneKind::dense:
      if (input_dim == 0) throw std::invalid_argument("model: input_dim must be positive");
      if (hidden_width == 0)
        throw std::invalid_argument("model: dense backbone needs hidden_width > 0");
      break;
    case BackboneKind::conv:
      if (grid.rows == 0 || grid.cols == 0)
        throw std::invalid_argument("model: conv backbone needs a grid shape");
      if (conv_channels == 0)
        throw std::invalid_argument("model: conv backbone needs channels > 0");
      if (conv_kernel == 0 || conv_kernel > grid.rows || conv_kernel > grid.cols)
        throw std::invalid_argument("model: conv kernel larger than the grid");
      break;
  }
}

ParamLayout ParamLayout::of(const ModelConfig& config) {
  ParamLayout lay;
  switch (config.backbone) {
    case BackboneKind::identity:
      break;
    case BackboneKind::dense:
      lay.backbone_w = config.hidden_width * config.input_dim;
      lay.backbone_b = config.hidden_width;
      break;
    case BackboneKind::conv:
      lay.backbone_w = config.conv_channels * config.conv_kernel * config.conv_kernel;
      lay.backbone_b = config.conv_channels;
      break;
  }
  lay.head_w = kClasses * config.embedding_dim();
  lay.head_b = kClasses;
  lay.off_backbone_w = 0;
  lay.off_backbone_b = lay.backbone_w;
  lay.off_head_w = lay.off_backbone_b + lay.backbone_b;
  lay.off_head_b = lay.off_head_w + lay.head_w;
  lay.total = lay.off_head_b + lay.head_b;
  return lay;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const ParamLayout lay = ParamLayout::of(config);
  ModelParams p;
  p.config = config;
  p.values.assign(lay.total, 0.0);
  Rng rng(seed);
  double backbone_scale = 0.0;
  if (config.backbone == BackboneKind::dense)
    backbone_scale = std::sqrt(2.0 / static_cast<double>(config.input_dim));
  else if (config.backbone == BackboneKind::conv)
    backbone_scale =
        std::sqrt(2.0 / static_cast<double>(config.conv_kernel * config.conv_kernel));
  for (std::size_t i = 0; i < lay.backbone_w; ++i)
    p.values[lay.off_backbone_w + i] = backbone_scale * rng.normal();
  const double head_scale = std::sqrt(1.0 / static_cast<double>(config.embedding_dim()));
  for (std::size_t i = 0; i < lay.head_w; ++i)
    p.values[lay.off_head_w + i] = head_scale * rng.normal();
  return p;  // biases stay zero
}

ModelConfig model_config_for(const Dataset& data, std::size_t hidden_width,
                             std::size_t conv_channels, std::size_t conv_kernel) {
  ModelConfig cfg;
  if (data.grid) {
    cfg.backbone = BackboneKind::conv;
    cfg.grid = *data.grid;
    cfg.conv_channels = conv_channels;
    cfg.conv_kernel = conv_kernel;
  } else if (hidden_width > 0) {
    cfg.backbone = BackboneKind::dense;
    cfg.input_dim = data.feature_dim;
    cfg.hidden_width = hidden_width;
  } else {
    cfg.backbone = BackboneKind::identity;
    cfg.input_dim = data.feature_dim;
  }
  cfg.validate();
  return cfg;
}

std::vector<double> predict_proba_one(const ModelParams& model,
                                      const std::vector<double>& features) {
  if (features.size() != model.config.feature_dim())
    throw std::invalid_argument("predict: feature count does not match the model");
  Workspace ws;
  forward_raw(model, features.data(), ws);
  for (const double p : ws.probs)
    if (!std::isfinite(p))
      throw std::runtime_error("predict: model produced non-finite probabilities");
  return ws.probs;
}

std::vector<std::vector<double>> predict_proba(const ModelParams& model,
                                               const Dataset& data,
                                               const std::vector<std::uint64_t>& ids) {
  const auto recs = resolve(data, ids, model.config);
  Workspace ws;
  std::vector<std::vector<double>> out;
  out.reserve(recs.size());
  for (const SampleRecord* rec : recs) {
    forward_raw(model, rec->features.data(), ws);
    for (const double p : ws.probs)
      if (!std::isfinite(p))
        throw std::runtime_error("predict: model produced non-finite probabilities");
    out.push_back(ws.probs);
  }
  return out;
}

double abnormal_probability(const ModelParams& model, const std::vector<double>& features) {
  return predict_proba_one(model, features)[1];
}

std::vector<double> penultimate_one(const ModelParams& model,
                                    const std::vector<double>& features) {
  if (features.size() != model.config.feature_dim())
    throw std::invalid_argument("penultimate: feature count does not match the model");
  Workspace ws;
  const double* emb = forward_raw(model, features.data(), ws);
  return std::vector<double>(emb, emb + model.config.embedding_dim());
}

std::vector<std::vector<double>> penultimate_embeddings(
    const ModelParams& model, const Dataset& data,
    const std::vector<std::uint64_t>& ids) {
  const auto recs = resolve(data, ids, model.config);
  Workspace ws;
  std::vector<std::vector<double>> out;
  out.reserve(recs.size());
  for (const SampleRecord* rec : recs) {
    const double* emb = forward_raw(model, rec->features.data(), ws);
    out.emplace_back(emb, emb + model.config.embedding_dim());
  }
  return out;
}

double mean_loss(const ModelParams& model, const Dataset& data,
                 const std::vector<std::uint64_t>& ids) {
  if (ids.empty()) throw std::invalid_argument("mean_loss: empty id list");
  const auto recs = resolve(data, ids, model.config);
  Workspace ws;
  double acc = 0.0;
  for (const SampleRecord* rec : recs) {
    forward_raw(model, rec->features.data(), ws);
    acc += raw_cross_entropy(ws.probs, rec->label);
  }
  return acc / static_cast<double>(recs.size());
}

double loss_and_gradients(const ModelParams& model, const Dataset& data,
                          const std::vector<std::uint64_t>& ids,
                          std::vector<double>& grad) {
  if (ids.empty()) throw std::invalid_argument("loss_and_gradients: empty batch");
  const auto recs = resolve(data, ids, model.config);
  Workspace ws;
  return batch_loss_and_grad(model, recs, ws, grad);
}

// ---------------------------------------------------------------------------
// Two-stage training

TrainResult train_two_stage(const Dataset& data,
                            const std::vector<std::uint64_t>& train_ids,
                            const std::vector<std::uint64_t>& val_ids,
                            const ModelConfig& model_config,
                            const TrainConfig& tc) {
  model_config.validate();
  if (train_ids.empty() || val_ids.empty())
    throw std::invalid_argument("train_two_stage: empty train or validation split");
  if (tc.batch_size == 0) throw std::invalid_argument("train_two_stage: batch_size must be > 0");
  if (!(tc.stage_a_lr > 0.0) || !(tc.stage_b_lr > 0.0))
    throw std::invalid_argument("train_two_stage: learning rates must be positive");

  auto train_recs = resolve(data, train_ids, model_config);
  const auto val_recs = resolve(data, val_ids, model_config);
  require_both_classes(train_recs, "train");
  require_both_classes(val_recs, "validation");

  Workspace ws;
  const auto eval_val = [&](const ModelParams& m) {
    double acc = 0.0;
    for (const SampleRecord* rec : val_recs) {
      forward_raw(m, rec->features.data(), ws);
      acc += raw_cross_entropy(ws.probs, rec->label);
    }
    return acc / static_cast<double>(val_recs.size());
  };

  ModelParams params = init_params(model_config, derive_seed(tc.seed, "init"));
  const ParamLayout lay = ParamLayout::of(model_config);

  TrainResult result;
  const double val0 = eval_val(params);
  if (!std::isfinite(val0))
    throw std::runtime_error("train_two_stage: non-finite validation loss at stage A epoch 0");
  result.best = Checkpoint{params, "A", 0, val0};

  std::vector<double> grad, m_state, v_state;
  const auto run_stage = [&](const char* tag, double lr, std::size_t max_epochs,
                             std::size_t span_off, std::size_t span_n, StageCurve& curve) {
    m_state.assign(span_n, 0.0);
    v_state.assign(span_n, 0.0);
    std::size_t t = 0;
    const double n_train = static_cast<double>(train_recs.size());
    for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
      Rng shuffle_rng(derive_seed(tc.seed, std::string("batch/") + tag + "/" +
                                               std::to_string(epoch)));
      shuffle_rng.shuffle(train_recs);
      double loss_acc = 0.0;
      for (std::size_t start = 0; start < train_recs.size(); start += tc.batch_size) {
        const std::size_t end = std::min(start + tc.batch_size, train_recs.size());
        const std::vector<const SampleRecord*> batch(train_recs.begin() + start,
                                                     train_recs.begin() + end);
        const double batch_loss = batch_loss_and_grad(params, batch, ws, grad);
        loss_acc += batch_loss * static_cast<double>(batch.size());
        ++t;
        const double inv_bc1 = 1.0 / (1.0 - std::pow(tc.adam_beta1, static_cast<double>(t)));
        const double inv_bc2 = 1.0 / (1.0 - std::pow(tc.adam_beta2, static_cast<double>(t)));
        kernels::adam_step(params.values.data() + span_off, m_state.data(), v_state.data(),
                           grad.data() + span_off, span_n, lr, tc.adam_beta1, tc.adam_beta2,
                           tc.adam_epsilon, inv_bc1, inv_bc2);
      }
      const double train_loss = loss_acc / n_train;
      const double val_loss = eval_val(params);
      if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
        throw std::runtime_error(std::string("train_two_stage: diverged at stage ") + tag +
                                 " epoch " + std::to_string(epoch));
      curve.train_loss.push_back(train_loss);
      curve.val_loss.push_back(val_loss);
      if (val_loss < result.best.validation_loss)
        result.best = Checkpoint{params, tag, epoch, val_loss};
    }
  };

  // Stage A: backbone frozen, head only.
  run_stage("A", tc.stage_a_lr, tc.max_epochs_a, lay.off_head_w, lay.head_w + lay.head_b,
            result.curves.stage_a);
  // Stage B: resume from the best snapshot, fresh optimizer, everything trains.
  params = result.best.params;
  run_stage("B", tc.stage_b_lr, tc.max_epochs_b, 0, lay.total, result.curves.stage_b);

  result.final_params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint and loss-curve persistence

namespace {

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["backbone"] = std::string(backbone_name(cfg.backbone));
  j["input_dim"] = cfg.input_dim;
  j["hidden_width"] = cfg.hidden_width;
  j["grid_rows"] = cfg.grid.rows;
  j["grid_cols"] = cfg.grid.cols;
  j["conv_channels"] = cfg.conv_channels;
  j["conv_kernel"] = cfg.conv_kernel;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
  cfg.input_dim = j.at("input_dim").get<std::size_t>();
  cfg.hidden_width = j.at("hidden_width").get<std::size_t>();
  cfg.grid.rows = j.at("grid_rows").get<std::size_t>();
  cfg.grid.cols = j.at("grid_cols").get<std::size_t>();
  cfg.conv_channels = j.at("conv_channels").get<std::size_t>();
  cfg.conv_kernel = j.at("conv_kernel").get<std::size_t>();
  return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& tc) {
  nlohmann::json j;
  j["batch_size"] = tc.batch_size;
  j["stage_a_lr"] = tc.stage_a_lr;
  j["stage_b_lr"] = tc.stage_b_lr;
  j["adam_beta1"] = tc.adam_beta1;
  j["adam_beta2"] = tc.adam_beta2;
  j["adam_epsilon"] = tc.adam_epsilon;
  j["max_epochs_a"] = tc.max_epochs_a;
  j["max_epochs_b"] = tc.max_epochs_b;
  j["seed"] = tc.seed;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig tc;
  tc.batch_size = j.at("batch_size").get<std::size_t>();
  tc.stage_a_lr = j.at("stage_a_lr").get<double>();
  tc.stage_b_lr = j.at("stage_b_lr").get<double>();
  tc.adam_beta1 = j.at("adam_beta1").get<double>();
  tc.adam_beta2 = j.at("adam_beta2").get<double>();
  tc.adam_epsilon = j.at("adam_epsilon").get<double>();
  tc.max_epochs_a = j.at("max_epochs_a").get<std::size_t>();
  tc.max_epochs_b = j.at("max_epochs_b").get<std::size_t>();
  tc.seed = j.at("seed").get<std::uint64_t>();
  return tc;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const TrainConfig& train_config,
                     const std::filesystem::path& path) {
  nlohmann::json j;
  j["model"] = model_config_to_json(ckpt.params.config);
  j["values"] = ckpt.params.values;  // shortest round-trip floats, exact reload
  j["stage"] = ckpt.stage;
  j["epoch"] = ckpt.epoch;
  j["validation_loss"] = ckpt.validation_loss;
  j["train_config"] = train_config_to_json(train_config);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

std::pair<Checkpoint, TrainConfig> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: bad JSON in " + path.string() + ": " +
                             e.what());
  }
  Checkpoint ckpt;
  ckpt.params.config = model_config_from_json(j.at("model"));
  ckpt.params.config.validate();
  ckpt.params.values = j.at("values").get<std::vector<double>>();
  const ParamLayout lay = ParamLayout::of(ckpt.params.config);
  if (ckpt.params.values.size() != lay.total)
    throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path.string());
  ckpt.stage = j.at("stage").get<std::string>();
  ckpt.epoch = j.at("epoch").get<std::size_t>();
  ckpt.validation_loss = j.at("validation_loss").get<double>();
  return {std::move(ckpt), train_config_from_json(j.at("train_config"))};
}

void save_loss_curves_csv(const LossCurves& curves, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_loss_curves_csv: cannot open " + path.string());
  out << "stage,epoch,train_loss,val_loss\n";
  const auto dump = [&](const char* tag, const StageCurve& c) {
    for (std::size_t e = 0; e < c.train_loss.size(); ++e)
      out << tag << "," << (e + 1) << "," << g17(c.train_loss[e]) << ","
          << g17(c.val_loss[e]) << "\n";
  };
  dump("A", curves.stage_a);
  dump("B", curves.stage_b);
  if (!out) throw std::runtime_error("save_loss_curves_csv: write failed for " + path.string());
}

LossCurves load_loss_curves_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_loss_curves_csv: cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "stage,epoch,train_loss,val_loss")
    throw std::runtime_error("load_loss_curves_csv: bad header in " + path.string());
  ++line_no;
  LossCurves curves;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "load_loss_curves_csv: row " + std::to_string(line_no);
    const auto fields = split_fields(line);
    if (fields.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
    StageCurve* curve = nullptr;
    if (fields[0] == "A")
      curve = &curves.stage_a;
    else if (fields[0] == "B")
      curve = &curves.stage_b;
    else
      throw std::runtime_error(where + ": unknown stage '" + fields[0] + "'");
    const std::uint64_t epoch = parse_u64(fields[1], where);
    if (epoch != curve->train_loss.size() + 1)
      throw std::runtime_error(where + ": epochs out of order");
    curve->train_loss.push_back(parse_double(fields[2], where));
    curve->val_loss.push_back(parse_double(fields[3], where));
  }
  return curves;
}

}  // namespace entsel

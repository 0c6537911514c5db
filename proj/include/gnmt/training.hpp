#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gnmt/model.hpp"

namespace gnmt {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// How the hinge penalty is reduced over target positions. Per-token
/// averaging keeps λ on the same scale as the per-token NLL.
enum class PenaltyNormalization { kPerToken, kSum };

std::string to_string(PenaltyNormalization n);
PenaltyNormalization parse_penalty_normalization(const std::string& text);

struct TrainConfig {
  double lambda = 1.0;
  /// 1-based decoder layer indices; empty means every layer.
  std::vector<std::size_t> regularized_layers;
  std::size_t warmup_steps = 4000;
  double lr_scale = 1.0;
  std::size_t max_tokens_per_batch = 4096;
  AdamConfig adam;
  std::size_t max_steps = 100000;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 100;
  std::uint64_t seed = 1;
  double label_smoothing = 0.1;
  PenaltyNormalization penalty_normalization = PenaltyNormalization::kPerToken;

  void validate(const ModelConfig& model) const;
};

/// Parses "ALL" or a comma-separated list of 1-based layer indices.
std::vector<std::size_t> parse_layer_list(const std::string& text);
std::string format_layer_list(const std::vector<std::size_t>& layers);

struct TrainingExample {
  std::vector<int> src;
  std::vector<int> tgt;     // without BOS/EOS
  std::vector<int> labels;  // z* per target token; empty when unsupervised
};

/// Teacher-forcing batch: tgt_in = BOS + y, tgt_out = y + EOS (PAD beyond
/// the end), labels aligned with tgt_out positions with -1 where no label
/// applies (EOS and padding).
struct Batch {
  IdBatch src;
  IdBatch tgt_in;
  std::vector<int> tgt_out;
  std::vector<int> labels;
  std::size_t target_tokens = 0;
};

Batch make_batch(std::span<const TrainingExample* const> examples);
Batch make_batch(const std::vector<TrainingExample>& examples);

/// Shuffles and greedily packs example indices so that each batch's padded
/// size (sentences x longest side) stays within max_tokens.
std::vector<std::vector<std::size_t>> plan_batches(const std::vector<TrainingExample>& examples,
                                                   std::size_t max_tokens, std::mt19937_64& rng);

/// Hinge penalty on the gates: labelled 1 pushes every component to >= 0.5,
/// labelled 0 to <= 0.5. Each (layer, position) contributes the mean over
/// gate components; positions with label -1 and unselected layers contribute
/// nothing. `regularized_layers` is 1-based, empty meaning all.
Tensor gate_penalty(const std::vector<Tensor>& gates, std::span<const int> labels,
                    const std::vector<std::size_t>& regularized_layers,
                    PenaltyNormalization normalization = PenaltyNormalization::kPerToken);

struct LossTerms {
  Tensor total;
  double nll = 0.0;      // unsmoothed mean token NLL
  double penalty = 0.0;  // gate penalty before λ
};

/// Per-token cross entropy (+ λ·penalty for GATED models with λ > 0).
LossTerms compute_loss(const Model& model, const Batch& batch, const TrainConfig& config,
                       const ForwardOptions& options = {});

/// Warm-up then inverse square root decay; `step` is 1-based.
double learning_rate(std::size_t step, std::size_t model_dim, std::size_t warmup_steps, double scale);

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  /// Applies one update from the gradients currently stored on the
  /// parameters; missing gradients count as zero.
  void step(const std::vector<NamedParameter>& params, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct MetricsRow {
  std::size_t step = 0;
  double nll = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
};

/// `step<TAB>nll<TAB>penalty<TAB>lr`
std::string format_metrics_row(const MetricsRow& row);

struct TrainCallbacks {
  std::function<void(const MetricsRow&)> on_log;
  std::function<void(std::size_t step, const Model&)> on_checkpoint;
};

/// Runs Adam over the examples for config.max_steps updates. Logged values
/// are averages over the steps since the previous log line. Deterministic for
/// a given seed.
std::vector<MetricsRow> train(Model& model, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                              const TrainCallbacks& callbacks = {});

}  // namespace gnmt

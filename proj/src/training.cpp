#include "gnmt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "gnmt/error.hpp"

namespace gnmt {

std::string to_string(PenaltyNormalization n) { return n == PenaltyNormalization::kPerToken ? "token" : "sum"; }

PenaltyNormalization parse_penalty_normalization(const std::string& text) {
  if (text == "token") return PenaltyNormalization::kPerToken;
  if (text == "sum") return PenaltyNormalization::kSum;
  throw ConfigError("penalty_normalization must be 'token' or 'sum', got '" + text + "'");
}

void TrainConfig::validate(const ModelConfig& model) const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
  for (std::size_t l : regularized_layers) {
    if (l < 1 || l > model.num_layers) {
      throw ConfigError("regularized layer " + std::to_string(l) + " outside 1.." + std::to_string(model.num_layers));
    }
  }
  if (warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
  if (max_tokens_per_batch == 0) throw ConfigError("max_tokens_per_batch must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
  if (log_every == 0) throw ConfigError("log_every must be positive");
}

std::vector<std::size_t> parse_layer_list(const std::string& text) {
  if (text == "ALL" || text.empty()) return {};
  std::vector<std::size_t> layers;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v == 0) throw ConfigError("bad layer index '" + item + "' in '" + text + "'");
    layers.push_back(v);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::string format_layer_list(const std::vector<std::size_t>& layers) {
  if (layers.empty()) return "ALL";
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(layers[i]);
  }
  return out;
}

Batch make_batch(std::span<const TrainingExample* const> examples) {
  if (examples.empty()) throw DimensionError("empty batch");
  std::vector<std::vector<int>> src, tgt_in;
  Batch batch;
  std::size_t tgt_len = 0;
  for (const auto* ex : examples) {
    if (!ex->labels.empty() && ex->labels.size() != ex->tgt.size()) {
      throw AlignmentError("example has " + std::to_string(ex->labels.size()) + " labels for " +
                           std::to_string(ex->tgt.size()) + " target tokens");
    }
    src.push_back(ex->src);
    std::vector<int> in{kBosId};
    in.insert(in.end(), ex->tgt.begin(), ex->tgt.end());
    tgt_len = std::max(tgt_len, in.size());
    tgt_in.push_back(std::move(in));
  }
  batch.src = IdBatch::from_sequences(src);
  batch.tgt_in = IdBatch::from_sequences(tgt_in);
  batch.tgt_out.assign(examples.size() * tgt_len, kPadId);
  batch.labels.assign(examples.size() * tgt_len, -1);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto& ex = *examples[b];
    for (std::size_t t = 0; t < ex.tgt.size(); ++t) {
      batch.tgt_out[b * tgt_len + t] = ex.tgt[t];
      if (!ex.labels.empty()) batch.labels[b * tgt_len + t] = ex.labels[t];
    }
    batch.tgt_out[b * tgt_len + ex.tgt.size()] = kEosId;
    batch.target_tokens += ex.tgt.size() + 1;
  }
  return batch;
}

Batch make_batch(const std::vector<TrainingExample>& examples) {
  std::vector<const TrainingExample*> ptrs;
  for (const auto& ex : examples) ptrs.push_back(&ex);
  return make_batch(std::span<const TrainingExample* const>(ptrs));
}

std::vector<std::vector<std::size_t>> plan_batches(const std::vector<TrainingExample>& examples,
                                                   std::size_t max_tokens, std::mt19937_64& rng) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (std::size_t idx : order) {
    const std::size_t len = std::max(examples[idx].src.size(), examples[idx].tgt.size() + 1);
    const std::size_t new_longest = std::max(longest, len);
    if (!current.empty() && (current.size() + 1) * new_longest > max_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      longest = 0;
    }
    current.push_back(idx);
    longest = std::max(longest, len);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

Tensor gate_penalty(const std::vector<Tensor>& gates, std::span<const int> labels,
                    const std::vector<std::size_t>& regularized_layers, PenaltyNormalization normalization) {
  std::size_t labelled = 0;
  for (int l : labels) {
    if (l == 1 || l == 0) {
      ++labelled;
    } else if (l != -1) {
      throw AlignmentError("gate label must be 0, 1 or -1, got " + std::to_string(l));
    }
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t layer = 0; layer < gates.size(); ++layer) {
    const bool selected = regularized_layers.empty() ||
                          std::find(regularized_layers.begin(), regularized_layers.end(), layer + 1) !=
                              regularized_layers.end();
    if (!selected) continue;
    const Tensor& z = gates[layer];
    const std::size_t d = z.shape().back();
    const std::size_t positions = z.numel() / d;
    if (positions != labels.size()) {
      throw AlignmentError("layer " + std::to_string(layer + 1) + " has " + std::to_string(positions) +
                           " gate positions but " + std::to_string(labels.size()) + " labels were given");
    }
    std::vector<double> toward_source(z.numel(), 0.0), toward_target(z.numel(), 0.0);
    const double w = 1.0 / static_cast<double>(d);
    for (std::size_t p = 0; p < positions; ++p) {
      auto& dst = labels[p] == 1 ? toward_source : toward_target;
      if (labels[p] < 0) continue;
      std::fill_n(dst.begin() + p * d, d, w);
    }
    // z* max(0.5 - z, 0) + (1 - z*) max(z - 0.5, 0)
    Tensor below = relu(add_scalar(scale(z, -1.0), 0.5));
    Tensor above = relu(add_scalar(z, -0.5));
    Tensor hinge = add(mul(Tensor::from_data(z.shape(), std::move(toward_source)), below),
                       mul(Tensor::from_data(z.shape(), std::move(toward_target)), above));
    total = add(total, sum(hinge));
  }
  if (normalization == PenaltyNormalization::kPerToken && labelled > 0) {
    total = scale(total, 1.0 / static_cast<double>(labelled));
  }
  return total;
}

namespace {

double mean_token_nll(const Tensor& logits, std::span<const int> targets) {
  const std::size_t vocab = logits.shape().back();
  const auto ld = logits.data();
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == kPadId) continue;
    const double* row = ld.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[targets[r]];
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

LossTerms compute_loss(const Model& model, const Batch& batch, const TrainConfig& config,
                       const ForwardOptions& options) {
  ForwardOutput out = model.forward(batch.src, batch.tgt_in, options);
  const std::size_t vocab = model.config().tgt_vocab_size;
  Tensor flat = reshape(out.logits, {batch.tgt_out.size(), vocab});
  CrossEntropyOptions ce;
  ce.label_smoothing = config.label_smoothing;
  ce.reduction = Reduction::kMean;
  ce.ignore_index = kPadId;

  LossTerms terms;
  terms.total = cross_entropy(flat, batch.tgt_out, ce);
  terms.nll = config.label_smoothing == 0.0 ? terms.total.item() : mean_token_nll(flat, batch.tgt_out);
  if (model.config().gate_mode == GateMode::kGated && config.lambda > 0.0) {
    Tensor penalty = gate_penalty(out.gates, batch.labels, config.regularized_layers, config.penalty_normalization);
    terms.penalty = penalty.item();
    terms.total = add(terms.total, scale(penalty, config.lambda));
  }
  return terms;
}

double learning_rate(std::size_t step, std::size_t model_dim, std::size_t warmup_steps, double scale) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(warmup_steps);
  return scale / std::sqrt(static_cast<double>(model_dim)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

void Adam::step(const std::vector<NamedParameter>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter set changed between steps");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].value;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu\t%.8f\t%.8f\t%.8e", row.step, row.nll, row.penalty, row.lr);
  return buf;
}

std::vector<MetricsRow> train(Model& model, const std::vector<TrainingExample>& examples, const TrainConfig& config,
                              const TrainCallbacks& callbacks) {
  config.validate(model.config());
  if (examples.empty()) throw ConfigError("training corpus is empty");
  const bool regularize = model.config().gate_mode == GateMode::kGated && config.lambda > 0.0;
  if (regularize) {
    for (const auto& ex : examples) {
      if (ex.labels.size() != ex.tgt.size()) {
        throw ConfigError("lambda > 0 requires supervision labels for every training sentence");
      }
    }
  }

  std::mt19937_64 batch_rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x5deece66dULL);
  ForwardOptions options;
  options.train = true;
  options.rng = &dropout_rng;

  Adam adam(config.adam);
  std::vector<MetricsRow> rows;
  double nll_acc = 0.0, penalty_acc = 0.0;
  std::size_t window = 0;
  std::size_t step = 0;
  std::size_t last_checkpoint = 0;

  while (step < config.max_steps) {
    for (const auto& plan : plan_batches(examples, config.max_tokens_per_batch, batch_rng)) {
      if (step >= config.max_steps) break;
      std::vector<const TrainingExample*> members;
      for (std::size_t idx : plan) members.push_back(&examples[idx]);
      Batch batch = make_batch(std::span<const TrainingExample* const>(members));

      ++step;
      model.zero_grad();
      LossTerms loss = compute_loss(model, batch, config, options);
      loss.total.backward();
      const double lr = learning_rate(step, model.config().model_dim, config.warmup_steps, config.lr_scale);
      adam.step(model.parameters(), lr);

      nll_acc += loss.nll;
      penalty_acc += loss.penalty;
      ++window;
      if (step % config.log_every == 0 || step == config.max_steps) {
        MetricsRow row{step, nll_acc / static_cast<double>(window), penalty_acc / static_cast<double>(window), lr};
        rows.push_back(row);
        if (callbacks.on_log) callbacks.on_log(row);
        nll_acc = penalty_acc = 0.0;
        window = 0;
      }
      if (callbacks.on_checkpoint && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
        callbacks.on_checkpoint(step, model);
        last_checkpoint = step;
      }
    }
  }
  model.zero_grad();
  if (callbacks.on_checkpoint && last_checkpoint != step) callbacks.on_checkpoint(step, model);
  return rows;
}

}  // namespace gnmt

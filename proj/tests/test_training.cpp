#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "gnmt/error.hpp"
#include "gnmt/training.hpp"

using namespace gnmt;

namespace {

Tensor uniform_gate(std::size_t positions, std::size_t d, double value, bool requires_grad = false) {
  return Tensor::full({1, positions, d}, value, requires_grad);
}

double penalty_of(double gate, int label) {
  const std::vector<int> labels = {label};
  return gate_penalty({uniform_gate(1, 4, gate)}, labels, {}).item();
}

ModelConfig tiny_config(GateMode mode = GateMode::kGated, std::size_t layers = 3) {
  ModelConfig cfg;
  cfg.src_vocab_size = 9;
  cfg.tgt_vocab_size = 9;
  cfg.num_layers = layers;
  cfg.num_heads = 2;
  cfg.model_dim = 8;
  cfg.ff_dim = 8;
  cfg.dropout = 0.0;
  cfg.gate_mode = mode;
  return cfg;
}

std::vector<TrainingExample> tiny_examples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> word(4, 8), len(1, 5), label(0, 1);
  std::vector<TrainingExample> out(n);
  for (auto& ex : out) {
    for (int i = len(rng); i > 0; --i) ex.src.push_back(word(rng));
    for (int i = len(rng); i > 0; --i) {
      ex.tgt.push_back(word(rng));
      ex.labels.push_back(label(rng));
    }
  }
  return out;
}

TrainConfig quick_train_config() {
  TrainConfig tc;
  tc.max_steps = 12;
  tc.warmup_steps = 4;
  tc.log_every = 3;
  tc.checkpoint_every = 5;
  tc.max_tokens_per_batch = 40;
  tc.seed = 5;
  return tc;
}

}  // namespace

TEST(GatePenalty, HingeExamples) {
  EXPECT_EQ(penalty_of(0.7, 1), 0.0);
  EXPECT_NEAR(penalty_of(0.3, 1), 0.2, 1e-15);
  EXPECT_EQ(penalty_of(0.5, 1), 0.0);
  EXPECT_EQ(penalty_of(0.5, 0), 0.0);
  EXPECT_NEAR(penalty_of(0.7, 0), 0.2, 1e-15);
  EXPECT_EQ(penalty_of(0.3, 0), 0.0);
}

TEST(GatePenalty, IgnoresUnlabelledPositions) {
  const std::vector<int> labels = {1, -1};
  const Tensor z = Tensor::from_data({1, 2, 1}, {0.2, 0.0});
  EXPECT_NEAR(gate_penalty({z}, labels, {}).item(), 0.3, 1e-15);
  EXPECT_NEAR(gate_penalty({z}, labels, {}, PenaltyNormalization::kSum).item(), 0.3, 1e-15);
}

TEST(GatePenalty, ZeroExactlyWhenAllComponentsSatisfied) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t positions = 3, d = 4;
    std::vector<int> labels(positions);
    std::vector<double> z(positions * d);
    bool all_satisfied = true;
    for (std::size_t p = 0; p < positions; ++p) {
      labels[p] = coin(rng);
      for (std::size_t k = 0; k < d; ++k) {
        double v = u(rng);
        if (trial % 2 == 0) v = labels[p] ? 0.5 + 0.5 * v : 0.5 * v;  // force satisfaction on even trials
        z[p * d + k] = v;
        all_satisfied = all_satisfied && (labels[p] ? v >= 0.5 : v <= 0.5);
      }
    }
    const double penalty = gate_penalty({Tensor::from_data({1, positions, d}, z)}, labels, {}).item();
    EXPECT_EQ(penalty == 0.0, all_satisfied) << "trial " << trial;
  }
}

TEST(GatePenalty, ExcludedLayersGetZeroGradient) {
  const std::vector<int> labels = {1, 0};
  std::vector<Tensor> gates;
  for (int l = 0; l < 3; ++l) gates.push_back(Tensor::from_data({1, 2, 2}, {0.1, 0.2, 0.8, 0.9}, true));
  const std::vector<std::size_t> layers = {1, 3};
  gate_penalty(gates, labels, layers).backward();
  auto nonzero = [](const Tensor& t) {
    if (!t.has_grad()) return false;
    return std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; });
  };
  EXPECT_TRUE(nonzero(gates[0]));
  EXPECT_FALSE(nonzero(gates[1]));
  EXPECT_TRUE(nonzero(gates[2]));
}

TEST(GatePenalty, LayerSelectionThroughModelParameters) {
  // A layer's gate weights also shape every later layer's input, so only
  // layers above the highest regularized one are guaranteed no gradient.
  Model model(tiny_config(), 4);
  const Batch batch = make_batch(tiny_examples(4, 4));
  const std::vector<std::vector<std::size_t>> selections = {{1}, {1, 2}, {2}};
  for (const auto& layers : selections) {
    const ForwardOutput out = model.forward(batch.src, batch.tgt_in);
    model.zero_grad();
    gate_penalty(out.gates, batch.labels, layers).backward();
    const std::size_t top = *std::max_element(layers.begin(), layers.end());
    for (std::size_t l = 0; l < 3; ++l) {
      const Tensor w = model.decoder_layer_params(l).gate_w;
      double norm = 0.0;
      if (w.has_grad()) {
        for (double g : w.grad()) norm += g * g;
      }
      const bool selected = std::find(layers.begin(), layers.end(), l + 1) != layers.end();
      if (l + 1 > top) {
        EXPECT_EQ(norm, 0.0) << "layer " << l + 1;
      } else if (selected) {
        EXPECT_GT(norm, 0.0) << "layer " << l + 1;
      }
    }
  }
}

TEST(Loss, LinearInLambda) {
  Model model(tiny_config(), 5);
  const Batch batch = make_batch(tiny_examples(6, 5));
  TrainConfig tc;
  tc.lambda = 0.0;
  const LossTerms base = compute_loss(model, batch, tc);
  tc.lambda = 1.0;
  const LossTerms one = compute_loss(model, batch, tc);
  ASSERT_GT(one.penalty, 0.0);
  for (double lambda : {0.5, 2.0, 7.25}) {
    tc.lambda = lambda;
    const LossTerms t = compute_loss(model, batch, tc);
    EXPECT_NEAR(t.total.item(), base.total.item() + lambda * one.penalty, 1e-12 * (1.0 + lambda));
    EXPECT_EQ(t.penalty, one.penalty);
  }
}

TEST(Loss, BaselineOmitsPenalty) {
  Model model(tiny_config(GateMode::kBaseline), 6);
  const Batch batch = make_batch(tiny_examples(3, 6));
  TrainConfig tc;
  tc.lambda = 3.0;
  const LossTerms t = compute_loss(model, batch, tc);
  EXPECT_EQ(t.penalty, 0.0);
  tc.lambda = 0.0;
  EXPECT_EQ(compute_loss(model, batch, tc).total.item(), t.total.item());
}

TEST(Loss, NllMatchesHandComputation) {
  Model model(tiny_config(), 7);
  const Batch batch = make_batch(tiny_examples(3, 7));
  TrainConfig tc;
  tc.lambda = 0.0;
  const LossTerms t = compute_loss(model, batch, tc);
  const Tensor logits = model.forward(batch.src, batch.tgt_in).logits;
  const std::size_t V = 9;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < batch.tgt_out.size(); ++i) {
    if (batch.tgt_out[i] == kPadId) continue;
    double mx = -1e300;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits.at(i * V + v));
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(logits.at(i * V + v) - mx);
    total += -(logits.at(i * V + static_cast<std::size_t>(batch.tgt_out[i])) - mx - std::log(z));
    ++count;
  }
  EXPECT_NEAR(t.nll, total / static_cast<double>(count), 1e-12);
  EXPECT_EQ(count, batch.target_tokens);
}

TEST(Batching, TeacherForcingLayout) {
  std::vector<TrainingExample> ex(2);
  ex[0] = {{4, 5}, {6, 7, 8}, {1, 0, 1}};
  ex[1] = {{4}, {6}, {0}};
  const Batch b = make_batch(ex);
  EXPECT_EQ(b.tgt_in.ids, (std::vector<int>{1, 6, 7, 8, 1, 6, 0, 0}));
  EXPECT_EQ(b.tgt_out, (std::vector<int>{6, 7, 8, 2, 6, 2, 0, 0}));
  EXPECT_EQ(b.labels, (std::vector<int>{1, 0, 1, -1, 0, -1, -1, -1}));
  EXPECT_EQ(b.target_tokens, 6u);
}

TEST(Batching, PlanCoversEveryExampleOnce) {
  const auto examples = tiny_examples(50, 8);
  std::mt19937_64 rng(8);
  const auto plan = plan_batches(examples, 24, rng);
  std::multiset<std::size_t> seen;
  for (const auto& batch : plan) {
    std::size_t longest = 0;
    for (std::size_t i : batch) {
      seen.insert(i);
      longest = std::max({longest, examples[i].src.size(), examples[i].tgt.size() + 1});
    }
    if (batch.size() > 1) {
      EXPECT_LE(batch.size() * longest, 24u);
    }
  }
  EXPECT_EQ(seen.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Schedule, WarmupThenInverseSqrt) {
  const double peak = learning_rate(100, 64, 100, 1.0);
  EXPECT_NEAR(peak, 1.0 / 8.0 / 10.0, 1e-15);
  EXPECT_NEAR(learning_rate(50, 64, 100, 1.0), peak / 2.0, 1e-15);
  EXPECT_NEAR(learning_rate(400, 64, 100, 1.0), peak / 2.0, 1e-15);
  EXPECT_NEAR(learning_rate(400, 64, 100, 3.0), 3.0 * peak / 2.0, 1e-15);
}

TEST(Optimiser, FirstAdamStepIsSignTimesLr) {
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  Tensor loss = sum(mul(p, Tensor::from_data({3}, {3.0, -0.25, 0.0})));
  loss.backward();
  Adam adam(AdamConfig{});
  adam.step({{"p", p}}, 0.1);
  EXPECT_NEAR(p.at(0), 1.0 - 0.1 * 3.0 / (3.0 + 1e-9), 1e-15);
  EXPECT_NEAR(p.at(1), -2.0 + 0.1 * 0.25 / (0.25 + 1e-9), 1e-15);
  EXPECT_EQ(p.at(2), 0.5);
  EXPECT_EQ(adam.steps_taken(), 1u);
}

TEST(Config, LayerLists) {
  EXPECT_TRUE(parse_layer_list("ALL").empty());
  EXPECT_EQ(parse_layer_list("3,1"), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(format_layer_list({1, 3}), "1,3");
  EXPECT_EQ(format_layer_list({}), "ALL");
  EXPECT_THROW(parse_layer_list("0"), ConfigError);
  EXPECT_THROW(parse_layer_list("1,x"), ConfigError);
  TrainConfig tc;
  tc.regularized_layers = {4};
  EXPECT_THROW(tc.validate(tiny_config()), ConfigError);
}

TEST(Train, MissingSupervisionWithPositiveLambda) {
  Model model(tiny_config(), 9);
  auto examples = tiny_examples(5, 9);
  for (auto& e : examples) e.labels.clear();
  TrainConfig tc = quick_train_config();
  tc.lambda = 1.0;
  EXPECT_THROW(train(model, examples, tc), ConfigError);
  tc.lambda = 0.0;
  EXPECT_NO_THROW(train(model, examples, tc));
}

TEST(Train, DeterministicForFixedSeed) {
  const auto examples = tiny_examples(30, 10);
  TrainConfig tc = quick_train_config();
  auto run = [&] {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.1;
    Model model(cfg, 10);
    std::vector<std::size_t> checkpoints;
    TrainCallbacks cb;
    cb.on_checkpoint = [&](std::size_t step, const Model&) { checkpoints.push_back(step); };
    auto rows = train(model, examples, tc, cb);
    return std::make_pair(rows, checkpoints);
  };
  const auto [a, ca] = run();
  const auto [b, cb] = run();
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(format_metrics_row(a[i]), format_metrics_row(b[i]));
  EXPECT_EQ(ca, (std::vector<std::size_t>{5, 10, 12}));
  EXPECT_EQ(ca, cb);
}

TEST(Train, LossDecreasesOnRepeatedData) {
  const auto examples = tiny_examples(8, 11);
  TrainConfig tc = quick_train_config();
  tc.max_steps = 60;
  tc.log_every = 20;
  tc.lr_scale = 2.0;
  tc.max_tokens_per_batch = 200;
  tc.label_smoothing = 0.0;
  Model model(tiny_config(), 11);
  const auto rows = train(model, examples, tc);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LT(rows.back().nll, rows.front().nll);
}

TEST(Metrics, RowFormat) {
  EXPECT_EQ(format_metrics_row({12, 1.5, 0.25, 0.001}), "12\t1.50000000\t0.25000000\t1.00000000e-03");
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gnmt/error.hpp"
#include "gnmt/model.hpp"
#include "gnmt/ops.hpp"
#include "gnmt/tensor.hpp"
#include "gradcheck.hpp"

using namespace gnmt;
using gnmt::testing::max_gradient_error;
using gnmt::testing::random_tensor;

namespace {

constexpr double kOpTolerance = 1e-4;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

void expect_gradients(const Fn& f, const std::vector<Shape>& shapes, double input_scale = 1.0,
                      double shift = 0.0) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed * 7919);
    std::vector<Tensor> inputs;
    for (const auto& s : shapes) {
      Tensor t = random_tensor(s, rng, input_scale);
      for (auto& v : t.mutable_data()) v += shift;
      inputs.push_back(t);
    }
    EXPECT_LT(max_gradient_error(f, inputs, seed), kOpTolerance) << "seed " << seed;
  }
}

AttentionMask random_mask(std::size_t batch, std::size_t q, std::size_t k, std::mt19937_64& rng) {
  AttentionMask m{batch, q, k, std::vector<std::uint8_t>(batch * q * k)};
  std::bernoulli_distribution keep(0.7);
  for (auto& a : m.allowed) a = keep(rng);
  // one fully masked row exercises the all-zero path
  for (std::size_t j = 0; j < k; ++j) m.allowed[j] = 0;
  return m;
}

}  // namespace

TEST(Gradients, Elementwise) {
  expect_gradients([](const auto& x) { return add(x[0], x[1]); }, {{3, 4}, {3, 4}});
  expect_gradients([](const auto& x) { return sub(x[0], x[1]); }, {{3, 4}, {3, 4}});
  expect_gradients([](const auto& x) { return mul(x[0], x[1]); }, {{2, 3, 4}, {2, 3, 4}});
  expect_gradients([](const auto& x) { return add_bias(x[0], x[1]); }, {{2, 3, 4}, {4}});
  expect_gradients([](const auto& x) { return scale(x[0], -2.5); }, {{5}});
  expect_gradients([](const auto& x) { return add_scalar(x[0], 0.75); }, {{5}});
  expect_gradients([](const auto& x) { return sigmoid(x[0]); }, {{4, 6}}, 3.0);
}

TEST(Gradients, ReluAwayFromKink) {
  // inputs in a band that excludes the kink at zero
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mag(0.1, 2.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(24);
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    EXPECT_LT(max_gradient_error([](const auto& x) { return relu(x[0]); }, {Tensor::from_data({4, 6}, v)}, seed),
              kOpTolerance);
  }
}

TEST(Gradients, DropoutWithFixedMask) {
  expect_gradients(
      [](const auto& x) {
        std::mt19937_64 rng(99);
        return dropout(x[0], 0.3, rng);
      },
      {{6, 5}});
}

TEST(Gradients, Products) {
  expect_gradients([](const auto& x) { return matmul(x[0], x[1]); }, {{3, 4}, {4, 5}});
  expect_gradients([](const auto& x) { return linear(x[0], x[1], x[2]); }, {{2, 3, 4}, {4, 5}, {5}});
  expect_gradients([](const auto& x) { return linear(x[0], x[1], Tensor()); }, {{3, 4}, {4, 2}});
  expect_gradients([](const auto& x) { return bmm(x[0], x[1]); }, {{2, 3, 4}, {2, 4, 5}});
  expect_gradients([](const auto& x) { return bmm(x[0], x[1], true); }, {{2, 3, 4}, {2, 5, 4}});
}

TEST(Gradients, Softmaxes) {
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_gradients([axis](const auto& x) { return softmax(x[0], axis); }, {{2, 3, 4}}, 2.0);
  }
  std::mt19937_64 rng(5);
  const AttentionMask mask = random_mask(2, 3, 4, rng);
  expect_gradients([&mask](const auto& x) { return masked_softmax(x[0], mask); }, {{2, 3, 4}}, 2.0);
}

TEST(Gradients, LayerNorm) {
  expect_gradients([](const auto& x) { return layer_norm(x[0], x[1], x[2]); }, {{3, 2, 6}, {6}, {6}});
}

TEST(Gradients, ShapeOps) {
  expect_gradients([](const auto& x) { return concat_last_axis(x[0], x[1]); }, {{2, 3, 2}, {2, 3, 4}});
  expect_gradients([](const auto& x) { return reshape(x[0], {6, 2}); }, {{3, 4}});
  expect_gradients([](const auto& x) { return sum(x[0]); }, {{3, 4}});
  expect_gradients([](const auto& x) { return mean(x[0]); }, {{3, 4}});
  expect_gradients([](const auto& x) { return split_heads(x[0], 2, 3, 2); }, {{6, 4}});
  expect_gradients([](const auto& x) { return merge_heads(x[0], 2, 3, 2); }, {{4, 3, 2}});
}

TEST(Gradients, EmbeddingLookup) {
  const std::vector<int> ids = {3, 0, 3, 1};
  expect_gradients([&ids](const auto& x) { return embedding_lookup(x[0], ids); }, {{5, 3}});
}

TEST(Gradients, CrossEntropyVariants) {
  const std::vector<int> targets = {0, 4, 2, 2};
  const std::vector<int> with_ignored = {0, 4, -1, 2};
  for (double smoothing : {0.0, 0.1}) {
    for (Reduction r : {Reduction::kMean, Reduction::kSum}) {
      CrossEntropyOptions opts{smoothing, r, -1};
      expect_gradients([&](const auto& x) { return cross_entropy(x[0], targets, opts); }, {{4, 5}}, 2.0);
      expect_gradients([&](const auto& x) { return cross_entropy(x[0], with_ignored, opts); }, {{4, 5}}, 2.0);
    }
  }
}

TEST(Gradients, GatedDecoderLayerEndToEnd) {
  for (std::uint64_t seed : kSeeds) {
    ModelConfig cfg;
    cfg.src_vocab_size = 7;
    cfg.tgt_vocab_size = 7;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.model_dim = 4;
    cfg.ff_dim = 6;
    cfg.dropout = 0.0;
    Model model(cfg, seed);
    std::mt19937_64 rng(seed);
    const IdBatch src = IdBatch::from_sequences({{4, 5, 6}, {5, 4}});
    const IdBatch tgt = IdBatch::from_sequences({{1, 4, 5}, {1, 6}});
    const AttentionMask self_mask = causal_mask(tgt);
    const AttentionMask cross_mask = key_padding_mask(src, tgt.len);

    std::vector<Tensor> inputs = {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)};
    for (const auto& p : model.parameters()) {
      if (p.name.rfind("decoder.0.", 0) == 0) inputs.push_back(p.value);
    }
    auto f = [&](const std::vector<Tensor>& x) {
      return model.decoder_layer(0, x[0], x[1], self_mask, cross_mask).c;
    };
    EXPECT_LT(max_gradient_error(f, inputs, seed), kOpTolerance) << "seed " << seed;
  }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::from_data({2}, {1.5, -2.0}, true);
  Tensor y = sum(add(mul(x, x), x));  // d/dx = 2x + 1
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
}

TEST(Autodiff, SecondBackwardThrows) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = sum(mul(x, x));
  y.backward();
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = sum(mul(x, x));
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(Autodiff, BackwardRequiresScalar) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  EXPECT_THROW(mul(x, x).backward(), ContractError);
}

TEST(Ops, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Ops, LookupOutOfRangeIsBoundsError) {
  const std::vector<int> bad = {5};
  EXPECT_THROW(embedding_lookup(Tensor::zeros({5, 2}), bad), BoundsError);
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 5}), bad), BoundsError);
}

TEST(Ops, MaskedSoftmaxZeroesDisallowedKeys) {
  std::mt19937_64 rng(3);
  const AttentionMask mask = random_mask(2, 3, 4, rng);
  const Tensor p = masked_softmax(random_tensor({2, 3, 4}, rng, 3.0), mask);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t q = 0; q < 3; ++q) {
      double row = 0.0;
      bool any = false;
      for (std::size_t k = 0; k < 4; ++k) {
        const double v = p.at((b * 3 + q) * 4 + k);
        if (!mask.at(b, q, k)) {
          EXPECT_EQ(v, 0.0);
        }
        any = any || mask.at(b, q, k);
        row += v;
      }
      EXPECT_NEAR(row, any ? 1.0 : 0.0, 1e-12);
    }
  }
}

TEST(Ops, CrossEntropyVanishesWithMargin) {
  const std::vector<int> target = {2};
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    const double loss = cross_entropy(Tensor::from_data({1, 3}, {0.0, 0.0, margin}), target).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-20);
}

TEST(Ops, CrossEntropyIgnoreIndexExcludedFromMean) {
  const Tensor logits = Tensor::from_data({2, 2}, {0.0, 1.0, 3.0, -1.0});
  const std::vector<int> both = {1, 0};
  const std::vector<int> first_only = {1, 0};
  CrossEntropyOptions ignore_zero;
  ignore_zero.ignore_index = 0;
  const double lone = cross_entropy(Tensor::from_data({1, 2}, {0.0, 1.0}), std::vector<int>{1}).item();
  EXPECT_NEAR(cross_entropy(logits, first_only, ignore_zero).item(), lone, 1e-15);
  EXPECT_GT(cross_entropy(logits, both).item(), 0.0);
}

TEST(Ops, LayerNormOutputIsStandardised) {
  std::mt19937_64 rng(11);
  const Tensor y = layer_norm(random_tensor({3, 8}, rng, 4.0), Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(r * 8 + j);
    m /= 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.at(r * 8 + j) - m) * (y.at(r * 8 + j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-4);
  }
}

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gnmt/tensor.hpp"

namespace gnmt {

inline constexpr double kLayerNormEps = 1e-6;

// Elementwise ops on equally shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// Adds a [n] bias along the last axis of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., k] * w[k, n] + b[n]; the leading axes of x are kept. `b` may be
/// undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Batched product over the leading axis: [g,m,k] x [g,k,n] -> [g,m,n], or
/// with transpose_b, [g,m,k] x [g,n,k] -> [g,m,n].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, std::size_t axis);

/// Which (query, key) pairs may attend, per batch entry: allowed[b][q][k].
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t b, std::size_t q, std::size_t k) const {
    return allowed[(b * query_len + q) * key_len + k] != 0;
  }
};

/// Softmax over the last axis of x[batch*heads, q, k], with disallowed keys
/// given exactly zero weight. A row with no allowed key yields zeros.
Tensor masked_softmax(const Tensor& x, const AttentionMask& mask);

/// Normalises the last axis to zero mean and unit variance, then applies
/// gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

Tensor concat_last_axis(const Tensor& a, const Tensor& b);

/// Rows of table[V, d] selected by ids -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

enum class Reduction { kMean, kSum };

struct CrossEntropyOptions {
  double label_smoothing = 0.0;
  Reduction reduction = Reduction::kMean;
  /// Targets equal to this id contribute nothing (and are not counted).
  int ignore_index = -1;
};

/// Token-level cross entropy of logits[n, V] against target ids, computed
/// through a log-softmax.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, const CrossEntropyOptions& options = {});

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

/// [batch*len, heads*dh] -> [batch*heads, len, dh].
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads);
/// [batch*heads, len, dh] -> [batch, len, heads*dh].
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads);

}  // namespace gnmt

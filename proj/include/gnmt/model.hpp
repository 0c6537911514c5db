#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gnmt/ops.hpp"
#include "gnmt/tensor.hpp"

namespace gnmt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

enum class GateMode { kGated, kBaseline };

std::string to_string(GateMode mode);
GateMode parse_gate_mode(const std::string& text);

struct ModelConfig {
  std::size_t src_vocab_size = 0;
  std::size_t tgt_vocab_size = 0;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t model_dim = 256;
  std::size_t ff_dim = 1024;
  std::size_t max_len = 256;
  GateMode gate_mode = GateMode::kGated;
  double dropout = 0.1;

  /// Throws ConfigError when the combination is unusable.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// A padded batch of id sequences, row-major [batch, len].
struct IdBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;  // 1 for real tokens, 0 for padding

  static IdBatch from_sequences(const std::vector<std::vector<int>>& seqs);
  int at(std::size_t b, std::size_t t) const { return ids[b * len + t]; }
  bool valid(std::size_t b, std::size_t t) const { return mask[b * len + t] != 0; }
};

AttentionMask key_padding_mask(const IdBatch& keys, std::size_t query_len);
AttentionMask causal_mask(const IdBatch& tgt);

struct ForwardOptions {
  /// Enables dropout; requires `rng`.
  bool train = false;
  std::mt19937_64* rng = nullptr;
  /// Replaces the gated combination (1-z)*t + z*s by t + s while still
  /// computing the gates. Only meaningful for GATED models.
  bool force_sum_combination = false;
};

/// Intermediate contexts of one decoder layer, each [batch, tgt_len, d].
struct DecoderLayerState {
  Tensor t;  // target context
  Tensor s;  // source context
  Tensor z;  // gate, undefined in BASELINE mode
  Tensor c;  // layer output
};

struct ForwardOutput {
  Tensor logits;               // [batch, tgt_len, tgt_vocab]
  std::vector<Tensor> gates;   // one [batch, tgt_len, d] per layer (GATED only)
  Tensor encoder_top;          // [batch, src_len, d]
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Transformer encoder with a context-gated decoder.
class Model {
 public:
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    Tensor gain, bias;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Attention self_attn;
    Norm norm_attn;
    FeedForward ffn;
    Norm norm_ffn;
  };
  struct DecoderLayer {
    Attention self_attn;
    Norm norm_target;
    Attention cross_attn;
    Norm norm_source;
    Tensor gate_w, gate_b;  // [2d, d], [d]; GATED only
    FeedForward ffn;
    Norm norm_out;
  };

  /// Builds a model with Xavier-uniform matrices and zero biases.
  Model(const ModelConfig& config, std::uint64_t seed);

  // Copies would silently share parameter storage; use clone().
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Deep copy with independent parameter storage.
  Model clone() const;

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  Tensor parameter(const std::string& name) const;
  const DecoderLayer& decoder_layer_params(std::size_t layer) const { return decoder_.at(layer); }

  std::size_t parameter_count() const;
  void zero_grad();

  /// Copies every parameter value that also exists (same name and shape) in
  /// `other`. Returns the number of tensors copied.
  std::size_t copy_parameters_from(const Model& other);

  Tensor encode(const IdBatch& src, const ForwardOptions& options = {}) const;

  /// One decoder layer (0-based index) over c_prev [batch, tgt_len, d].
  DecoderLayerState decoder_layer(std::size_t layer, const Tensor& c_prev, const Tensor& encoder_top,
                                  const AttentionMask& self_mask, const AttentionMask& cross_mask,
                                  const ForwardOptions& options = {}) const;

  /// Runs the decoder stack and output projection over encoder output.
  ForwardOutput decode(const Tensor& encoder_top, const IdBatch& src, const IdBatch& tgt_in,
                       const ForwardOptions& options = {}) const;

  /// Teacher-forced pass: tgt_in is BOS-prefixed.
  ForwardOutput forward(const IdBatch& src, const IdBatch& tgt_in, const ForwardOptions& options = {}) const;

 private:
  Tensor embed(const Tensor& table, const IdBatch& ids, const ForwardOptions& options) const;
  Tensor attention(const Attention& p, const Tensor& query, std::size_t query_len, const Tensor& memory,
                   std::size_t memory_len, std::size_t batch, const AttentionMask& mask) const;
  Tensor feed_forward(const FeedForward& p, const Tensor& x) const;
  Tensor maybe_dropout(const Tensor& x, const ForwardOptions& options) const;
  void check_length(std::size_t len, const char* what) const;

  ModelConfig config_;
  Tensor src_embed_, tgt_embed_, out_w_, out_b_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  std::vector<NamedParameter> params_;
};

/// Sinusoidal position table [len, d].
std::vector<double> sinusoidal_positions(std::size_t len, std::size_t d);

/// Extra string lists stored alongside the weights (e.g. vocabularies).
using CheckpointExtras = std::map<std::string, std::vector<std::string>>;

void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtras& extras = {});

struct LoadedCheckpoint {
  Model model;
  CheckpointExtras extras;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace gnmt

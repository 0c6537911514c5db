#include "gnmt/model.hpp"

#include <cmath>

#include "gnmt/error.hpp"

namespace gnmt {

std::string to_string(GateMode mode) { return mode == GateMode::kGated ? "GATED" : "BASELINE"; }

GateMode parse_gate_mode(const std::string& text) {
  if (text == "GATED") return GateMode::kGated;
  if (text == "BASELINE") return GateMode::kBaseline;
  throw ConfigError("gate mode must be GATED or BASELINE, got '" + text + "'");
}

void ModelConfig::validate() const {
  if (src_vocab_size == 0 || tgt_vocab_size == 0) throw ConfigError("vocabulary sizes must be positive");
  if (num_layers == 0) throw ConfigError("num_layers must be positive");
  if (num_heads == 0) throw ConfigError("num_heads must be positive");
  if (model_dim == 0 || model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " must be a positive multiple of num_heads " +
                      std::to_string(num_heads));
  }
  if (ff_dim == 0) throw ConfigError("ff_dim must be positive");
  if (max_len == 0) throw ConfigError("max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
}

IdBatch IdBatch::from_sequences(const std::vector<std::vector<int>>& seqs) {
  if (seqs.empty()) throw DimensionError("empty batch");
  IdBatch out;
  out.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw DimensionError("empty sequence in batch");
    out.len = std::max(out.len, s.size());
  }
  out.ids.assign(out.batch * out.len, kPadId);
  out.mask.assign(out.batch * out.len, 0);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      out.ids[b * out.len + t] = seqs[b][t];
      out.mask[b * out.len + t] = 1;
    }
  }
  return out;
}

AttentionMask key_padding_mask(const IdBatch& keys, std::size_t query_len) {
  AttentionMask m{keys.batch, query_len, keys.len, {}};
  m.allowed.resize(keys.batch * query_len * keys.len);
  for (std::size_t b = 0; b < keys.batch; ++b) {
    for (std::size_t q = 0; q < query_len; ++q) {
      for (std::size_t k = 0; k < keys.len; ++k) {
        m.allowed[(b * query_len + q) * keys.len + k] = keys.mask[b * keys.len + k];
      }
    }
  }
  return m;
}

AttentionMask causal_mask(const IdBatch& tgt) {
  AttentionMask m{tgt.batch, tgt.len, tgt.len, {}};
  m.allowed.resize(tgt.batch * tgt.len * tgt.len);
  for (std::size_t b = 0; b < tgt.batch; ++b) {
    for (std::size_t q = 0; q < tgt.len; ++q) {
      for (std::size_t k = 0; k < tgt.len; ++k) {
        m.allowed[(b * tgt.len + q) * tgt.len + k] = (k <= q && tgt.mask[b * tgt.len + k]) ? 1 : 0;
      }
    }
  }
  return m;
}

std::vector<double> sinusoidal_positions(std::size_t len, std::size_t d) {
  std::vector<double> table(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      table[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> data(fan_in * fan_out);
    for (double& v : data) v = dist(rng_);
    return Tensor::from_data({fan_in, fan_out}, std::move(data), true);
  }

  static Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }
  static Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  const std::size_t ff = config_.ff_dim;
  Initializer init(seed);
  auto reg = [this](std::string name, const Tensor& t) { params_.push_back({std::move(name), t}); };

  auto make_attention = [&](const std::string& prefix) {
    Attention a{init.xavier(d, d), Initializer::zeros(d), init.xavier(d, d), Initializer::zeros(d),
                init.xavier(d, d), Initializer::zeros(d), init.xavier(d, d), Initializer::zeros(d)};
    reg(prefix + ".wq", a.wq);
    reg(prefix + ".bq", a.bq);
    reg(prefix + ".wk", a.wk);
    reg(prefix + ".bk", a.bk);
    reg(prefix + ".wv", a.wv);
    reg(prefix + ".bv", a.bv);
    reg(prefix + ".wo", a.wo);
    reg(prefix + ".bo", a.bo);
    return a;
  };
  auto make_norm = [&](const std::string& prefix) {
    Norm n{Initializer::ones(d), Initializer::zeros(d)};
    reg(prefix + ".gain", n.gain);
    reg(prefix + ".bias", n.bias);
    return n;
  };
  auto make_ffn = [&](const std::string& prefix) {
    FeedForward f{init.xavier(d, ff), Initializer::zeros(ff), init.xavier(ff, d), Initializer::zeros(d)};
    reg(prefix + ".w1", f.w1);
    reg(prefix + ".b1", f.b1);
    reg(prefix + ".w2", f.w2);
    reg(prefix + ".b2", f.b2);
    return f;
  };

  src_embed_ = init.xavier(config_.src_vocab_size, d);
  reg("src_embed", src_embed_);
  tgt_embed_ = init.xavier(config_.tgt_vocab_size, d);
  reg("tgt_embed", tgt_embed_);

  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.self_attn = make_attention(p + ".self_attn");
    layer.norm_attn = make_norm(p + ".norm_attn");
    layer.ffn = make_ffn(p + ".ffn");
    layer.norm_ffn = make_norm(p + ".norm_ffn");
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = make_attention(p + ".self_attn");
    layer.norm_target = make_norm(p + ".norm_target");
    layer.cross_attn = make_attention(p + ".cross_attn");
    layer.norm_source = make_norm(p + ".norm_source");
    if (config_.gate_mode == GateMode::kGated) {
      layer.gate_w = init.xavier(2 * d, d);
      layer.gate_b = Initializer::zeros(d);
      reg(p + ".gate_w", layer.gate_w);
      reg(p + ".gate_b", layer.gate_b);
    }
    layer.ffn = make_ffn(p + ".ffn");
    layer.norm_out = make_norm(p + ".norm_out");
    decoder_.push_back(std::move(layer));
  }
  out_w_ = init.xavier(d, config_.tgt_vocab_size);
  reg("out_w", out_w_);
  out_b_ = Initializer::zeros(config_.tgt_vocab_size);
  reg("out_b", out_b_);
}

Model Model::clone() const {
  Model copy(config_, 0);
  copy.copy_parameters_from(*this);
  return copy;
}

Tensor Model::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ContractError("no parameter named '" + name + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

std::size_t Model::copy_parameters_from(const Model& other) {
  std::size_t copied = 0;
  for (auto& p : params_) {
    for (const auto& q : other.params_) {
      if (q.name == p.name && q.value.shape() == p.value.shape()) {
        auto src = q.value.data();
        auto dst = p.value.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
        ++copied;
        break;
      }
    }
  }
  return copied;
}

void Model::check_length(std::size_t len, const char* what) const {
  if (len > config_.max_len) {
    throw LengthError(std::string(what) + " length " + std::to_string(len) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
}

Tensor Model::maybe_dropout(const Tensor& x, const ForwardOptions& options) const {
  if (!options.train || config_.dropout <= 0.0) return x;
  if (options.rng == nullptr) throw ContractError("training forward pass requires an rng");
  return dropout(x, config_.dropout, *options.rng);
}

Tensor Model::embed(const Tensor& table, const IdBatch& ids, const ForwardOptions& options) const {
  const std::size_t d = config_.model_dim;
  Tensor rows = embedding_lookup(table, ids.ids);
  std::vector<double> pos = sinusoidal_positions(ids.len, d);
  std::vector<double> tiled(ids.batch * ids.len * d);
  for (std::size_t b = 0; b < ids.batch; ++b) std::copy(pos.begin(), pos.end(), tiled.begin() + b * ids.len * d);
  Tensor positions = Tensor::from_data({ids.batch, ids.len, d}, std::move(tiled));
  Tensor x = add(reshape(scale(rows, std::sqrt(static_cast<double>(d))), {ids.batch, ids.len, d}), positions);
  return maybe_dropout(x, options);
}

Tensor Model::attention(const Attention& p, const Tensor& query, std::size_t query_len, const Tensor& memory,
                        std::size_t memory_len, std::size_t batch, const AttentionMask& mask) const {
  const std::size_t heads = config_.num_heads;
  const std::size_t dh = config_.model_dim / heads;
  Tensor q = split_heads(linear(query, p.wq, p.bq), batch, query_len, heads);
  Tensor k = split_heads(linear(memory, p.wk, p.bk), batch, memory_len, heads);
  Tensor v = split_heads(linear(memory, p.wv, p.bv), batch, memory_len, heads);
  Tensor scores = bmm(scale(q, 1.0 / std::sqrt(static_cast<double>(dh))), k, true);
  Tensor weights = masked_softmax(scores, mask);
  Tensor context = merge_heads(bmm(weights, v), batch, query_len, heads);
  return linear(context, p.wo, p.bo);
}

Tensor Model::feed_forward(const FeedForward& p, const Tensor& x) const {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor Model::encode(const IdBatch& src, const ForwardOptions& options) const {
  check_length(src.len, "source");
  const AttentionMask mask = key_padding_mask(src, src.len);
  Tensor x = embed(src_embed_, src, options);
  for (const auto& layer : encoder_) {
    Tensor a = attention(layer.self_attn, x, src.len, x, src.len, src.batch, mask);
    x = layer_norm(add(x, maybe_dropout(a, options)), layer.norm_attn.gain, layer.norm_attn.bias);
    Tensor f = feed_forward(layer.ffn, x);
    x = layer_norm(add(x, maybe_dropout(f, options)), layer.norm_ffn.gain, layer.norm_ffn.bias);
  }
  return x;
}

DecoderLayerState Model::decoder_layer(std::size_t layer, const Tensor& c_prev, const Tensor& encoder_top,
                                       const AttentionMask& self_mask, const AttentionMask& cross_mask,
                                       const ForwardOptions& options) const {
  const DecoderLayer& p = decoder_.at(layer);
  if (c_prev.rank() != 3 || c_prev.dim(2) != config_.model_dim) {
    throw DimensionError("decoder layer input must be [batch, len, d], got " + shape_str(c_prev.shape()));
  }
  if (encoder_top.rank() != 3 || encoder_top.dim(0) != c_prev.dim(0) || encoder_top.dim(2) != config_.model_dim) {
    throw DimensionError("encoder output " + shape_str(encoder_top.shape()) + " does not match decoder input " +
                         shape_str(c_prev.shape()));
  }
  const std::size_t batch = c_prev.dim(0), tgt_len = c_prev.dim(1), src_len = encoder_top.dim(1);

  DecoderLayerState st;
  // t = rn(ln(att(c_i, c_<i)))
  Tensor self_att = attention(p.self_attn, c_prev, tgt_len, c_prev, tgt_len, batch, self_mask);
  st.t = add(c_prev, maybe_dropout(layer_norm(self_att, p.norm_target.gain, p.norm_target.bias), options));
  // s = ln(att(t, h)), no residual
  Tensor cross_att = attention(p.cross_attn, st.t, tgt_len, encoder_top, src_len, batch, cross_mask);
  st.s = maybe_dropout(layer_norm(cross_att, p.norm_source.gain, p.norm_source.bias), options);

  Tensor mixed;
  if (config_.gate_mode == GateMode::kGated) {
    st.z = sigmoid(linear(concat_last_axis(st.t, st.s), p.gate_w, p.gate_b));
    if (options.force_sum_combination) {
      mixed = add(st.t, st.s);
    } else {
      Tensor keep_target = add_scalar(scale(st.z, -1.0), 1.0);
      mixed = add(mul(keep_target, st.t), mul(st.z, st.s));
    }
  } else {
    mixed = add(st.t, st.s);
  }
  // c = rn(ln(ff(mixed)))
  Tensor ff = feed_forward(p.ffn, mixed);
  st.c = add(mixed, maybe_dropout(layer_norm(ff, p.norm_out.gain, p.norm_out.bias), options));
  return st;
}

ForwardOutput Model::decode(const Tensor& encoder_top, const IdBatch& src, const IdBatch& tgt_in,
                            const ForwardOptions& options) const {
  check_length(tgt_in.len, "target");
  if (tgt_in.batch != src.batch) throw DimensionError("source and target batch sizes differ");
  const AttentionMask self_mask = causal_mask(tgt_in);
  const AttentionMask cross_mask = key_padding_mask(src, tgt_in.len);
  ForwardOutput out;
  out.encoder_top = encoder_top;
  Tensor c = embed(tgt_embed_, tgt_in, options);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    DecoderLayerState st = decoder_layer(l, c, encoder_top, self_mask, cross_mask, options);
    if (st.z.defined()) out.gates.push_back(st.z);
    c = st.c;
  }
  out.logits = linear(c, out_w_, out_b_);
  return out;
}

ForwardOutput Model::forward(const IdBatch& src, const IdBatch& tgt_in, const ForwardOptions& options) const {
  return decode(encode(src, options), src, tgt_in, options);
}

}  // namespace gnmt

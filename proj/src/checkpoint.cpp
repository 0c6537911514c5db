#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gnmt/error.hpp"
#include "gnmt/model.hpp"

// Checkpoint layout:
//   magic line "GNMTCKPT1\n"
//   u64 little-endian byte length of the JSON header
//   JSON header {config, extras, tensors: [{name, shape}]}
//   raw IEEE-754 doubles for each tensor in header order

namespace gnmt {

namespace {

constexpr char kMagic[] = "GNMTCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"src_vocab_size", c.src_vocab_size},
          {"tgt_vocab_size", c.tgt_vocab_size},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"model_dim", c.model_dim},
          {"ff_dim", c.ff_dim},
          {"max_len", c.max_len},
          {"gate_mode", to_string(c.gate_mode)},
          {"dropout", c.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.src_vocab_size = j.at("src_vocab_size").get<std::size_t>();
  c.tgt_vocab_size = j.at("tgt_vocab_size").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.gate_mode = parse_gate_mode(j.at("gate_mode").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  return c;
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtras& extras) {
  nlohmann::json header;
  header["config"] = config_to_json(model.config());
  header["extras"] = extras;
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    header["tensors"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    const auto data = p.value.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed while writing checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) throw IoError("'" + path + "' is not a checkpoint");
  const std::uint64_t header_len = read_u64(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint header in '" + path + "'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in '" + path + "': " + e.what());
  }
  Model model(config_from_json(header.at("config")), 0);
  CheckpointExtras extras = header.at("extras").get<CheckpointExtras>();

  const auto& tensors = header.at("tensors");
  if (tensors.size() != model.parameters().size()) {
    throw IoError("checkpoint '" + path + "' has " + std::to_string(tensors.size()) + " tensors, model expects " +
                  std::to_string(model.parameters().size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor param = model.parameters()[i].value;
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<Shape>();
    if (name != model.parameters()[i].name || shape != param.shape()) {
      throw IoError("checkpoint tensor '" + name + "' does not match parameter '" + model.parameters()[i].name + "'");
    }
    auto dst = param.mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw IoError("truncated tensor data for '" + name + "' in '" + path + "'");
  }
  return LoadedCheckpoint{std::move(model), std::move(extras)};
}

}  // namespace gnmt

#include "gnmt/config.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

#include "gnmt/error.hpp"

namespace gnmt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return value;
}

}  // namespace

const std::set<std::string>& Config::known_keys() {
  static const std::set<std::string> kKeys = {
      // data
      "corpus", "vocab_size", "train_src", "train_tgt", "src_vocab", "tgt_vocab", "src_vocab_size",
      "tgt_vocab_size", "supervision", "supervision_debug", "bilingual_pmi", "monolingual_pmi", "test_src",
      "test_tgt", "input", "output", "hypotheses", "references", "sources", "buckets",
      // model
      "gate_mode", "num_layers", "num_heads", "model_dim", "ff_dim", "max_len", "dropout",
      // training
      "lambda", "layers", "warmup_steps", "lr_scale", "max_tokens_per_batch", "max_steps", "checkpoint_every",
      "log_every", "seed", "label_smoothing", "penalty_normalization", "adam_beta1", "adam_beta2", "adam_eps",
      "checkpoint", "metrics_log",
      // decoding
      "beam", "alpha", "max_decode_len"};
  return kKeys;
}

Config Config::parse(std::istream& in, const std::string& name) {
  Config c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = name + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (!known_keys().count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (c.values_.count(key)) throw ConfigError(where + ": key '" + key + "' given twice");
    c.values_[key] = value;
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return parse(in, path);
}

void Config::set(const std::string& key, const std::string& value) {
  if (!known_keys().count(key)) throw ConfigError("unknown key '" + key + "'");
  values_[key] = value;
}

std::optional<std::string> Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::require(const std::string& key) const {
  auto v = get(key);
  if (!v || v->empty()) throw UsageError("missing required setting '" + key + "'");
  return *v;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
  auto v = get(key);
  return v ? parse_integer<std::size_t>(key, *v) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto v = get(key);
  return v ? parse_integer<std::uint64_t>(key, *v) : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + *v + "'");
  }
}

void Config::write(std::ostream& out) const {
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
}

}  // namespace gnmt

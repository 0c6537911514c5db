#include "gnmt/pmi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "gnmt/error.hpp"

namespace gnmt {

std::string to_string(Scenario scenario) {
  return scenario == Scenario::kBilingual ? "BILINGUAL" : "MONOLINGUAL";
}

Scenario parse_scenario(const std::string& text) {
  if (text == "BILINGUAL") return Scenario::kBilingual;
  if (text == "MONOLINGUAL") return Scenario::kMonolingual;
  throw ConfigError("unknown PMI scenario '" + text + "'");
}

std::size_t PairHash::operator()(const std::pair<std::string, std::string>& p) const noexcept {
  const std::size_t h1 = std::hash<std::string>{}(p.first);
  const std::size_t h2 = std::hash<std::string>{}(p.second);
  return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
}

namespace {

std::int64_t lookup(const PmiTable::UnigramMap& m, const std::string& key) {
  auto it = m.find(key);
  return it == m.end() ? 0 : it->second;
}

}  // namespace

std::int64_t PmiTable::unigram_a(const std::string& token) const { return lookup(unigram_a_, token); }
std::int64_t PmiTable::unigram_b(const std::string& token) const { return lookup(unigram_b_, token); }

std::int64_t PmiTable::pair(const std::string& a, const std::string& b) const {
  auto it = pairs_.find({a, b});
  return it == pairs_.end() ? 0 : it->second;
}

void PmiTable::add_unigram_a(const std::string& token, std::int64_t count) { unigram_a_[token] += count; }
void PmiTable::add_unigram_b(const std::string& token, std::int64_t count) { unigram_b_[token] += count; }

void PmiTable::add_pair(const std::string& a, const std::string& b, std::int64_t count) {
  pairs_[{a, b}] += count;
  z_ += count;
}

void PmiTable::merge(const PmiTable& other) {
  if (other.scenario_ != scenario_) {
    throw ConfigError("cannot merge a " + to_string(other.scenario_) + " table into a " + to_string(scenario_) +
                      " table");
  }
  for (const auto& [k, v] : other.unigram_a_) unigram_a_[k] += v;
  for (const auto& [k, v] : other.unigram_b_) unigram_b_[k] += v;
  for (const auto& [k, v] : other.pairs_) pairs_[k] += v;
  z_ += other.z_;
}

double PmiTable::pmi_without_normalizer(const std::string& a, const std::string& b) const {
  const std::int64_t joint = pair(a, b);
  const std::int64_t ca = unigram_a(a);
  const std::int64_t cb = unigram_b(b);
  if (joint == 0 || ca == 0 || cb == 0) return kNegInf;
  return std::log(static_cast<double>(joint)) - std::log(static_cast<double>(ca)) -
         std::log(static_cast<double>(cb));
}

double PmiTable::pmi(const std::string& a, const std::string& b) const {
  const double rest = pmi_without_normalizer(a, b);
  if (rest == kNegInf) return kNegInf;
  return std::log(static_cast<double>(z_)) + rest;
}

double pmi(const PmiTable& table, const std::string& a, const std::string& b) { return table.pmi(a, b); }

PmiTable count_bilingual(const std::vector<Sentence>& sources, const std::vector<Sentence>& targets) {
  if (sources.size() != targets.size()) {
    throw AlignmentError("parallel corpus has " + std::to_string(sources.size()) + " source and " +
                         std::to_string(targets.size()) + " target sentences");
  }
  PmiTable table(Scenario::kBilingual);
  std::vector<std::string> src_types, tgt_types;
  for (std::size_t n = 0; n < sources.size(); ++n) {
    src_types.assign(sources[n].begin(), sources[n].end());
    std::sort(src_types.begin(), src_types.end());
    src_types.erase(std::unique(src_types.begin(), src_types.end()), src_types.end());
    tgt_types.assign(targets[n].begin(), targets[n].end());
    std::sort(tgt_types.begin(), tgt_types.end());
    tgt_types.erase(std::unique(tgt_types.begin(), tgt_types.end()), tgt_types.end());
    for (const auto& y : tgt_types) table.add_unigram_a(y);
    for (const auto& x : src_types) table.add_unigram_b(x);
    for (const auto& y : tgt_types) {
      for (const auto& x : src_types) table.add_pair(y, x);
    }
  }
  return table;
}

PmiTable count_monolingual(const std::vector<Sentence>& targets) {
  PmiTable table(Scenario::kMonolingual);
  std::vector<std::string> prefix_types;  // insertion order, distinct
  std::unordered_set<std::string> seen;
  for (const auto& sentence : targets) {
    prefix_types.clear();
    seen.clear();
    for (const auto& token : sentence) {
      if (!prefix_types.empty()) {
        table.add_unigram_a(token);
        for (const auto& prev : prefix_types) {
          table.add_pair(token, prev);
          table.add_unigram_b(prev);
        }
      }
      if (seen.insert(token).second) prefix_types.push_back(token);
    }
  }
  return table;
}

LabelDetail label_token(const std::string& token, const Sentence& source, std::span<const std::string> prefix,
                        const PmiTable& bilingual, const PmiTable& monolingual) {
  LabelDetail d;
  for (const auto& x : source) {
    d.best_source = std::max(d.best_source, bilingual.pmi(token, x));
    d.best_source_without_normalizer =
        std::max(d.best_source_without_normalizer, bilingual.pmi_without_normalizer(token, x));
  }
  for (const auto& y : prefix) {
    d.best_target = std::max(d.best_target, monolingual.pmi(token, y));
    d.best_target_without_normalizer =
        std::max(d.best_target_without_normalizer, monolingual.pmi_without_normalizer(token, y));
  }
  d.label = d.best_source > d.best_target ? 1 : 0;
  return d;
}

namespace {

void require_scenarios(const PmiTable& bilingual, const PmiTable& monolingual) {
  if (bilingual.scenario() != Scenario::kBilingual) {
    throw ConfigError("expected a BILINGUAL table, got " + to_string(bilingual.scenario()));
  }
  if (monolingual.scenario() != Scenario::kMonolingual) {
    throw ConfigError("expected a MONOLINGUAL table, got " + to_string(monolingual.scenario()));
  }
}

}  // namespace

std::vector<int> gen_supervision(const Sentence& source, const Sentence& target, const PmiTable& bilingual,
                                 const PmiTable& monolingual) {
  require_scenarios(bilingual, monolingual);
  std::vector<int> labels(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    labels[i] = label_token(target[i], source, std::span<const std::string>(target.data(), i), bilingual, monolingual)
                    .label;
  }
  return labels;
}

namespace {

template <typename Map>
std::vector<typename Map::const_iterator> sorted_entries(const Map& m) {
  std::vector<typename Map::const_iterator> out;
  out.reserve(m.size());
  for (auto it = m.begin(); it != m.end(); ++it) out.push_back(it);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a->first < b->first; });
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::int64_t parse_count(const std::string& text, std::size_t line_no) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || v < 1) {
    throw IoError("PMI table line " + std::to_string(line_no) + ": bad count '" + text + "'");
  }
  return v;
}

}  // namespace

void write_pmi_table(std::ostream& out, const PmiTable& table) {
  out << "scenario " << to_string(table.scenario()) << " Z " << table.z() << '\n';
  out << "#unigram_a\n";
  for (const auto& it : sorted_entries(table.unigram_a_counts())) out << it->first << '\t' << it->second << '\n';
  out << "#unigram_b\n";
  for (const auto& it : sorted_entries(table.unigram_b_counts())) out << it->first << '\t' << it->second << '\n';
  out << "#pairs\n";
  for (const auto& it : sorted_entries(table.pair_counts())) {
    out << it->first.first << '\t' << it->first.second << '\t' << it->second << '\n';
  }
}

PmiTable read_pmi_table(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty PMI table");
  std::istringstream header(line);
  std::string kw_scenario, scenario, kw_z;
  long long z = -1;
  if (!(header >> kw_scenario >> scenario >> kw_z >> z) || kw_scenario != "scenario" || kw_z != "Z" || z < 0) {
    throw IoError("malformed PMI table header '" + line + "'");
  }
  PmiTable table(parse_scenario(scenario));
  enum class Section { kNone, kUnigramA, kUnigramB, kPairs } section = Section::kNone;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "#unigram_a") {
      section = Section::kUnigramA;
      continue;
    }
    if (line == "#unigram_b") {
      section = Section::kUnigramB;
      continue;
    }
    if (line == "#pairs") {
      section = Section::kPairs;
      continue;
    }
    const auto fields = split_tabs(line);
    switch (section) {
      case Section::kUnigramA:
      case Section::kUnigramB:
        if (fields.size() != 2) throw IoError("PMI table line " + std::to_string(line_no) + ": expected token<TAB>count");
        if (section == Section::kUnigramA) {
          table.add_unigram_a(fields[0], parse_count(fields[1], line_no));
        } else {
          table.add_unigram_b(fields[0], parse_count(fields[1], line_no));
        }
        break;
      case Section::kPairs:
        if (fields.size() != 3) {
          throw IoError("PMI table line " + std::to_string(line_no) + ": expected token<TAB>token<TAB>count");
        }
        table.add_pair(fields[0], fields[1], parse_count(fields[2], line_no));
        break;
      case Section::kNone:
        throw IoError("PMI table line " + std::to_string(line_no) + ": entry outside any section");
    }
  }
  if (table.z() != z) {
    throw IoError("PMI table header says Z=" + std::to_string(z) + " but pairs sum to " + std::to_string(table.z()));
  }
  return table;
}

void save_pmi_table(const std::string& path, const PmiTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_pmi_table(out, table);
  if (!out) throw IoError("failed while writing '" + path + "'");
}

PmiTable load_pmi_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_pmi_table(in);
}

void write_supervision(std::ostream& out, const std::vector<std::vector<int>>& labels) {
  for (const auto& sentence : labels) {
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      if (i) out << ' ';
      out << sentence[i];
    }
    out << '\n';
  }
}

std::vector<std::vector<int>> read_supervision(std::istream& in) {
  std::vector<std::vector<int>> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<int> sentence;
    std::string tok;
    while (fields >> tok) {
      if (tok != "0" && tok != "1") {
        throw IoError("supervision line " + std::to_string(line_no) + ": label '" + tok + "' is not 0 or 1");
      }
      sentence.push_back(tok == "1" ? 1 : 0);
    }
    labels.push_back(std::move(sentence));
  }
  return labels;
}

}  // namespace gnmt

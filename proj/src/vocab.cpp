#include "gnmt/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "gnmt/error.hpp"
#include "gnmt/model.hpp"

namespace gnmt {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kTokens = {"<pad>", "<s>", "</s>", "<unk>"};
  return kTokens;
}

}  // namespace

Vocab::Vocab() : Vocab(from_tokens(reserved_tokens())) {}

Vocab Vocab::build(const std::vector<Sentence>& corpus, std::size_t size_limit) {
  if (size_limit < kReserved) {
    throw ConfigError("vocabulary size limit " + std::to_string(size_limit) + " is below the " +
                      std::to_string(kReserved) + " reserved tokens");
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& sentence : corpus) {
    for (const auto& w : sentence) ++freq[w];
  }
  for (const auto& r : reserved_tokens()) freq.erase(r);
  std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(), freq.end());
  // std::map iteration is already lexicographic, so a stable sort keeps ties in order.
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = reserved_tokens();
  for (const auto& [w, count] : entries) {
    if (tokens.size() >= size_limit) break;
    tokens.push_back(w);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto& reserved = reserved_tokens();
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw ContractError("vocabulary must start with <pad> <s> </s> <unk>");
  }
  Vocab v{EmptyTag{}};
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const auto& t = v.tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw ContractError("vocabulary entry " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!v.index_.emplace(t, static_cast<int>(i)).second) throw ContractError("duplicate vocabulary entry: " + t);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw BoundsError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const Sentence& sentence) const {
  std::vector<int> ids;
  ids.reserve(sentence.size());
  for (const auto& w : sentence) ids.push_back(id(w));
  return ids;
}

Sentence Vocab::decode(const std::vector<int>& ids) const {
  Sentence out;
  for (int i : ids) {
    if (i == kEosId) break;
    if (i == kPadId || i == kBosId) continue;
    out.push_back(token(i));
  }
  return out;
}

void write_vocab(std::ostream& out, const Vocab& vocab) {
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

Vocab read_vocab(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab::from_tokens(std::move(tokens));
}

void save_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_vocab(out, vocab);
  if (!out) throw IoError("failed writing " + path);
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_vocab(in);
}

}  // namespace gnmt

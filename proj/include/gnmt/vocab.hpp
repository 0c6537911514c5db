#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnmt/pmi.hpp"

namespace gnmt {

/// Token/id mapping with <pad>, <s>, </s>, <unk> at ids 0-3.
class Vocab {
 public:
  static constexpr std::size_t kReserved = 4;

  /// Only the reserved entries.
  Vocab();

  /// Frequency-sorted (ties lexicographic) and truncated so that the whole
  /// vocabulary, reserved entries included, has at most `size_limit` tokens.
  static Vocab build(const std::vector<Sentence>& corpus, std::size_t size_limit);
  /// Takes the full token list, reserved entries first. Throws ContractError
  /// on a wrong prefix or a duplicate.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// Unknown tokens map to the UNK id.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::vector<int> encode(const Sentence& sentence) const;
  /// Stops at EOS; drops PAD and BOS.
  Sentence decode(const std::vector<int>& ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  struct EmptyTag {};
  explicit Vocab(EmptyTag) {}

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// One token per line, in id order.
void write_vocab(std::ostream& out, const Vocab& vocab);
Vocab read_vocab(std::istream& in);
void save_vocab(const std::string& path, const Vocab& vocab);
Vocab load_vocab(const std::string& path);

}  // namespace gnmt

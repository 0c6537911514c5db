#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gnmt {

using Sentence = std::vector<std::string>;

enum class Scenario { kBilingual, kMonolingual };

std::string to_string(Scenario scenario);
Scenario parse_scenario(const std::string& text);

/// Value returned by pmi() for unseen pairs; compares below every finite value.
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const noexcept;
};

/// Co-occurrence statistics for one scenario. Slot "a" always holds the
/// predicted target word; slot "b" holds a source word (bilingual) or a word
/// from the preceding target context (monolingual).
class PmiTable {
 public:
  using UnigramMap = std::unordered_map<std::string, std::int64_t>;
  using PairMap = std::unordered_map<std::pair<std::string, std::string>, std::int64_t, PairHash>;

  explicit PmiTable(Scenario scenario) : scenario_(scenario) {}

  Scenario scenario() const { return scenario_; }
  /// Total co-occurrence mass: the sum of all pair counts.
  std::int64_t z() const { return z_; }

  std::int64_t unigram_a(const std::string& token) const;
  std::int64_t unigram_b(const std::string& token) const;
  std::int64_t pair(const std::string& a, const std::string& b) const;

  const UnigramMap& unigram_a_counts() const { return unigram_a_; }
  const UnigramMap& unigram_b_counts() const { return unigram_b_; }
  const PairMap& pair_counts() const { return pairs_; }

  void add_unigram_a(const std::string& token, std::int64_t count = 1);
  void add_unigram_b(const std::string& token, std::int64_t count = 1);
  /// Also adds `count` to Z.
  void add_pair(const std::string& a, const std::string& b, std::int64_t count = 1);

  /// Adds every count of `other`; scenarios must agree.
  void merge(const PmiTable& other);

  /// log Z + log C(a,b) - log C(a) - log C(b), natural log; kNegInf when the
  /// pair or either unigram is unseen.
  double pmi(const std::string& a, const std::string& b) const;
  /// The same quantity without the log Z term.
  double pmi_without_normalizer(const std::string& a, const std::string& b) const;

  bool operator==(const PmiTable& other) const = default;

 private:
  Scenario scenario_;
  std::int64_t z_ = 0;
  UnigramMap unigram_a_;
  UnigramMap unigram_b_;
  PairMap pairs_;
};

/// Bilingual counts: within each sentence pair every (distinct target type,
/// distinct source type) combination is counted once; unigrams count the
/// sentence pairs containing the type.
PmiTable count_bilingual(const std::vector<Sentence>& sources, const std::vector<Sentence>& targets);

/// Monolingual counts: for every target position i and every distinct type
/// in the strict prefix, (y_i, y_k) is counted once. unigram_a counts
/// positions with a non-empty prefix, unigram_b counts the (position,
/// prefix) contexts containing the type.
PmiTable count_monolingual(const std::vector<Sentence>& targets);

/// Free-function spelling of PmiTable::pmi.
double pmi(const PmiTable& table, const std::string& a, const std::string& b);

/// Both maxima behind one z* decision.
struct LabelDetail {
  double best_source = kNegInf;
  double best_target = kNegInf;
  double best_source_without_normalizer = kNegInf;
  double best_target_without_normalizer = kNegInf;
  int label = 0;
};

/// z* for `token` predicted after `prefix` given `source`: 1 iff the best
/// bilingual PMI against the source strictly exceeds the best monolingual PMI
/// against the prefix (an empty prefix scores kNegInf).
LabelDetail label_token(const std::string& token, const Sentence& source, std::span<const std::string> prefix,
                        const PmiTable& bilingual, const PmiTable& monolingual);

/// One label per target token.
std::vector<int> gen_supervision(const Sentence& source, const Sentence& target, const PmiTable& bilingual,
                                 const PmiTable& monolingual);

/// Text format: a `scenario <S> Z <n>` header, then `#unigram_a`,
/// `#unigram_b` and `#pairs` sections of tab-separated entries, each sorted.
void write_pmi_table(std::ostream& out, const PmiTable& table);
PmiTable read_pmi_table(std::istream& in);
void save_pmi_table(const std::string& path, const PmiTable& table);
PmiTable load_pmi_table(const std::string& path);

/// One line per sentence of space-separated 0/1 labels.
void write_supervision(std::ostream& out, const std::vector<std::vector<int>>& labels);
std::vector<std::vector<int>> read_supervision(std::istream& in);

}  // namespace gnmt

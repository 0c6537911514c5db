#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gnmt/pmi.hpp"

namespace gnmt {

/// Sufficient statistics for corpus BLEU-4.
struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  void add(const BleuStats& other);
  /// Uniformly weighted BLEU-4 with brevity penalty, in [0, 100]. No
  /// smoothing: any zero n-gram precision gives 0.
  double score() const;
};

BleuStats bleu_stats(const Sentence& hypothesis, const Sentence& reference, bool case_insensitive = true);

/// Corpus-level BLEU. Throws ContractError on an empty corpus.
double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
            bool case_insensitive = true);

struct BucketResult {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;  // exclusive; nullopt for the open last bucket
  std::size_t sentences = 0;
  double bleu = 0.0;
};

/// BLEU per source-length bucket. Edges split lengths into [0, e0), [e0, e1),
/// ..., [e_last, inf); with no edges there is one bucket. Empty buckets are
/// omitted from the result.
std::vector<BucketResult> bucketed_eval(const std::vector<Sentence>& hypotheses,
                                        const std::vector<Sentence>& references,
                                        const std::vector<Sentence>& sources, const std::vector<std::size_t>& edges,
                                        bool case_insensitive = true);

/// Header line then one `lower<TAB>upper<TAB>sentences<TAB>bleu` row per bucket.
void write_bucket_tsv(std::ostream& out, const std::vector<BucketResult>& buckets);

}  // namespace gnmt

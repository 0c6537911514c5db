#include "gnmt/bleu.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "gnmt/error.hpp"

namespace gnmt {

void BleuStats::add(const BleuStats& other) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_len += other.hyp_len;
  ref_len += other.ref_len;
}

double BleuStats::score() const {
  if (hyp_len == 0) return 0.0;
  double log_precision = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  log_precision /= 4.0;
  const double c = static_cast<double>(hyp_len), r = static_cast<double>(ref_len);
  const double brevity = c < r ? 1.0 - r / c : 0.0;
  return 100.0 * std::exp(log_precision + brevity);
}

namespace {

Sentence fold(const Sentence& s, bool case_insensitive) {
  if (!case_insensitive) return s;
  Sentence out = s;
  for (auto& w : out) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  return out;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sentence(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

BleuStats bleu_stats(const Sentence& hypothesis, const Sentence& reference, bool case_insensitive) {
  const Sentence hyp = fold(hypothesis, case_insensitive);
  const Sentence ref = fold(reference, case_insensitive);
  BleuStats st;
  st.hyp_len = hyp.size();
  st.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hyp_counts = ngram_counts(hyp, n);
    const auto ref_counts = ngram_counts(ref, n);
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) st.matches[n - 1] += std::min(count, it->second);
    }
    st.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return st;
}

double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references, bool case_insensitive) {
  if (hypotheses.size() != references.size()) {
    throw AlignmentError(std::to_string(hypotheses.size()) + " hypotheses for " + std::to_string(references.size()) +
                         " references");
  }
  if (hypotheses.empty()) throw ContractError("BLEU is undefined on an empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total.add(bleu_stats(hypotheses[i], references[i], case_insensitive));
  return total.score();
}

std::vector<BucketResult> bucketed_eval(const std::vector<Sentence>& hypotheses,
                                        const std::vector<Sentence>& references,
                                        const std::vector<Sentence>& sources, const std::vector<std::size_t>& edges,
                                        bool case_insensitive) {
  if (hypotheses.size() != references.size() || sources.size() != references.size()) {
    throw AlignmentError("hypotheses, references and sources must have the same number of lines");
  }
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw ConfigError("bucket edges must be strictly increasing");
  }
  const std::size_t buckets = edges.size() + 1;
  std::vector<BleuStats> stats(buckets);
  std::vector<std::size_t> counts(buckets, 0);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const std::size_t len = sources[i].size();
    const std::size_t b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), len) - edges.begin());
    stats[b].add(bleu_stats(hypotheses[i], references[i], case_insensitive));
    ++counts[b];
  }
  std::vector<BucketResult> out;
  for (std::size_t b = 0; b < buckets; ++b) {
    if (counts[b] == 0) continue;
    BucketResult r;
    r.lower = b == 0 ? 0 : edges[b - 1];
    if (b < edges.size()) r.upper = edges[b];
    r.sentences = counts[b];
    r.bleu = stats[b].score();
    out.push_back(r);
  }
  return out;
}

void write_bucket_tsv(std::ostream& out, const std::vector<BucketResult>& buckets) {
  out << "lower\tupper\tsentences\tbleu\n";
  for (const auto& b : buckets) {
    out << b.lower << '\t';
    if (b.upper) {
      out << *b.upper;
    } else {
      out << "inf";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", b.bleu);
    out << '\t' << b.sentences << '\t' << buf << '\n';
  }
}

}  // namespace gnmt

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "gnmt/error.hpp"
#include "gnmt/pmi.hpp"
#include "pmi_oracle.hpp"

using namespace gnmt;
using gnmt::testing::OracleCounts;

namespace {

Sentence words(const std::string& s) {
  Sentence out;
  std::istringstream ss(s);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

void expect_matches_oracle(const PmiTable& table, const OracleCounts& oracle) {
  EXPECT_EQ(table.z(), oracle.z);
  EXPECT_EQ(table.unigram_a_counts().size(), oracle.unigram_a.size());
  EXPECT_EQ(table.unigram_b_counts().size(), oracle.unigram_b.size());
  EXPECT_EQ(table.pair_counts().size(), oracle.pairs.size());
  for (const auto& [t, c] : oracle.unigram_a) EXPECT_EQ(table.unigram_a(t), c) << t;
  for (const auto& [t, c] : oracle.unigram_b) EXPECT_EQ(table.unigram_b(t), c) << t;
  for (const auto& [p, c] : oracle.pairs) EXPECT_EQ(table.pair(p.first, p.second), c) << p.first << "," << p.second;
}

}  // namespace

TEST(Pmi, BilingualTwoPairCorpus) {
  const PmiTable t = count_bilingual({words("a b"), words("a c")}, {words("x y"), words("x z")});
  EXPECT_EQ(t.pair("x", "a"), 2);
  EXPECT_EQ(t.pair("y", "b"), 1);
  EXPECT_EQ(t.z(), 8);
  EXPECT_NEAR(t.pmi("x", "a"), std::log(4.0), 1e-12);
  EXPECT_NEAR(t.pmi("y", "b"), std::log(8.0), 1e-12);
  EXPECT_EQ(t.pmi("y", "c"), kNegInf);
  EXPECT_EQ(t.pmi("nope", "a"), kNegInf);
}

TEST(Pmi, MonolingualExamples) {
  const PmiTable xy = count_monolingual({words("x y")});
  EXPECT_EQ(xy.pair_counts().size(), 1u);
  EXPECT_EQ(xy.pair("y", "x"), 1);

  const PmiTable xx = count_monolingual({words("x x")});
  EXPECT_EQ(xx.pair("x", "x"), 1);
  EXPECT_EQ(xx.z(), 1);

  const PmiTable two = count_monolingual({words("x y"), words("x z")});
  EXPECT_EQ(two.z(), 2);
  EXPECT_NEAR(two.pmi("y", "x"), 0.0, 1e-12);
}

TEST(Pmi, DegenerateAndEmptyCorpora) {
  const PmiTable one = count_bilingual({words("a")}, {words("x")});
  EXPECT_EQ(one.pmi("x", "a"), 0.0);
  const PmiTable empty = count_bilingual({}, {});
  EXPECT_EQ(empty.z(), 0);
  EXPECT_TRUE(empty.pair_counts().empty());
  EXPECT_THROW(count_bilingual({words("a")}, {}), AlignmentError);
}

TEST(Pmi, DuplicatedPairDoublesCounts) {
  const std::vector<Sentence> src = {words("a b a"), words("c")}, tgt = {words("x y"), words("z z w")};
  const PmiTable once = count_bilingual(src, tgt);
  const PmiTable twice = count_bilingual({src[0], src[1], src[0], src[1]}, {tgt[0], tgt[1], tgt[0], tgt[1]});
  EXPECT_EQ(twice.z(), 2 * once.z());
  for (const auto& [p, c] : once.pair_counts()) EXPECT_EQ(twice.pair(p.first, p.second), 2 * c);
}

TEST(Pmi, StreamingCountsMatchBruteForce) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto corpus = gnmt::testing::random_parallel_corpus(rng);
    expect_matches_oracle(count_bilingual(corpus.sources, corpus.targets),
                          gnmt::testing::brute_force_bilingual(corpus.sources, corpus.targets));
    expect_matches_oracle(count_monolingual(corpus.targets), gnmt::testing::brute_force_monolingual(corpus.targets));
  }
}

TEST(Pmi, LabelsMatchBruteForce) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto corpus = gnmt::testing::random_parallel_corpus(rng);
    const PmiTable bi = count_bilingual(corpus.sources, corpus.targets);
    const PmiTable mono = count_monolingual(corpus.targets);
    const OracleCounts obi = gnmt::testing::brute_force_bilingual(corpus.sources, corpus.targets);
    const OracleCounts omono = gnmt::testing::brute_force_monolingual(corpus.targets);
    for (std::size_t n = 0; n < corpus.targets.size(); ++n) {
      const auto labels = gen_supervision(corpus.sources[n], corpus.targets[n], bi, mono);
      EXPECT_EQ(labels, gnmt::testing::brute_force_labels(corpus.sources[n], corpus.targets[n], obi, omono));
    }
  }
}

TEST(Pmi, MergeEqualsCountingConcatenation) {
  std::mt19937_64 rng(29);
  const auto a = gnmt::testing::random_parallel_corpus(rng);
  const auto b = gnmt::testing::random_parallel_corpus(rng);
  auto all_src = a.sources, all_tgt = a.targets;
  all_src.insert(all_src.end(), b.sources.begin(), b.sources.end());
  all_tgt.insert(all_tgt.end(), b.targets.begin(), b.targets.end());

  PmiTable merged = count_bilingual(a.sources, a.targets);
  merged.merge(count_bilingual(b.sources, b.targets));
  EXPECT_EQ(merged, count_bilingual(all_src, all_tgt));

  PmiTable mono = count_monolingual(a.targets);
  mono.merge(count_monolingual(b.targets));
  EXPECT_EQ(mono, count_monolingual(all_tgt));

  EXPECT_THROW(mono.merge(merged), ConfigError);
}

TEST(Pmi, LiteralIdentity) {
  std::mt19937_64 rng(31);
  const auto c = gnmt::testing::random_parallel_corpus(rng);
  const PmiTable t = count_bilingual(c.sources, c.targets);
  for (const auto& [p, count] : t.pair_counts()) {
    const double expected = std::log(static_cast<double>(t.z())) + std::log(static_cast<double>(count)) -
                            std::log(static_cast<double>(t.unigram_a(p.first))) -
                            std::log(static_cast<double>(t.unigram_b(p.second)));
    EXPECT_NEAR(t.pmi(p.first, p.second), expected, 1e-12);
    EXPECT_NEAR(t.pmi_without_normalizer(p.first, p.second),
                expected - std::log(static_cast<double>(t.z())), 1e-12);
  }
}

TEST(Supervision, SpecExamples) {
  const std::vector<Sentence> src = {words("a b"), words("a c")}, tgt = {words("x y"), words("x z")};
  const PmiTable bi = count_bilingual(src, tgt);
  const PmiTable mono = count_monolingual(tgt);
  const std::vector<std::string> prefix = {"x"};
  const LabelDetail d = label_token("y", src[0], prefix, bi, mono);
  EXPECT_NEAR(d.best_source, std::log(8.0), 1e-12);
  EXPECT_NEAR(d.best_target, 0.0, 1e-12);
  EXPECT_EQ(d.label, 1);
  // first position: empty prefix
  EXPECT_EQ(gen_supervision(src[0], tgt[0], bi, mono), (std::vector<int>{1, 1}));
  // fully unseen token: both maxima are -inf, the tie gives 0
  const LabelDetail unseen = label_token("q", words("r"), {}, bi, mono);
  EXPECT_EQ(unseen.best_source, kNegInf);
  EXPECT_EQ(unseen.best_target, kNegInf);
  EXPECT_EQ(unseen.label, 0);
}

TEST(Supervision, ScenarioMismatchIsConfigError) {
  const PmiTable bi = count_bilingual({words("a")}, {words("x")});
  const PmiTable mono = count_monolingual({words("x")});
  EXPECT_THROW(gen_supervision(words("a"), words("x"), mono, bi), ConfigError);
}

TEST(Supervision, LengthAndRange) {
  std::mt19937_64 rng(37);
  const auto c = gnmt::testing::random_parallel_corpus(rng);
  const PmiTable bi = count_bilingual(c.sources, c.targets);
  const PmiTable mono = count_monolingual(c.targets);
  for (std::size_t n = 0; n < c.targets.size(); ++n) {
    const auto labels = gen_supervision(c.sources[n], c.targets[n], bi, mono);
    ASSERT_EQ(labels.size(), c.targets[n].size());
    for (int l : labels) EXPECT_TRUE(l == 0 || l == 1);
  }
}

TEST(PmiFormat, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(41);
  const auto c = gnmt::testing::random_parallel_corpus(rng);
  for (const PmiTable& t : {count_bilingual(c.sources, c.targets), count_monolingual(c.targets)}) {
    std::ostringstream first;
    write_pmi_table(first, t);
    std::istringstream in(first.str());
    const PmiTable back = read_pmi_table(in);
    EXPECT_EQ(back, t);
    std::ostringstream second;
    write_pmi_table(second, back);
    EXPECT_EQ(first.str(), second.str());

    // identical query results for random pairs
    std::vector<std::string> as, bs;
    for (const auto& [w, n] : t.unigram_a_counts()) as.push_back(w);
    for (const auto& [w, n] : t.unigram_b_counts()) bs.push_back(w);
    std::uniform_int_distribution<std::size_t> ia(0, as.size() - 1), ib(0, bs.size() - 1);
    for (int q = 0; q < 100; ++q) {
      const auto& a = as[ia(rng)];
      const auto& b = bs[ib(rng)];
      EXPECT_EQ(t.pmi(a, b), back.pmi(a, b));
    }
  }
}

TEST(PmiFormat, HeaderAndSections) {
  std::ostringstream out;
  write_pmi_table(out, count_bilingual({words("a")}, {words("x")}));
  EXPECT_EQ(out.str(), "scenario BILINGUAL Z 1\n#unigram_a\nx\t1\n#unigram_b\na\t1\n#pairs\nx\ta\t1\n");
}

TEST(PmiFormat, InconsistentZRejected) {
  std::istringstream in("scenario BILINGUAL Z 5\n#unigram_a\nx\t1\n#unigram_b\na\t1\n#pairs\nx\ta\t1\n");
  EXPECT_THROW(read_pmi_table(in), Error);
}

TEST(SupervisionFormat, RoundTrip) {
  const std::vector<std::vector<int>> labels = {{1, 0, 1}, {0}, {1, 1}};
  std::ostringstream out;
  write_supervision(out, labels);
  EXPECT_EQ(out.str(), "1 0 1\n0\n1 1\n");
  std::istringstream in(out.str());
  EXPECT_EQ(read_supervision(in), labels);
}

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "gnmt/pmi.hpp"

namespace gnmt {

/// Splits on ASCII whitespace.
Sentence tokenize(const std::string& line);

/// One sentence per line. Empty lines are rejected with ContractError naming
/// the line number unless `allow_empty` (system output may be empty).
std::vector<Sentence> read_corpus(std::istream& in, const std::string& name = "corpus", bool allow_empty = false);
std::vector<Sentence> load_corpus(const std::string& path, bool allow_empty = false);

void write_corpus(std::ostream& out, const std::vector<Sentence>& corpus);
void save_corpus(const std::string& path, const std::vector<Sentence>& corpus);

struct ParallelCorpus {
  std::vector<Sentence> sources;
  std::vector<Sentence> targets;
};

/// Throws AlignmentError when the line counts differ.
ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path);

}  // namespace gnmt

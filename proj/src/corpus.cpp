#include "gnmt/corpus.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "gnmt/error.hpp"

namespace gnmt {

Sentence tokenize(const std::string& line) {
  Sentence out;
  std::istringstream ss(line);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

std::vector<Sentence> read_corpus(std::istream& in, const std::string& name, bool allow_empty) {
  std::vector<Sentence> corpus;
  std::string line;
  while (std::getline(in, line)) {
    Sentence s = tokenize(line);
    if (s.empty() && !allow_empty) throw ContractError(name + ": line " + std::to_string(corpus.size() + 1) + " is empty");
    corpus.push_back(std::move(s));
  }
  return corpus;
}

std::vector<Sentence> load_corpus(const std::string& path, bool allow_empty) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_corpus(in, path, allow_empty);
}

void write_corpus(std::ostream& out, const std::vector<Sentence>& corpus) {
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

void save_corpus(const std::string& path, const std::vector<Sentence>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_corpus(out, corpus);
  if (!out) throw IoError("failed writing " + path);
}

ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path) {
  ParallelCorpus pc{load_corpus(src_path), load_corpus(tgt_path)};
  if (pc.sources.size() != pc.targets.size()) {
    throw AlignmentError(src_path + " has " + std::to_string(pc.sources.size()) + " lines but " + tgt_path +
                         " has " + std::to_string(pc.targets.size()));
  }
  return pc;
}

}  // namespace gnmt

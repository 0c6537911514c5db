#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gnmt/model.hpp"
#include "gnmt/pmi.hpp"

namespace gnmt {

struct Hypothesis {
  std::vector<int> tokens;  // generated ids, ending in EOS when finished
  double logprob = 0.0;     // sum of per-step log probabilities
  bool finished = false;
};

struct BeamOptions {
  std::size_t beam_size = 4;
  /// Maximum generated tokens; 0 means 2 * source length + 10. Always capped
  /// by the model's max_len.
  std::size_t max_len = 0;
  double alpha = 0.6;
};

/// ((5 + len) / 6)^alpha length normalisation.
double length_normalized_score(double logprob, std::size_t length, double alpha);

/// Argmax decoding; ties go to the lowest id. PAD and BOS are never produced.
Hypothesis greedy_decode(const Model& model, const std::vector<int>& src, std::size_t max_len = 0);

/// Beam search returning the best finished hypothesis by length-normalised
/// score. When nothing finishes within max_len the best unfinished
/// hypothesis is returned with finished = false.
Hypothesis beam_search(const Model& model, const std::vector<int>& src, const BeamOptions& options = {});

/// Teacher-forced log-probability of `tokens` (the exact ids to predict).
double score_tokens(const Model& model, const std::vector<int>& src, const std::vector<int>& tokens);

/// Per-position outcome of a teacher-forced pass over tgt + EOS.
struct ForcedDecoding {
  std::vector<int> reference;          // tgt ids followed by EOS
  std::vector<int> argmax;             // most probable id per position
  std::vector<double> ref_logprob;     // log P(reference_i | prefix, source)
  std::vector<double> argmax_logprob;  // log P(argmax_i | prefix, source)
  std::size_t gate_dim = 0;
  /// gates[layer][position * gate_dim + k]; empty for BASELINE models.
  std::vector<std::vector<double>> gates;

  std::size_t size() const { return reference.size(); }
  bool is_error(std::size_t i) const { return argmax[i] != reference[i]; }
};

ForcedDecoding forced_decode(const Model& model, const std::vector<int>& src, const std::vector<int>& tgt);

/// Forced-decoding errors, context-selection errors and the token count they
/// are rates of (target tokens plus EOS).
struct ErrorCounts {
  std::size_t tokens = 0;
  std::size_t forced_errors = 0;
  std::size_t selection_errors = 0;

  void add(const ErrorCounts& other);
};

struct ErrorReport {
  double fer = 0.0;
  double cer = 0.0;
  double ce_over_fe = 0.0;
  std::size_t token_count = 0;
};

ErrorReport make_error_report(const ErrorCounts& counts);

/// Counts, over the forced-decoding error positions only, those where the
/// reference token and the argmax token receive different z* labels in the
/// same (source, reference prefix) context. `reference_tokens` are the
/// reference words (without EOS); `target_vocab` maps ids to words.
ErrorCounts context_selection_errors(const ForcedDecoding& forced, const Sentence& source,
                                     const Sentence& reference_tokens, std::span<const std::string> target_vocab,
                                     const PmiTable& bilingual, const PmiTable& monolingual);

/// Streaming count/mean/variance (population) with an exact merge.
class RunningMoments {
 public:
  void add(double x);
  void merge(const RunningMoments& other);
  std::size_t count() const { return count_; }
  double mean() const { return mean_; }
  double variance() const { return count_ ? m2_ / static_cast<double>(count_) : 0.0; }

 private:
  std::size_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct ParallelIds {
  std::vector<int> src;
  std::vector<int> tgt;
};

/// Moments of every gate component over all layers and non-padding target
/// positions of the corpus. Throws ModeError for BASELINE models.
RunningMoments gate_statistics(const Model& model, const std::vector<ParallelIds>& corpus);

/// Moments of the gate components recorded in one forced decoding.
RunningMoments gate_moments(const ForcedDecoding& forced);

/// Number of worker threads for evaluation, from GATED_NMT_THREADS (default 1).
std::size_t evaluation_threads();

/// Runs fn(i) for i in [0, n) across up to `threads` threads.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace gnmt

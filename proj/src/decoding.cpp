#include "gnmt/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "gnmt/error.hpp"

namespace gnmt {

double length_normalized_score(double logprob, std::size_t length, double alpha) {
  return logprob / std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

std::size_t generation_limit(const Model& model, std::size_t src_len, std::size_t requested) {
  const std::size_t want = requested ? requested : 2 * src_len + 10;
  return std::min(want, model.config().max_len);
}

// Encoder output replicated `copies` times along the batch axis.
Tensor replicate(const Tensor& encoded, std::size_t copies) {
  const auto data = encoded.data();
  std::vector<double> out;
  out.reserve(data.size() * copies);
  for (std::size_t c = 0; c < copies; ++c) out.insert(out.end(), data.begin(), data.end());
  return Tensor::from_data({copies, encoded.dim(1), encoded.dim(2)}, std::move(out));
}

IdBatch replicate(const IdBatch& src, std::size_t copies) {
  IdBatch out;
  out.batch = copies;
  out.len = src.len;
  for (std::size_t c = 0; c < copies; ++c) {
    out.ids.insert(out.ids.end(), src.ids.begin(), src.ids.end());
    out.mask.insert(out.mask.end(), src.mask.begin(), src.mask.end());
  }
  return out;
}

// log-softmax of logits row `row` at the given position.
std::vector<double> log_softmax_row(const Tensor& logits, std::size_t b, std::size_t pos) {
  const std::size_t len = logits.dim(1), vocab = logits.dim(2);
  const double* row = logits.data().data() + (b * len + pos) * vocab;
  const double mx = *std::max_element(row, row + vocab);
  double z = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(vocab);
  for (std::size_t j = 0; j < vocab; ++j) out[j] = row[j] - log_z;
  return out;
}

bool generatable(std::size_t id) { return id != static_cast<std::size_t>(kPadId) && id != static_cast<std::size_t>(kBosId); }

std::vector<int> with_bos(const std::vector<int>& tokens) {
  std::vector<int> in{kBosId};
  in.insert(in.end(), tokens.begin(), tokens.end());
  return in;
}

}  // namespace

Hypothesis greedy_decode(const Model& model, const std::vector<int>& src, std::size_t max_len) {
  NoGradGuard no_grad;
  const IdBatch src_batch = IdBatch::from_sequences({src});
  const Tensor encoded = model.encode(src_batch);
  const std::size_t limit = generation_limit(model, src.size(), max_len);
  Hypothesis hyp;
  while (hyp.tokens.size() < limit) {
    const IdBatch tgt_in = IdBatch::from_sequences({with_bos(hyp.tokens)});
    const ForwardOutput out = model.decode(encoded, src_batch, tgt_in);
    const auto lp = log_softmax_row(out.logits, 0, tgt_in.len - 1);
    std::size_t best = 0;
    bool have = false;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (!generatable(v)) continue;
      if (!have || lp[v] > lp[best]) {
        best = v;
        have = true;
      }
    }
    hyp.tokens.push_back(static_cast<int>(best));
    hyp.logprob += lp[best];
    if (static_cast<int>(best) == kEosId) {
      hyp.finished = true;
      break;
    }
  }
  return hyp;
}

Hypothesis beam_search(const Model& model, const std::vector<int>& src, const BeamOptions& options) {
  if (options.beam_size == 0) throw ContractError("beam size must be positive");
  NoGradGuard no_grad;
  const IdBatch src_batch = IdBatch::from_sequences({src});
  const Tensor encoded = model.encode(src_batch);
  const std::size_t limit = generation_limit(model, src.size(), options.max_len);
  const std::size_t beam = options.beam_size;

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;

  struct Candidate {
    double score;
    double step_logprob;
    std::size_t hyp;
    int token;
  };

  for (std::size_t step = 0; step < limit && !live.empty() && finished.size() < beam; ++step) {
    std::vector<std::vector<int>> inputs;
    for (const auto& h : live) inputs.push_back(with_bos(h.tokens));
    const IdBatch tgt_in = IdBatch::from_sequences(inputs);
    const ForwardOutput out = model.decode(replicate(encoded, live.size()), replicate(src_batch, live.size()), tgt_in);

    std::vector<Candidate> candidates;
    std::vector<std::vector<double>> lps(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      lps[h] = log_softmax_row(out.logits, h, step);
      for (std::size_t v = 0; v < lps[h].size(); ++v) {
        if (generatable(v)) candidates.push_back({live[h].logprob + lps[h][v], lps[h][v], h, static_cast<int>(v)});
      }
    }
    const std::size_t keep = std::min(candidates.size(), 2 * beam);
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        // Within one hypothesis rank by the step score itself, so
                        // rounding in the running sum cannot reorder tokens.
                        if (a.hyp == b.hyp && a.step_logprob != b.step_logprob) {
                          return a.step_logprob > b.step_logprob;
                        }
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t r = 0; r < keep && next.size() < beam; ++r) {
      const Candidate& c = candidates[r];
      Hypothesis h = live[c.hyp];
      h.tokens.push_back(c.token);
      h.logprob += lps[c.hyp][static_cast<std::size_t>(c.token)];
      if (c.token == kEosId) {
        // Only top-ranked endings are accepted as finished.
        if (r < beam) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  const auto& pool = finished.empty() ? live : finished;
  if (pool.empty()) return Hypothesis{};
  std::size_t best = 0;
  double best_score = length_normalized_score(pool[0].logprob, pool[0].tokens.size(), options.alpha);
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double s = length_normalized_score(pool[i].logprob, pool[i].tokens.size(), options.alpha);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return pool[best];
}

double score_tokens(const Model& model, const std::vector<int>& src, const std::vector<int>& tokens) {
  if (tokens.empty()) return 0.0;
  NoGradGuard no_grad;
  std::vector<int> in{kBosId};
  in.insert(in.end(), tokens.begin(), tokens.end() - 1);
  const ForwardOutput out = model.forward(IdBatch::from_sequences({src}), IdBatch::from_sequences({in}));
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    total += log_softmax_row(out.logits, 0, i)[static_cast<std::size_t>(tokens[i])];
  }
  return total;
}

ForcedDecoding forced_decode(const Model& model, const std::vector<int>& src, const std::vector<int>& tgt) {
  NoGradGuard no_grad;
  ForcedDecoding fd;
  fd.reference = tgt;
  fd.reference.push_back(kEosId);
  const ForwardOutput out = model.forward(IdBatch::from_sequences({src}), IdBatch::from_sequences({with_bos(tgt)}));
  const std::size_t vocab = out.logits.dim(2);
  for (std::size_t i = 0; i < fd.reference.size(); ++i) {
    const auto lp = log_softmax_row(out.logits, 0, i);
    const int ref = fd.reference[i];
    if (ref < 0 || static_cast<std::size_t>(ref) >= vocab) {
      throw BoundsError("reference id " + std::to_string(ref) + " outside target vocabulary");
    }
    std::size_t best = 0;
    for (std::size_t v = 1; v < vocab; ++v) {
      if (lp[v] > lp[best]) best = v;
    }
    fd.argmax.push_back(static_cast<int>(best));
    fd.ref_logprob.push_back(lp[static_cast<std::size_t>(ref)]);
    fd.argmax_logprob.push_back(lp[best]);
  }
  fd.gate_dim = model.config().model_dim;
  for (const auto& z : out.gates) {
    const auto data = z.data();
    fd.gates.emplace_back(data.begin(), data.end());
  }
  return fd;
}

void ErrorCounts::add(const ErrorCounts& other) {
  tokens += other.tokens;
  forced_errors += other.forced_errors;
  selection_errors += other.selection_errors;
}

ErrorReport make_error_report(const ErrorCounts& counts) {
  ErrorReport r;
  r.token_count = counts.tokens;
  if (counts.tokens > 0) {
    r.fer = static_cast<double>(counts.forced_errors) / static_cast<double>(counts.tokens);
    r.cer = static_cast<double>(counts.selection_errors) / static_cast<double>(counts.tokens);
  }
  if (counts.forced_errors > 0) {
    r.ce_over_fe = static_cast<double>(counts.selection_errors) / static_cast<double>(counts.forced_errors);
  }
  return r;
}

ErrorCounts context_selection_errors(const ForcedDecoding& forced, const Sentence& source,
                                     const Sentence& reference_tokens, std::span<const std::string> target_vocab,
                                     const PmiTable& bilingual, const PmiTable& monolingual) {
  if (reference_tokens.size() + 1 != forced.size()) {
    throw AlignmentError("reference has " + std::to_string(reference_tokens.size()) + " tokens but forced decoding has " +
                         std::to_string(forced.size()) + " positions");
  }
  ErrorCounts counts;
  counts.tokens = forced.size();
  for (std::size_t i = 0; i < forced.size(); ++i) {
    if (!forced.is_error(i)) continue;
    ++counts.forced_errors;
    const auto predicted = static_cast<std::size_t>(forced.argmax[i]);
    if (predicted >= target_vocab.size()) throw BoundsError("argmax id outside the target vocabulary");
    const std::string& ref_word =
        i < reference_tokens.size() ? reference_tokens[i] : target_vocab[static_cast<std::size_t>(kEosId)];
    const std::span<const std::string> prefix(reference_tokens.data(), i);
    const int ref_label = label_token(ref_word, source, prefix, bilingual, monolingual).label;
    const int hyp_label = label_token(target_vocab[predicted], source, prefix, bilingual, monolingual).label;
    if (ref_label != hyp_label) ++counts.selection_errors;
  }
  return counts;
}

void RunningMoments::add(double x) {
  ++count_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_ += delta * (x - mean_);
}

void RunningMoments::merge(const RunningMoments& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  const double n1 = static_cast<double>(count_), n2 = static_cast<double>(other.count_);
  const double delta = other.mean_ - mean_;
  const double n = n1 + n2;
  mean_ += delta * n2 / n;
  m2_ += other.m2_ + delta * delta * n1 * n2 / n;
  count_ += other.count_;
}

RunningMoments gate_moments(const ForcedDecoding& forced) {
  RunningMoments m;
  for (const auto& layer : forced.gates) {
    for (double v : layer) m.add(v);
  }
  return m;
}

RunningMoments gate_statistics(const Model& model, const std::vector<ParallelIds>& corpus) {
  if (model.config().gate_mode != GateMode::kGated) throw ModeError("gate statistics need a GATED model");
  std::vector<RunningMoments> per_sentence(corpus.size());
  parallel_for(corpus.size(), evaluation_threads(), [&](std::size_t i) {
    per_sentence[i] = gate_moments(forced_decode(model, corpus[i].src, corpus[i].tgt));
  });
  RunningMoments total;
  for (const auto& m : per_sentence) total.merge(m);
  return total;
}

std::size_t evaluation_threads() {
  const char* env = std::getenv("GATED_NMT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    throw ConfigError(std::string("GATED_NMT_THREADS must be a positive integer, got '") + env + "'");
  }
  return static_cast<std::size_t>(v);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace gnmt

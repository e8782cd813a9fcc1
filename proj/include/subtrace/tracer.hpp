#pragma once

// Trigger tracing: beam search over subsequences of the candidate region
// of the original query, scored by estimated association against a
// perturbation corpus, plus an exhaustive-enumeration reference tracer.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "subtrace/assoc.hpp"
#include "subtrace/parallel.hpp"
#include "subtrace/perturb.hpp"
#include "subtrace/seq.hpp"

namespace subtrace {

// Raised when a corpus does not belong to the prompt it is used with.
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_corpus_match(const PerturbationCorpus& corpus, const TokenSeq& prompt,
                                 const PromptTemplate& prompt_template) {
  if (corpus.origin_query != prompt)
    throw ConsistencyError("corpus was built from a different prompt");
  if (corpus.prompt_template.prefix != prompt_template.prefix ||
      corpus.prompt_template.suffix != prompt_template.suffix)
    throw ConsistencyError("corpus was built with a different prompt template");
}

struct TraceParams {
  SubSeq target;
  std::size_t beam_width = 20;
  std::size_t max_len = 0;  // 0 = up to the candidate region length
  std::size_t min_support = 8;
  std::size_t early_stop_patience = 3;
  double lambda = 0.5;
  // Half-open subrange of the corpus origin query to search; end = 0 means
  // the full query.
  std::size_t region_begin = 0;
  std::size_t region_end = 0;
};

inline void to_json(nlohmann::json& j, const TraceParams& p) {
  j = nlohmann::json{{"target", p.target},
                     {"beam_width", p.beam_width},
                     {"max_len", p.max_len},
                     {"min_support", p.min_support},
                     {"early_stop_patience", p.early_stop_patience},
                     {"lambda", p.lambda},
                     {"region_begin", p.region_begin},
                     {"region_end", p.region_end}};
}

inline void from_json(const nlohmann::json& j, TraceParams& p) {
  p.target = j.value("target", SubSeq{});
  p.beam_width = j.value("beam_width", std::size_t{20});
  p.max_len = j.value("max_len", std::size_t{0});
  p.min_support = j.value("min_support", std::size_t{8});
  p.early_stop_patience = j.value("early_stop_patience", std::size_t{3});
  p.lambda = j.value("lambda", 0.5);
  p.region_begin = j.value("region_begin", std::size_t{0});
  p.region_end = j.value("region_end", std::size_t{0});
}

struct TraceCandidate {
  SubSeq content;
  std::vector<std::size_t> witness;  // leftmost positions in the region
  AssocEstimate estimate;
  double score = -std::numeric_limits<double>::infinity();
};

struct TraceResult {
  std::vector<TraceCandidate> best_per_length;  // index 0 = length 1
  std::optional<TraceCandidate> best;           // best visited overall
  std::optional<std::size_t> stopped_early_at;  // length at which search stopped
  std::string corpus_fingerprint;
  TraceParams params;
};

namespace detail {

// Candidates below minimum support score -inf: they stay comparable but
// can never displace a supported candidate.
inline double candidate_score(const AssocEstimate& est, std::size_t min_support) {
  if (est.n_cond < min_support || !est.psi)
    return -std::numeric_limits<double>::infinity();
  return *est.psi;
}

inline bool candidate_better(const TraceCandidate& a, const TraceCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.estimate.n_joint != b.estimate.n_joint) return a.estimate.n_joint > b.estimate.n_joint;
  return a.witness < b.witness;
}

}  // namespace detail

// Beam search over subsequences of the candidate region. The beam holds
// content-deduplicated candidates; each candidate is extended by region
// tokens strictly right of its leftmost witness, so every subsequence is
// reachable exactly once per content. Search stops when the per-length
// best has not improved for `early_stop_patience` consecutive lengths.
inline TraceResult sat_trace(const PerturbationCorpus& corpus, const TraceParams& params,
                             unsigned workers = 0) {
  const auto& query = corpus.origin_query;
  const std::size_t region_end = params.region_end == 0 ? query.size() : params.region_end;
  if (params.region_begin >= region_end || region_end > query.size())
    throw std::invalid_argument("sat_trace: bad candidate region");
  if (params.beam_width < 1) throw std::invalid_argument("sat_trace: beam width must be >= 1");
  if (params.target.empty()) throw std::invalid_argument("sat_trace: empty target");
  if (params.lambda < 0) throw std::invalid_argument("sat_trace: lambda must be >= 0");

  const SubSeq region(query.begin() + static_cast<std::ptrdiff_t>(params.region_begin),
                      query.begin() + static_cast<std::ptrdiff_t>(region_end));
  const std::size_t region_len = region.size();
  const std::size_t max_len =
      params.max_len == 0 ? region_len : std::min(params.max_len, region_len);

  TraceResult result;
  result.params = params;
  result.corpus_fingerprint = corpus_fingerprint(corpus);

  auto score_contents = [&](const std::vector<SubSeq>& contents) {
    auto estimates = parallel_map<AssocEstimate>(contents.size(), workers, [&](std::size_t i) {
      return estimate_psi(corpus, contents[i], params.target, params.lambda, 1);
    });
    std::vector<TraceCandidate> out(contents.size());
    for (std::size_t i = 0; i < contents.size(); ++i) {
      out[i].content = contents[i];
      out[i].witness = *match_positions(contents[i], region);
      out[i].estimate = std::move(estimates[i]);
      out[i].score = detail::candidate_score(out[i].estimate, params.min_support);
    }
    return out;
  };

  // Length 1: every distinct region token.
  std::vector<SubSeq> contents;
  {
    std::set<SubSeq> seen;
    for (TokenId t : region) {
      SubSeq c{t};
      if (seen.insert(c).second) contents.push_back(std::move(c));
    }
  }

  std::vector<TraceCandidate> beam;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t stale_lengths = 0;

  for (std::size_t len = 1; len <= max_len; ++len) {
    if (len > 1) {
      std::set<SubSeq> seen;
      std::vector<SubSeq> extended;
      for (const auto& cand : beam) {
        for (std::size_t pos = cand.witness.back() + 1; pos < region_len; ++pos) {
          SubSeq next = cand.content;
          next.push_back(region[pos]);
          if (seen.insert(next).second) extended.push_back(std::move(next));
        }
      }
      contents = std::move(extended);
    }
    if (contents.empty()) break;

    std::vector<TraceCandidate> scored = score_contents(contents);
    std::sort(scored.begin(), scored.end(), detail::candidate_better);
    if (scored.size() > params.beam_width) scored.resize(params.beam_width);
    beam = std::move(scored);

    result.best_per_length.push_back(beam.front());
    if (!result.best || detail::candidate_better(beam.front(), *result.best))
      result.best = beam.front();

    if (beam.front().score > best_score) {
      best_score = beam.front().score;
      stale_lengths = 0;
    } else {
      ++stale_lengths;
      if (stale_lengths >= params.early_stop_patience) {
        result.stopped_early_at = len;
        break;
      }
    }
  }
  return result;
}

// Convenience entry point that first verifies the corpus belongs to
// (prompt, template).
inline TraceResult sat_trace(const TokenSeq& prompt, const PromptTemplate& prompt_template,
                             const PerturbationCorpus& corpus, const TraceParams& params,
                             unsigned workers = 0) {
  require_corpus_match(corpus, prompt, prompt_template);
  return sat_trace(corpus, params, workers);
}

// Exhaustive reference: scores every distinct subsequence of the region up
// to max_len. Fails loudly rather than silently truncating.
inline TraceResult brute_force_trace(const PerturbationCorpus& corpus,
                                     const TraceParams& params, std::size_t cap = 2'000'000,
                                     unsigned workers = 0) {
  const auto& query = corpus.origin_query;
  const std::size_t region_end = params.region_end == 0 ? query.size() : params.region_end;
  if (params.region_begin >= region_end || region_end > query.size())
    throw std::invalid_argument("brute_force_trace: bad candidate region");
  if (params.target.empty()) throw std::invalid_argument("brute_force_trace: empty target");
  if (params.lambda < 0) throw std::invalid_argument("brute_force_trace: lambda must be >= 0");

  const SubSeq region(query.begin() + static_cast<std::ptrdiff_t>(params.region_begin),
                      query.begin() + static_cast<std::ptrdiff_t>(region_end));
  const std::size_t max_len =
      params.max_len == 0 ? region.size() : std::min(params.max_len, region.size());

  auto enumerated = enumerate_subsequences(region, max_len, cap);
  if (enumerated.truncated)
    throw std::runtime_error("brute_force_trace: candidate count exceeds cap");

  TraceResult result;
  result.params = params;
  result.corpus_fingerprint = corpus_fingerprint(corpus);

  auto candidates =
      parallel_map<TraceCandidate>(enumerated.items.size(), workers, [&](std::size_t i) {
        TraceCandidate cand;
        cand.content = enumerated.items[i];
        cand.witness = *match_positions(cand.content, region);
        cand.estimate = estimate_psi(corpus, cand.content, params.target, params.lambda, 1);
        cand.score = detail::candidate_score(cand.estimate, params.min_support);
        return cand;
      });

  result.best_per_length.assign(max_len, TraceCandidate{});
  std::vector<bool> filled(max_len, false);
  for (auto& cand : candidates) {
    const std::size_t idx = cand.content.size() - 1;
    if (!filled[idx] || detail::candidate_better(cand, result.best_per_length[idx])) {
      result.best_per_length[idx] = cand;
      filled[idx] = true;
    }
    if (!result.best || detail::candidate_better(cand, *result.best)) result.best = cand;
  }
  while (!result.best_per_length.empty() && !filled[result.best_per_length.size() - 1])
    result.best_per_length.pop_back();
  return result;
}

// ---------------------------------------------------------------------------
// Reporting: "subtrace-trace/1".

inline void to_json(nlohmann::json& j, const TraceCandidate& c) {
  j = nlohmann::json{{"content", c.content}, {"witness", c.witness},
                     {"estimate", c.estimate}};
  if (std::isfinite(c.score)) j["score"] = c.score;
  else j["score"] = nullptr;
}

inline void to_json(nlohmann::json& j, const TraceResult& r) {
  j = nlohmann::json{{"schema", "subtrace-trace/1"},
                     {"target", r.params.target},
                     {"beam_width", r.params.beam_width},
                     {"min_support", r.params.min_support},
                     {"lambda", r.params.lambda},
                     {"corpus_fingerprint", r.corpus_fingerprint},
                     {"best_per_length", r.best_per_length}};
  if (r.best) j["best"] = *r.best;
  else j["best"] = nullptr;
  if (r.stopped_early_at) j["stopped_early_at"] = *r.stopped_early_at;
  else j["stopped_early_at"] = nullptr;
}

// Plain table for terminal output; surfaces resolved through the given
// lookup when available, token ids otherwise.
inline std::string format_trace_table(
    const TraceResult& r,
    const std::function<std::string(TokenId)>& surface = nullptr) {
  std::ostringstream out;
  out << "len  psi        support  trigger\n";
  for (const auto& cand : r.best_per_length) {
    out << std::left << std::setw(5) << cand.content.size();
    if (std::isfinite(cand.score))
      out << std::setw(11) << std::setprecision(4) << std::fixed << cand.score;
    else
      out << std::setw(11) << "low-supp";
    out << std::setw(9) << cand.estimate.n_cond;
    for (std::size_t i = 0; i < cand.content.size(); ++i) {
      if (i) out << ' ';
      if (surface) out << surface(cand.content[i]);
      else out << cand.content[i];
    }
    out << '\n';
  }
  if (r.stopped_early_at)
    out << "(stopped early at length " << *r.stopped_early_at << ")\n";
  return out.str();
}

}  // namespace subtrace

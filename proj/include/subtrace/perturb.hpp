#pragma once

// Perturbed-input corpora: mask-and-refill with top-k embedding neighbors,
// random refill, padding insertion, and oracle-backed fill/compose modes.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "subtrace/embed.hpp"
#include "subtrace/parallel.hpp"
#include "subtrace/rng.hpp"
#include "subtrace/seq.hpp"
#include "subtrace/sha256.hpp"

namespace subtrace {

// Verbatim oracle prompts for the gpt-m / gpt-t evaluation modes.
inline constexpr const char* kGptMaskFillPrompt =
    "Fill in the blanks to form a coherent sentence. The answer can be random "
    "and does not have to be factual. All the non-masked tokens need to be "
    "kept in order.";
inline constexpr const char* kGptTokenComposePrompt =
    "Use the following tokens to draft a creative and uncommon sentence. Make "
    "sure that all the tokens need to be included and it is in the original "
    "order.";
inline constexpr const char* kDefaultMaskSurface = "<mask>";

struct MaskedSlot {
  bool masked = false;
  // Original token for mask-in-place slots; kUnknown (-1) for inserted
  // padding slots that never had an original token.
  TokenId token = -1;
};

struct MaskedSeq {
  std::vector<MaskedSlot> slots;
  TokenSeq origin;

  std::size_t mask_count() const {
    std::size_t n = 0;
    for (const auto& s : slots) n += s.masked ? 1 : 0;
    return n;
  }

  TokenSeq kept_tokens() const {
    TokenSeq out;
    for (const auto& s : slots)
      if (!s.masked) out.push_back(s.token);
    return out;
  }
};

enum class PerturbMode {
  kTopkRefill,
  kBertFill,
  kRandFill,
  kGptMaskFill,
  kGptTokenCompose,
};

inline std::string to_string(PerturbMode m) {
  switch (m) {
    case PerturbMode::kTopkRefill: return "topk-refill";
    case PerturbMode::kBertFill: return "bert-fill";
    case PerturbMode::kRandFill: return "rand-fill";
    case PerturbMode::kGptMaskFill: return "gpt-mask-fill";
    case PerturbMode::kGptTokenCompose: return "gpt-token-compose";
  }
  return "?";
}

inline PerturbMode perturb_mode_from_string(const std::string& s) {
  if (s == "topk-refill") return PerturbMode::kTopkRefill;
  if (s == "bert-fill") return PerturbMode::kBertFill;
  if (s == "rand-fill") return PerturbMode::kRandFill;
  if (s == "gpt-mask-fill") return PerturbMode::kGptMaskFill;
  if (s == "gpt-token-compose") return PerturbMode::kGptTokenCompose;
  throw std::invalid_argument("unknown perturb mode: " + s);
}

struct PerturbSpec {
  PerturbMode mode = PerturbMode::kTopkRefill;
  double mask_prob = 0.5;
  std::size_t top_k = 5;
  std::size_t corpus_size = 512;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const PerturbSpec& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)},
                     {"mask_prob", s.mask_prob},
                     {"top_k", s.top_k},
                     {"corpus_size", s.corpus_size},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, PerturbSpec& s) {
  s.mode = perturb_mode_from_string(j.value("mode", "topk-refill"));
  s.mask_prob = j.value("mask_prob", 0.5);
  s.top_k = j.value("top_k", std::size_t{5});
  s.corpus_size = j.value("corpus_size", std::size_t{512});
  s.seed = j.value("seed", std::uint64_t{0});
}

// System/chat scaffold around the query; perturbation never touches it.
struct PromptTemplate {
  TokenSeq prefix;
  TokenSeq suffix;

  TokenSeq render(const TokenSeq& query) const {
    TokenSeq out = prefix;
    out.insert(out.end(), query.begin(), query.end());
    out.insert(out.end(), suffix.begin(), suffix.end());
    return out;
  }
};

inline void to_json(nlohmann::json& j, const PromptTemplate& t) {
  j = nlohmann::json{{"prefix", t.prefix}, {"suffix", t.suffix}};
}

inline void from_json(const nlohmann::json& j, PromptTemplate& t) {
  t.prefix = j.value("prefix", TokenSeq{});
  t.suffix = j.value("suffix", TokenSeq{});
}

// Each position independently masked with probability p.
inline MaskedSeq mask_tokens(const TokenSeq& seq, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("mask_tokens: p outside [0,1]");
  MaskedSeq out;
  out.origin = seq;
  out.slots.reserve(seq.size());
  for (TokenId t : seq) out.slots.push_back({rng.next_bernoulli(p), t});
  return out;
}

// Each mask replaced by a uniform draw from the original token's top-k
// embedding neighbors.
inline TokenSeq refill_topk(const MaskedSeq& m, const EmbedTable& table, std::size_t k,
                            Rng& rng) {
  TokenSeq out;
  out.reserve(m.slots.size());
  for (const auto& slot : m.slots) {
    if (!slot.masked) {
      out.push_back(slot.token);
      continue;
    }
    if (slot.token < 0 || static_cast<std::size_t>(slot.token) >= table.vocab_size)
      throw std::out_of_range("refill_topk: masked slot's original token outside vocabulary");
    auto candidates = top_k_similar(table, slot.token, k);
    out.push_back(candidates[rng.next_below(candidates.size())]);
  }
  return out;
}

// Each mask replaced by a uniform token outside `excluded`.
inline TokenSeq refill_random(const MaskedSeq& m, std::size_t vocab_size,
                              const std::unordered_set<TokenId>& excluded, Rng& rng) {
  std::vector<TokenId> pool;
  pool.reserve(vocab_size);
  for (std::size_t id = 0; id < vocab_size; ++id) {
    TokenId t = static_cast<TokenId>(id);
    if (!excluded.count(t)) pool.push_back(t);
  }
  if (pool.empty()) throw std::invalid_argument("refill_random: empty vocabulary pool");
  TokenSeq out;
  out.reserve(m.slots.size());
  for (const auto& slot : m.slots) {
    out.push_back(slot.masked ? pool[rng.next_below(pool.size())] : slot.token);
  }
  return out;
}

// A MaskedSeq of length target_len whose non-mask slots spell `sub` in
// order; the mask-position set is uniform over all C(target_len, pad)
// choices.
inline MaskedSeq insert_padding(const SubSeq& sub, std::size_t target_len, Rng& rng) {
  if (target_len < sub.size())
    throw std::invalid_argument("insert_padding: target_len shorter than subsequence");
  MaskedSeq out;
  out.origin = sub;
  out.slots.assign(target_len, MaskedSlot{true, kUnknownToken});
  auto kept = rng.next_subset(target_len, sub.size());
  for (std::size_t i = 0; i < kept.size(); ++i) out.slots[kept[i]] = {false, sub[i]};
  return out;
}

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fills every masked slot; must preserve kept tokens verbatim and in order.
class FillOracle {
 public:
  virtual ~FillOracle() = default;
  virtual TokenSeq fill(const MaskedSeq& m) = 0;
};

// Produces a sequence containing the given tokens as a subsequence.
class ComposeOracle {
 public:
  virtual ~ComposeOracle() = default;
  virtual TokenSeq compose(const SubSeq& tokens) = 0;
};

// Kept-token preservation is enforced here, not trusted from the oracle:
// the reply is retried up to `retry_budget` extra times and then rejected.
inline TokenSeq fill_with_oracle(const MaskedSeq& m, FillOracle& oracle,
                                 int retry_budget = 3) {
  if (m.mask_count() == 0) return m.kept_tokens();
  const TokenSeq kept = m.kept_tokens();
  std::string last_error;
  for (int attempt = 0; attempt <= retry_budget; ++attempt) {
    TokenSeq candidate;
    try {
      candidate = oracle.fill(m);
    } catch (const std::exception& e) {
      last_error = e.what();
      continue;
    }
    if (is_subsequence(kept, candidate)) return candidate;
    last_error = "oracle reply dropped or reordered kept tokens";
  }
  throw OracleError("fill_with_oracle: rejected after retries: " + last_error);
}

inline TokenSeq compose_from_tokens(const SubSeq& sub, ComposeOracle& oracle,
                                    int retry_budget = 3) {
  std::string last_error;
  for (int attempt = 0; attempt <= retry_budget; ++attempt) {
    TokenSeq candidate;
    try {
      candidate = oracle.compose(sub);
    } catch (const std::exception& e) {
      last_error = e.what();
      continue;
    }
    if (is_subsequence(sub, candidate)) return candidate;
    last_error = "oracle reply does not contain the tokens in order";
  }
  throw OracleError("compose_from_tokens: rejected after retries: " + last_error);
}

// ---------------------------------------------------------------------------
// Corpus construction

struct CorpusEntry {
  std::size_t entry_index = 0;
  std::uint64_t seed = 0;
  TokenSeq input;   // rendered full input (template + perturbed query)
  TokenSeq output;  // generator reply
  std::vector<std::size_t> kept_origin_indices;
};

struct PerturbationCorpus {
  std::vector<CorpusEntry> entries;
  PromptTemplate prompt_template;
  TokenSeq origin_query;
  PerturbSpec spec;
  std::string generator_fingerprint;
};

// Token-level generator: rendered input + per-entry seed -> output tokens.
using TokenGenerator = std::function<TokenSeq(const TokenSeq&, std::uint64_t)>;

// Refill strategy: masked query + per-entry RNG -> perturbed query.
using RefillFn = std::function<TokenSeq(const MaskedSeq&, Rng&)>;

inline RefillFn make_topk_refill(const EmbedTable& table, std::size_t k) {
  return [&table, k](const MaskedSeq& m, Rng& rng) { return refill_topk(m, table, k, rng); };
}

inline RefillFn make_rand_fill(std::size_t vocab_size, std::unordered_set<TokenId> excluded) {
  return [vocab_size, excluded = std::move(excluded)](const MaskedSeq& m, Rng& rng) {
    return refill_random(m, vocab_size, excluded, rng);
  };
}

class CorpusBuildError : public std::runtime_error {
 public:
  CorpusBuildError(const std::string& what, std::size_t completed, std::size_t failed)
      : std::runtime_error(what), completed_entries(completed), failed_entries(failed) {}
  std::size_t completed_entries;
  std::size_t failed_entries;
};

inline std::string corpus_fingerprint(const PerturbationCorpus& corpus) {
  Sha256 h;
  nlohmann::json header{{"spec", corpus.spec},
                        {"template", corpus.prompt_template},
                        {"origin_query", corpus.origin_query},
                        {"generator", corpus.generator_fingerprint}};
  h.update(header.dump());
  for (const auto& e : corpus.entries) {
    nlohmann::json je{{"i", e.entry_index}, {"in", e.input}, {"out", e.output},
                      {"kept", e.kept_origin_indices}};
    h.update(je.dump());
  }
  return h.hex_digest();
}

// Builds M entries; entry i derives from spec.seed and i, so results are
// deterministic regardless of worker scheduling. Generator replies for
// identical inputs are shared through a content-hash cache.
inline PerturbationCorpus build_perturbation_corpus(
    const TokenSeq& query, const PromptTemplate& prompt_template, const PerturbSpec& spec,
    const RefillFn& refill, const TokenGenerator& generate, unsigned workers = 0) {
  if (spec.corpus_size < 1)
    throw std::invalid_argument("build_perturbation_corpus: corpus_size must be >= 1");

  PerturbationCorpus corpus;
  corpus.prompt_template = prompt_template;
  corpus.origin_query = query;
  corpus.spec = spec;
  corpus.entries.resize(spec.corpus_size);

  std::mutex cache_mutex;
  std::unordered_map<std::string, TokenSeq> reply_cache;
  std::atomic<std::size_t> failures{0};
  std::mutex error_mutex;
  std::string first_error;

  parallel_chunks(spec.corpus_size, workers, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        Rng rng = Rng::substream(spec.seed, i);
        MaskedSeq masked = mask_tokens(query, spec.mask_prob, rng);
        TokenSeq perturbed_query = refill(masked, rng);
        CorpusEntry entry;
        entry.entry_index = i;
        entry.seed = spec.seed + i;
        entry.input = prompt_template.render(perturbed_query);
        for (std::size_t pos = 0; pos < masked.slots.size(); ++pos)
          if (!masked.slots[pos].masked) entry.kept_origin_indices.push_back(pos);

        nlohmann::json key_json{{"input", entry.input}};
        const std::string key = Sha256::hash_hex(key_json.dump());
        {
          std::lock_guard lock(cache_mutex);
          auto it = reply_cache.find(key);
          if (it != reply_cache.end()) {
            entry.output = it->second;
            corpus.entries[i] = std::move(entry);
            continue;
          }
        }
        TokenSeq reply = generate(entry.input, entry.seed);
        {
          std::lock_guard lock(cache_mutex);
          reply_cache.emplace(key, reply);
        }
        entry.output = std::move(reply);
        corpus.entries[i] = std::move(entry);
      } catch (const std::exception& e) {
        failures.fetch_add(1);
        std::lock_guard lock(error_mutex);
        if (first_error.empty()) first_error = e.what();
      }
    }
  });

  if (failures.load() > 0) {
    throw CorpusBuildError("corpus build aborted: " + first_error +
                               " (" + std::to_string(failures.load()) + " entries failed)",
                           spec.corpus_size - failures.load(), failures.load());
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Persistence: "subtrace-corpus/1", one JSON record per line, header first.

inline void save_corpus(const PerturbationCorpus& corpus, std::ostream& out) {
  nlohmann::json header{{"schema", "subtrace-corpus/1"},
                        {"spec", corpus.spec},
                        {"prompt_template", corpus.prompt_template},
                        {"origin_query", corpus.origin_query},
                        {"generator_fingerprint", corpus.generator_fingerprint}};
  out << header.dump() << '\n';
  for (const auto& e : corpus.entries) {
    nlohmann::json je{{"entry_index", e.entry_index},
                      {"seed", e.seed},
                      {"input_token_ids", e.input},
                      {"kept_origin_indices", e.kept_origin_indices},
                      {"output_token_ids", e.output},
                      {"generator_fingerprint", corpus.generator_fingerprint}};
    out << je.dump() << '\n';
  }
}

inline void save_corpus(const PerturbationCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path.string());
  save_corpus(corpus, out);
}

inline PerturbationCorpus load_corpus(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("corpus file: empty");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("schema", "") != "subtrace-corpus/1")
    throw std::runtime_error("corpus file: unexpected schema");
  PerturbationCorpus corpus;
  corpus.spec = header.at("spec").get<PerturbSpec>();
  corpus.prompt_template = header.at("prompt_template").get<PromptTemplate>();
  corpus.origin_query = header.at("origin_query").get<TokenSeq>();
  corpus.generator_fingerprint = header.value("generator_fingerprint", "");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json je = nlohmann::json::parse(line);
    CorpusEntry e;
    e.entry_index = je.at("entry_index").get<std::size_t>();
    e.seed = je.at("seed").get<std::uint64_t>();
    e.input = je.at("input_token_ids").get<TokenSeq>();
    e.kept_origin_indices = je.at("kept_origin_indices").get<std::vector<std::size_t>>();
    e.output = je.at("output_token_ids").get<TokenSeq>();
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

inline PerturbationCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path.string());
  return load_corpus(in);
}

}  // namespace subtrace

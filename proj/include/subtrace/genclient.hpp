#pragma once

// Text-generation backends: an OpenAI-compatible HTTP client with an
// on-disk response cache, and a deterministic programmable rule generator
// whose output-subsequence probabilities are computable in closed form.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "subtrace/rng.hpp"
#include "subtrace/seq.hpp"
#include "subtrace/sha256.hpp"

namespace subtrace {

struct GeneratorSpec {
  std::string endpoint = "mock";  // base URL, or "mock"
  std::string api = "completions";  // "completions" | "chat"
  std::string model_name;
  double temperature = 1.0;
  int max_new_tokens = 256;
  std::vector<std::string> stop;
  std::optional<std::int64_t> request_seed;
  int retry_budget = 2;
  double rate_limit = 0.0;  // requests/second; 0 = unlimited
};

inline void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = nlohmann::json{{"endpoint", s.endpoint},
                     {"api", s.api},
                     {"model_name", s.model_name},
                     {"temperature", s.temperature},
                     {"max_new_tokens", s.max_new_tokens},
                     {"stop", s.stop},
                     {"retry_budget", s.retry_budget},
                     {"rate_limit", s.rate_limit}};
  if (s.request_seed) j["request_seed"] = *s.request_seed;
}

inline void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  s.endpoint = j.value("endpoint", "mock");
  s.api = j.value("api", "completions");
  s.model_name = j.value("model_name", "");
  s.temperature = j.value("temperature", 1.0);
  s.max_new_tokens = j.value("max_new_tokens", 256);
  s.stop = j.value("stop", std::vector<std::string>{});
  if (j.contains("request_seed")) s.request_seed = j["request_seed"].get<std::int64_t>();
  s.retry_budget = j.value("retry_budget", 2);
  s.rate_limit = j.value("rate_limit", 0.0);
}

// Canonical serialization of (spec, prompt); its SHA-256 is the cache key.
inline std::string canonical_request(const GeneratorSpec& spec, const std::string& prompt) {
  nlohmann::json j = spec;
  j["prompt"] = prompt;
  return j.dump();
}

inline std::string cache_key(const GeneratorSpec& spec, const std::string& prompt) {
  return Sha256::hash_hex(canonical_request(spec, prompt));
}

// Content-addressed response cache. Writes go through a temp file plus
// rename so concurrent writers never expose partial entries.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  static ResponseCache from_env() {
    if (const char* d = std::getenv("SUBTRACE_CACHE_DIR")) return ResponseCache(d);
    return ResponseCache();
  }

  bool enabled() const { return !dir_.empty(); }

  std::optional<std::string> get(const std::string& key) const {
    if (!enabled()) return std::nullopt;
    std::ifstream in(entry_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  void put(const std::string& key, const std::string& value) const {
    if (!enabled()) return;
    auto final_path = entry_path(key);
    auto tmp_path = final_path;
    tmp_path += "." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".tmp";
    {
      std::ofstream out(tmp_path, std::ios::binary);
      out << value;
    }
    std::filesystem::rename(tmp_path, final_path);
  }

  struct Stats {
    std::size_t entries = 0;
    std::uintmax_t bytes = 0;
  };

  Stats stats() const {
    Stats st;
    if (!enabled() || !std::filesystem::exists(dir_)) return st;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (!e.is_regular_file() || e.path().extension() == ".tmp") continue;
      ++st.entries;
      st.bytes += e.file_size();
    }
    return st;
  }

  std::size_t gc_older_than(std::chrono::seconds retention) const {
    if (!enabled() || !std::filesystem::exists(dir_)) return 0;
    std::size_t removed = 0;
    auto cutoff = std::filesystem::file_time_type::clock::now() - retention;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (!e.is_regular_file()) continue;
      if (e.last_write_time() < cutoff) {
        std::filesystem::remove(e.path());
        ++removed;
      }
    }
    return removed;
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path entry_path(const std::string& key) const { return dir_ / key; }

  std::filesystem::path dir_;
};

struct TransportResult {
  int status = 0;
  std::string body;
  bool transport_ok = false;
};

// Injection point for tests; production transport lives in http_transport.hpp.
using Transport = std::function<TransportResult(const std::string& url_base,
                                                const std::string& path,
                                                const std::string& body)>;

class GenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// OpenAI-compatible completion client with caching, retry with exponential
// backoff, and a global per-client rate limit.
class GenClient {
 public:
  GenClient(Transport transport, ResponseCache cache)
      : transport_(std::move(transport)), cache_(std::move(cache)) {}

  std::string generate(const GeneratorSpec& spec, const std::string& rendered_prompt) {
    const std::string key = cache_key(spec, rendered_prompt);
    if (auto hit = cache_.get(key)) return *hit;

    const std::string body = request_body(spec, rendered_prompt);
    const std::string path = spec.api == "chat" ? "/v1/chat/completions" : "/v1/completions";
    int attempts = spec.retry_budget + 1;
    std::string last_error;
    for (int attempt = 0; attempt < attempts; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms_ << (attempt - 1)));
      }
      rate_limit_wait(spec.rate_limit);
      TransportResult res = transport_(spec.endpoint, path, body);
      if (!res.transport_ok) {
        last_error = "transport error";
        continue;
      }
      if (res.status < 200 || res.status >= 300) {
        last_error = "status " + std::to_string(res.status);
        continue;
      }
      std::string text;
      if (!parse_completion(spec, res.body, &text)) {
        last_error = "malformed response body";
        continue;
      }
      cache_.put(key, text);
      return text;
    }
    throw GenerateError("generate failed after " + std::to_string(attempts) +
                        " attempts: " + last_error);
  }

  // Test hook: shrink backoff so retry paths run fast.
  void set_backoff_ms(int ms) { backoff_ms_ = ms; }

  const ResponseCache& cache() const { return cache_; }

 private:
  std::string request_body(const GeneratorSpec& spec, const std::string& prompt) const {
    nlohmann::json j;
    j["model"] = spec.model_name;
    j["temperature"] = spec.temperature;
    j["max_tokens"] = spec.max_new_tokens;
    if (!spec.stop.empty()) j["stop"] = spec.stop;
    if (spec.request_seed) j["seed"] = *spec.request_seed;
    if (spec.api == "chat") {
      j["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
    } else {
      j["prompt"] = prompt;
    }
    return j.dump();
  }

  static bool parse_completion(const GeneratorSpec& spec, const std::string& body,
                               std::string* out) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() ||
        j["choices"].empty())
      return false;
    const auto& choice = j["choices"][0];
    if (spec.api == "chat") {
      if (!choice.contains("message") || !choice["message"].contains("content")) return false;
      *out = choice["message"]["content"].get<std::string>();
    } else {
      if (!choice.contains("text")) return false;
      *out = choice["text"].get<std::string>();
    }
    return true;
  }

  void rate_limit_wait(double requests_per_second) {
    if (requests_per_second <= 0) return;
    std::unique_lock lock(rate_mutex_);
    auto min_gap = std::chrono::duration<double>(1.0 / requests_per_second);
    auto now = std::chrono::steady_clock::now();
    if (last_request_ != std::chrono::steady_clock::time_point{}) {
      auto earliest = last_request_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(min_gap);
      if (now < earliest) {
        std::this_thread::sleep_until(earliest);
        now = earliest;
      }
    }
    last_request_ = now;
  }

  Transport transport_;
  ResponseCache cache_;
  std::mutex rate_mutex_;
  std::chrono::steady_clock::time_point last_request_;
  int backoff_ms_ = 100;
};

// ---------------------------------------------------------------------------
// Rule generator: a deterministic stand-in for an LLM whose trigger ->
// emission behavior has closed-form output-subsequence probabilities.

enum class RuleCombine { kIndependentOr, kFirstMatch };

struct EmissionRule {
  SubSeq trigger;
  SubSeq emission;
  double prob = 1.0;
};

struct RuleGenerator {
  std::vector<EmissionRule> rules;
  SubSeq base_emission;
  RuleCombine combine = RuleCombine::kIndependentOr;
};

inline void to_json(nlohmann::json& j, const EmissionRule& r) {
  j = nlohmann::json{{"trigger", r.trigger}, {"emission", r.emission}, {"prob", r.prob}};
}

inline void from_json(const nlohmann::json& j, EmissionRule& r) {
  r.trigger = j.at("trigger").get<SubSeq>();
  r.emission = j.at("emission").get<SubSeq>();
  r.prob = j.value("prob", 1.0);
}

inline void to_json(nlohmann::json& j, const RuleGenerator& g) {
  j = nlohmann::json{
      {"rules", g.rules},
      {"base_emission", g.base_emission},
      {"combine", g.combine == RuleCombine::kIndependentOr ? "independent-or" : "first-match"}};
}

inline void from_json(const nlohmann::json& j, RuleGenerator& g) {
  g.rules = j.value("rules", std::vector<EmissionRule>{});
  g.base_emission = j.value("base_emission", SubSeq{});
  const std::string combine = j.value("combine", "independent-or");
  if (combine == "independent-or") g.combine = RuleCombine::kIndependentOr;
  else if (combine == "first-match") g.combine = RuleCombine::kFirstMatch;
  else throw std::invalid_argument("RuleGenerator: unknown combine mode: " + combine);
}

// Pure function of (gen, input, seed). Triggered rules fire independently
// (independent-or) or first-triggered-only (first-match); fired emissions
// are appended in rule order; if nothing fired, base_emission is emitted.
inline TokenSeq mock_generate(const RuleGenerator& gen, const TokenSeq& input,
                              std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq out;
  bool fired_any = false;
  bool first_match_done = false;
  for (const auto& rule : gen.rules) {
    if (!is_subsequence(rule.trigger, input)) continue;
    if (gen.combine == RuleCombine::kFirstMatch && first_match_done) break;
    const bool fires = rng.next_bernoulli(rule.prob);
    if (gen.combine == RuleCombine::kFirstMatch) first_match_done = true;
    if (fires) {
      fired_any = true;
      out.insert(out.end(), rule.emission.begin(), rule.emission.end());
    }
  }
  if (!fired_any) return gen.base_emission;
  return out;
}

// Exact probability that target is a subsequence of mock_generate(gen,
// input, .) under the seed distribution, by enumeration over rule-firing
// patterns of the triggered rules.
inline double exact_output_prob(const RuleGenerator& gen, const TokenSeq& input,
                                const SubSeq& target) {
  std::vector<const EmissionRule*> triggered;
  for (const auto& rule : gen.rules) {
    if (is_subsequence(rule.trigger, input)) {
      triggered.push_back(&rule);
      if (gen.combine == RuleCombine::kFirstMatch) break;
    }
  }
  if (triggered.size() > 24)
    throw std::invalid_argument("exact_output_prob: too many triggered rules to enumerate");
  const std::size_t patterns = std::size_t{1} << triggered.size();
  double prob = 0.0;
  for (std::size_t mask = 0; mask < patterns; ++mask) {
    double p = 1.0;
    TokenSeq out;
    bool fired_any = false;
    for (std::size_t i = 0; i < triggered.size(); ++i) {
      if (mask & (std::size_t{1} << i)) {
        p *= triggered[i]->prob;
        fired_any = true;
        out.insert(out.end(), triggered[i]->emission.begin(), triggered[i]->emission.end());
      } else {
        p *= 1.0 - triggered[i]->prob;
      }
    }
    if (p == 0.0) continue;
    const TokenSeq& final_out = fired_any ? out : gen.base_emission;
    if (is_subsequence(target, final_out)) prob += p;
  }
  return prob;
}

}  // namespace subtrace

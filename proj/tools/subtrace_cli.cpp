// subtrace: trace trigger subsequences behind generator outputs.
//
// Subcommands: perturb, trace, srep, corpus-scan, theory-check, cache.
// Exit codes: 0 ok, 2 config error, 3 generator failure, 4 I/O error,
// 5 consistency error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "subtrace/assoc.hpp"
#include "subtrace/corpus_scan.hpp"
#include "subtrace/embed.hpp"
#include "subtrace/genclient.hpp"
#include "subtrace/http_transport.hpp"
#include "subtrace/oracle_adapters.hpp"
#include "subtrace/perturb.hpp"
#include "subtrace/theory.hpp"
#include "subtrace/tokenizer.hpp"
#include "subtrace/tracer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitGenerator = 3;
constexpr int kExitIo = 4;
constexpr int kExitConsistency = 5;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  subtrace::GeneratorSpec generator;
  std::optional<subtrace::RuleGenerator> mock_rules;
  subtrace::PerturbSpec perturb;
  subtrace::TraceParams trace;
  subtrace::PromptTemplate prompt_template;
  std::string tokenizer_spec;
  std::string embed_table_path;
  std::string cache_dir;
  std::string output_dir = ".";
  std::vector<subtrace::TokenId> rand_excluded;
  std::optional<subtrace::TokenId> mock_oracle_fill_token;
  nlohmann::json raw;
};

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig cfg;
  cfg.raw = j;
  try {
    if (j.contains("generator")) cfg.generator = j["generator"].get<subtrace::GeneratorSpec>();
    if (j.contains("mock_rules")) cfg.mock_rules = j["mock_rules"].get<subtrace::RuleGenerator>();
    if (j.contains("perturb")) cfg.perturb = j["perturb"].get<subtrace::PerturbSpec>();
    if (j.contains("trace")) cfg.trace = j["trace"].get<subtrace::TraceParams>();
    if (j.contains("prompt_template"))
      cfg.prompt_template = j["prompt_template"].get<subtrace::PromptTemplate>();
    cfg.tokenizer_spec = j.value("tokenizer", "");
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      cfg.embed_table_path = p.value("embed_table", "");
      cfg.cache_dir = p.value("cache_dir", "");
      cfg.output_dir = p.value("output_dir", ".");
    }
    cfg.rand_excluded = j.value("rand_excluded", std::vector<subtrace::TokenId>{});
    if (j.contains("mock_oracle_fill_token"))
      cfg.mock_oracle_fill_token = j["mock_oracle_fill_token"].get<subtrace::TokenId>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  return cfg;
}

std::unique_ptr<subtrace::Tokenizer> tokenizer_from(const RunConfig& cfg) {
  if (cfg.tokenizer_spec.empty()) throw ConfigError("config has no tokenizer spec");
  try {
    return subtrace::make_tokenizer(cfg.tokenizer_spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

subtrace::ResponseCache cache_from(const RunConfig& cfg) {
  if (!cfg.cache_dir.empty()) return subtrace::ResponseCache(cfg.cache_dir);
  return subtrace::ResponseCache::from_env();
}

// Tokens are given either as integer ids ("3 17 4") or as text run through
// the configured tokenizer.
subtrace::TokenSeq parse_tokens(const std::string& text, const subtrace::Tokenizer* tok) {
  subtrace::TokenSeq out;
  std::istringstream in(text);
  std::string word;
  bool all_numeric = true;
  std::vector<std::string> words;
  while (in >> word) {
    words.push_back(word);
    if (word.find_first_not_of("0123456789-") != std::string::npos) all_numeric = false;
  }
  if (all_numeric && !words.empty()) {
    for (const auto& w : words) out.push_back(std::stoll(w));
    return out;
  }
  if (!tok) throw ConfigError("non-numeric tokens need a configured tokenizer");
  return tok->encode(text);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_report(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report file: " + path);
  out << j.dump(2) << '\n';
}

subtrace::TokenGenerator make_generator(const RunConfig& cfg,
                                        std::shared_ptr<subtrace::GenClient>& client_out,
                                        const subtrace::Tokenizer* tok) {
  if (cfg.generator.endpoint == "mock") {
    if (!cfg.mock_rules) throw ConfigError("mock generator needs mock_rules in the config");
    subtrace::RuleGenerator rules = *cfg.mock_rules;
    return [rules](const subtrace::TokenSeq& input, std::uint64_t seed) {
      return subtrace::mock_generate(rules, input, seed);
    };
  }
  if (!tok) throw ConfigError("HTTP generator needs a configured tokenizer");
  client_out = std::make_shared<subtrace::GenClient>(subtrace::make_http_transport(),
                                                     cache_from(cfg));
  subtrace::GeneratorSpec spec = cfg.generator;
  return [client_out, spec, tok](const subtrace::TokenSeq& input, std::uint64_t) {
    return tok->encode(client_out->generate(spec, tok->decode(input)));
  };
}

std::string generator_fingerprint(const RunConfig& cfg) {
  nlohmann::json j = cfg.generator;
  if (cfg.mock_rules) j["mock_rules"] = *cfg.mock_rules;
  return subtrace::Sha256::hash_hex(j.dump());
}

int cmd_perturb(const std::string& config_path, const std::string& prompt_file,
                const std::string& out_path, unsigned workers) {
  RunConfig cfg = load_config(config_path);
  auto tok = cfg.tokenizer_spec.empty() ? nullptr : tokenizer_from(cfg);
  const subtrace::TokenSeq prompt = parse_tokens(read_text_file(prompt_file), tok.get());
  if (prompt.empty()) throw ConfigError("prompt file yields no tokens");

  subtrace::RefillFn refill;
  std::optional<subtrace::EmbedTable> table;
  switch (cfg.perturb.mode) {
    case subtrace::PerturbMode::kTopkRefill: {
      if (cfg.embed_table_path.empty() || !std::filesystem::exists(cfg.embed_table_path))
        throw ConfigError("topk-refill needs an embedding table; missing file: " +
                          cfg.embed_table_path);
      table = subtrace::load_embed_table(cfg.embed_table_path);
      refill = subtrace::make_topk_refill(*table, cfg.perturb.top_k);
      break;
    }
    case subtrace::PerturbMode::kRandFill: {
      if (!tok) throw ConfigError("rand-fill needs a tokenizer to size the vocabulary");
      std::unordered_set<subtrace::TokenId> excluded(cfg.rand_excluded.begin(),
                                                     cfg.rand_excluded.end());
      refill = subtrace::make_rand_fill(tok->vocab_size(), std::move(excluded));
      break;
    }
    default:
      throw ConfigError("corpus building supports modes topk-refill and rand-fill only");
  }

  std::shared_ptr<subtrace::GenClient> client;
  auto generate = make_generator(cfg, client, tok.get());
  auto corpus = subtrace::build_perturbation_corpus(prompt, cfg.prompt_template, cfg.perturb,
                                                    refill, generate, workers);
  corpus.generator_fingerprint = generator_fingerprint(cfg);
  subtrace::save_corpus(corpus, out_path);
  std::cout << "wrote " << corpus.entries.size() << " entries to " << out_path << "\n"
            << "corpus fingerprint " << subtrace::corpus_fingerprint(corpus) << "\n";
  return kExitOk;
}

int cmd_trace(const std::string& config_path, const std::string& corpus_path,
              const std::string& target_arg, const std::string& report_path,
              const std::string& prompt_file, unsigned workers) {
  RunConfig cfg = load_config(config_path);
  auto tok = cfg.tokenizer_spec.empty() ? nullptr : tokenizer_from(cfg);
  auto corpus = subtrace::load_corpus(std::filesystem::path(corpus_path));
  if (!prompt_file.empty()) {
    const subtrace::TokenSeq prompt = parse_tokens(read_text_file(prompt_file), tok.get());
    subtrace::require_corpus_match(corpus, prompt, cfg.prompt_template);
  }
  subtrace::TraceParams params = cfg.trace;
  if (!target_arg.empty()) params.target = parse_tokens(target_arg, tok.get());
  if (params.target.empty()) throw ConfigError("trace needs a non-empty target");

  auto result = subtrace::sat_trace(corpus, params, workers);
  nlohmann::json report = result;
  report["config"] = cfg.raw;
  if (!report_path.empty()) write_report(report_path, report);
  std::function<std::string(subtrace::TokenId)> surface;
  if (tok) surface = [&tok](subtrace::TokenId t) { return tok->surface(t); };
  std::cout << subtrace::format_trace_table(result, surface);
  return kExitOk;
}

int cmd_srep(const std::string& config_path, const std::string& trigger_arg,
             const std::string& target_arg, const std::string& report_path,
             std::size_t n_per_mode, std::size_t input_len, std::uint64_t seed) {
  RunConfig cfg = load_config(config_path);
  auto tok = cfg.tokenizer_spec.empty() ? nullptr : tokenizer_from(cfg);

  subtrace::SrepParams params;
  params.trigger = parse_tokens(trigger_arg, tok.get());
  params.target = parse_tokens(target_arg, tok.get());
  if (params.trigger.empty() || params.target.empty())
    throw ConfigError("srep needs non-empty trigger and target tokens");
  params.n_per_mode = n_per_mode;
  params.input_len = std::max(input_len, params.trigger.size());
  params.seed = seed;
  if (tok) params.vocab_size = tok->vocab_size();
  for (subtrace::TokenId t : cfg.rand_excluded) params.rand_excluded.insert(t);

  std::shared_ptr<subtrace::GenClient> client;
  auto generate = make_generator(cfg, client, tok.get());

  subtrace::SrepOracles oracles;
  std::unique_ptr<subtrace::ConstantFillOracle> mock_fill;
  std::unique_ptr<subtrace::ConstantComposeOracle> mock_compose;
  std::unique_ptr<subtrace::GenFillOracle> bert_fill, gpt_fill;
  std::unique_ptr<subtrace::GenComposeOracle> gpt_compose;
  if (cfg.mock_oracle_fill_token) {
    mock_fill = std::make_unique<subtrace::ConstantFillOracle>(*cfg.mock_oracle_fill_token);
    mock_compose =
        std::make_unique<subtrace::ConstantComposeOracle>(*cfg.mock_oracle_fill_token);
    oracles.bert = mock_fill.get();
    oracles.gpt_mask = mock_fill.get();
    oracles.gpt_compose = mock_compose.get();
  } else if (client && tok) {
    bert_fill = std::make_unique<subtrace::GenFillOracle>(*client, cfg.generator, *tok, "");
    gpt_fill = std::make_unique<subtrace::GenFillOracle>(*client, cfg.generator, *tok,
                                                         subtrace::kGptMaskFillPrompt);
    gpt_compose = std::make_unique<subtrace::GenComposeOracle>(*client, cfg.generator, *tok,
                                                               subtrace::kGptTokenComposePrompt);
    oracles.bert = bert_fill.get();
    oracles.gpt_mask = gpt_fill.get();
    oracles.gpt_compose = gpt_compose.get();
  }
  // Mock generator without mock oracles: only the rand mode is available.

  auto report = subtrace::eval_srep(params, oracles, generate);
  nlohmann::json j = report;
  j["config"] = cfg.raw;
  if (!report_path.empty()) write_report(report_path, j);
  for (const auto& m : report.modes) {
    std::cout << m.mode << ": ";
    if (m.p_cond) std::cout << *m.p_cond;
    else std::cout << "unavailable";
    std::cout << " (" << m.n_success << "/" << m.n_valid << ")\n";
  }
  if (report.s_rep) std::cout << "s_rep: " << *report.s_rep << (report.partial ? " (partial)" : "")
                              << "\n";
  return kExitOk;
}

int cmd_corpus_scan(const std::string& root, const std::string& queries_path,
                    const std::string& tokenizer_spec, std::size_t doc_window,
                    unsigned workers, const std::string& report_path) {
  auto tok = subtrace::make_tokenizer(tokenizer_spec);
  nlohmann::json qj;
  {
    std::ifstream in(queries_path);
    if (!in) throw IoError("cannot read queries file: " + queries_path);
    try {
      in >> qj;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("queries parse error: ") + e.what());
    }
  }
  std::vector<subtrace::CorpusQuery> queries;
  try {
    queries = qj.get<std::vector<subtrace::CorpusQuery>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("queries format error: ") + e.what());
  }
  if (queries.empty()) throw ConfigError("no queries given");

  const auto t0 = std::chrono::steady_clock::now();
  auto docs = subtrace::load_documents(root, *tok, doc_window);
  auto report = subtrace::scan_conditional(docs.docs, queries, workers);
  report.files_read = docs.files_read;
  report.skipped_files = docs.skipped_files;
  report.corpus_fingerprint = docs.fingerprint;
  report.bytes_scanned = docs.bytes_read;
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json j = report;
  if (!report_path.empty()) write_report(report_path, j);
  for (const auto& c : report.counts) {
    std::cout << "trigger ";
    for (auto t : c.query.trigger) std::cout << t << ' ';
    std::cout << "-> n_trigger=" << c.n_trigger << " n_joint=" << c.n_joint << " p_cond=";
    if (c.p_cond) std::cout << *c.p_cond;
    else std::cout << "undefined";
    std::cout << "\n";
  }
  return kExitOk;
}

nlohmann::json theory_ortho(std::uint64_t seed) {
  const int n = 1000;
  const double eps = 0.2;
  const int d = subtrace::required_dimension(n, eps);
  auto sample = subtrace::sample_near_orthogonal(n, d, eps, seed);
  return {{"check", "ortho"},      {"n_vectors", n},
          {"epsilon", eps},        {"dimension", d},
          {"calibration_constant", subtrace::kOrthoC},
          {"max_abs_dot", sample.max_abs_dot},
          {"ok", sample.ok}};
}

nlohmann::json theory_detector(std::uint64_t seed) {
  using subtrace::Mat;
  using subtrace::Vec;
  const int d = 8;
  Mat basis = Mat::Identity(d, d);
  const Vec first = basis.col(0), second = basis.col(1), out_vec = basis.col(2);
  auto layer = subtrace::build_pair_detector(first, second, 50.0, out_vec);

  subtrace::Rng rng(seed);
  double min_present = 1.0, max_absent = 0.0;
  const int trials = 200;
  for (int i = 0; i < trials; ++i) {
    const std::size_t len = 2 + rng.next_below(31);
    const bool plant = (i % 2 == 0);
    std::vector<int> cols(len);
    for (auto& c : cols) c = 3 + static_cast<int>(rng.next_below(d - 3));
    if (plant) {
      const std::size_t a = rng.next_below(len - 1);
      const std::size_t b = a + 1 + rng.next_below(len - a - 1);
      cols[a] = 0;
      cols[b] = 1;
    } else {
      cols[rng.next_below(len)] = 1;  // second token without a preceding first
    }
    Mat features(static_cast<Eigen::Index>(len), d);
    for (std::size_t t = 0; t < len; ++t) features.row(static_cast<Eigen::Index>(t)) =
        basis.col(cols[t]).transpose();
    Vec act = subtrace::detector_activations(layer, features);
    double best = 0;
    for (Eigen::Index t = 0; t < act.size(); ++t) best = std::max(best, act(t));
    if (plant) min_present = std::min(min_present, best);
    else max_absent = std::max(max_absent, best);
  }
  return {{"check", "detector"}, {"gamma", 50.0},
          {"trials", trials},    {"min_activation_present", min_present},
          {"max_activation_absent", max_absent},
          {"ok", min_present >= 0.99 && max_absent <= 0.01}};
}

nlohmann::json theory_embedder(std::uint64_t) {
  using subtrace::Mat;
  using subtrace::Vec;
  const int d = 16;
  Mat basis = Mat::Identity(d, d);
  std::map<subtrace::TokenId, Vec> tokens;
  for (subtrace::TokenId t = 0; t < 6; ++t) tokens[t] = basis.col(t);
  subtrace::SubSeq pattern{0, 1, 2, 3};
  std::map<subtrace::SubSeq, Vec> parts;
  int col = 6;
  for (const auto& part : subtrace::collect_parts({pattern})) parts[part] = basis.col(col++);
  auto net = subtrace::build_subseq_embedder({pattern}, tokens, parts);

  subtrace::TokenSeq with{0, 4, 1, 5, 2, 3};
  subtrace::TokenSeq without{0, 4, 1, 5, 3, 2};
  const Vec pat_vec = parts.at(pattern);
  auto proj = [&](const subtrace::TokenSeq& s) {
    Mat f = subtrace::encode_sequence(net, s);
    double best = 0;
    for (Eigen::Index t = 0; t < f.rows(); ++t)
      best = std::max(best, std::abs(f.row(t).dot(pat_vec.transpose())));
    return best;
  };
  const double p_with = proj(with), p_without = proj(without);
  return {{"check", "embedder"},
          {"layers", net.layers.size()},
          {"projection_with_pattern", p_with},
          {"projection_without_pattern", p_without},
          {"ok", p_with >= 0.98 && p_without <= 0.02}};
}

nlohmann::json theory_logit(std::uint64_t seed) {
  using subtrace::Mat;
  using subtrace::Vec;
  const int d = 16;
  Mat basis = Mat::Identity(d, d);
  std::map<subtrace::TokenId, Vec> tokens;
  for (subtrace::TokenId t = 0; t < 6; ++t) tokens[t] = basis.col(t);
  subtrace::SubSeq pattern{0, 1};
  std::map<subtrace::SubSeq, Vec> parts{{pattern, basis.col(6)}};
  auto net = subtrace::build_subseq_embedder({pattern}, tokens, parts);

  subtrace::TokenSeq s{0, 4, 1, 5};
  Mat features = subtrace::encode_sequence(net, s);
  subtrace::Rng rng(seed);
  Mat w_ov(d, d), w_kq(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      w_ov(i, j) = rng.next_gaussian() * 0.3;
      w_kq(i, j) = rng.next_gaussian() * 0.3;
    }
  std::vector<std::pair<subtrace::SubSeq, Vec>> dictionary;
  for (const auto& [t, v] : tokens) dictionary.push_back({{t}, v});
  dictionary.push_back({pattern, parts.at(pattern)});
  auto dec = subtrace::logit_decomposition(features, w_ov, w_kq, basis.col(5), dictionary);
  return {{"check", "logit"},
          {"f", dec.f},
          {"reconstruction_gap", dec.reconstruction_gap},
          {"terms", dec.terms.size()},
          {"ok", dec.reconstruction_gap <= 1e-6}};
}

nlohmann::json theory_gradient(std::uint64_t seed) {
  const int instances = 50;
  int held = 0;
  double max_fd_err = 0;
  for (int i = 0; i < instances; ++i) {
    subtrace::Rng rng = subtrace::Rng::substream(seed, static_cast<std::uint64_t>(i));
    const int vocab = 3 + static_cast<int>(rng.next_below(6));  // <= 8
    const int d = 4 + static_cast<int>(rng.next_below(4));
    subtrace::LinAttnModel model;
    for (subtrace::TokenId t = 0; t < vocab; ++t) {
      subtrace::Vec v(d);
      for (int j = 0; j < d; ++j) v(j) = rng.next_gaussian();
      model.phi[t] = v / v.norm();
    }
    model.end_token = 0;
    model.w_kq.resize(d, d);
    model.w_ov.resize(d, d);
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) {
        model.w_kq(a, b) = rng.next_gaussian() * 0.5;
        model.w_ov(a, b) = rng.next_gaussian() * 0.5;
      }
    const std::size_t n_seqs = 8 + rng.next_below(25);  // <= 32
    // Duplicate-free content keeps per-sequence occurrence counts in {0, 1},
    // where the duplication factor in the bound is tight.
    const std::size_t len = 2 + rng.next_below(static_cast<std::uint64_t>(vocab - 2));
    std::vector<subtrace::LabeledSeq> dataset;
    for (std::size_t k = 0; k < n_seqs; ++k) {
      subtrace::TokenSeq s;
      for (std::size_t idx : rng.next_subset(static_cast<std::size_t>(vocab - 1), len - 1))
        s.push_back(1 + static_cast<subtrace::TokenId>(idx));
      s.push_back(model.end_token);
      dataset.push_back({s, static_cast<subtrace::TokenId>(rng.next_below(vocab))});
    }
    model.tau_dp = 1;
    const subtrace::SubSeq pattern{1 + static_cast<subtrace::TokenId>(rng.next_below(vocab - 1))};
    const subtrace::TokenId y = static_cast<subtrace::TokenId>(rng.next_below(vocab));

    auto res = subtrace::gradient_bound_check(model, dataset, pattern, y);
    if (res.holds) ++held;
    const double fd_ov = subtrace::finite_diff_gradient_term(
        model, dataset, pattern, y, subtrace::GradientTerm::kAssociation);
    const double fd_kq = subtrace::finite_diff_gradient_term(
        model, dataset, pattern, y, subtrace::GradientTerm::kAttention);
    auto rel = [](double a, double b) {
      const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
      return std::abs(a - b) / scale;
    };
    max_fd_err = std::max({max_fd_err, rel(res.delta_ov, fd_ov), rel(res.delta_kq, fd_kq)});
  }
  return {{"check", "gradient"},
          {"instances", instances},
          {"held", held},
          {"max_finite_diff_rel_err", max_fd_err},
          {"ok", held == instances && max_fd_err <= 1e-5}};
}

int cmd_theory_check(const std::string& kind, std::uint64_t seed,
                     const std::string& report_path) {
  nlohmann::json body;
  if (kind == "ortho") body = theory_ortho(seed);
  else if (kind == "detector") body = theory_detector(seed);
  else if (kind == "embedder") body = theory_embedder(seed);
  else if (kind == "logit") body = theory_logit(seed);
  else if (kind == "gradient") body = theory_gradient(seed);
  else throw ConfigError("unknown theory check: " + kind);
  nlohmann::json report{{"schema", "subtrace-theory/1"}, {"seed", seed}, {"result", body}};
  if (!report_path.empty()) write_report(report_path, report);
  std::cout << report.dump(2) << "\n";
  return body.value("ok", false) ? kExitOk : kExitConsistency;
}

int cmd_cache(const std::string& action, const std::string& dir, double retention_days) {
  subtrace::ResponseCache cache =
      dir.empty() ? subtrace::ResponseCache::from_env() : subtrace::ResponseCache(dir);
  if (!cache.enabled()) throw ConfigError("no cache directory configured");
  if (action == "stats") {
    auto st = cache.stats();
    std::cout << "entries: " << st.entries << "\nbytes: " << st.bytes << "\n";
    return kExitOk;
  }
  if (action == "gc") {
    auto removed = cache.gc_older_than(
        std::chrono::seconds(static_cast<long long>(retention_days * 86400.0)));
    std::cout << "removed: " << removed << "\n";
    return kExitOk;
  }
  throw ConfigError("unknown cache action: " + action);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subtrace: subsequence-association tracing toolkit"};
  app.require_subcommand(1);

  std::string config_path, prompt_file, corpus_path, out_path, report_path;
  std::string trigger_arg, target_arg, scan_root, queries_path, tokenizer_spec;
  std::string theory_kind, cache_action, cache_dir;
  unsigned workers = 0;
  std::size_t n_per_mode = 25, input_len = 20, doc_window = 0;
  std::uint64_t seed = 0;
  double retention_days = 30.0;

  auto* perturb = app.add_subcommand("perturb", "build a perturbation corpus");
  perturb->add_option("--config", config_path)->required();
  perturb->add_option("--prompt-file", prompt_file)->required();
  perturb->add_option("--out", out_path)->required();
  perturb->add_option("--workers", workers);

  auto* trace = app.add_subcommand("trace", "beam-search trigger tracing");
  trace->add_option("--config", config_path)->required();
  trace->add_option("--corpus", corpus_path)->required();
  trace->add_option("--target", target_arg);
  trace->add_option("--report", report_path);
  trace->add_option("--prompt-file", prompt_file);
  trace->add_option("--workers", workers);

  auto* srep = app.add_subcommand("srep", "reproducibility over the four fill modes");
  srep->add_option("--config", config_path)->required();
  srep->add_option("--trigger", trigger_arg)->required();
  srep->add_option("--target", target_arg)->required();
  srep->add_option("--report", report_path);
  srep->add_option("--n-per-mode", n_per_mode);
  srep->add_option("--input-len", input_len);
  srep->add_option("--seed", seed);

  auto* scan = app.add_subcommand("corpus-scan", "conditional containment over documents");
  scan->add_option("--root", scan_root)->required();
  scan->add_option("--queries", queries_path)->required();
  scan->add_option("--tokenizer", tokenizer_spec)->required();
  scan->add_option("--doc-window", doc_window);
  scan->add_option("--workers", workers);
  scan->add_option("--report", report_path);

  auto* theory = app.add_subcommand("theory-check", "constructive theory checks");
  theory->add_option("kind", theory_kind, "ortho|detector|embedder|logit|gradient")->required();
  theory->add_option("--seed", seed);
  theory->add_option("--report", report_path);

  auto* cache = app.add_subcommand("cache", "response-cache administration");
  cache->add_option("action", cache_action, "stats|gc")->required();
  cache->add_option("--dir", cache_dir);
  cache->add_option("--retention-days", retention_days);

  CLI11_PARSE(app, argc, argv);

  try {
    if (perturb->parsed()) return cmd_perturb(config_path, prompt_file, out_path, workers);
    if (trace->parsed())
      return cmd_trace(config_path, corpus_path, target_arg, report_path, prompt_file, workers);
    if (srep->parsed())
      return cmd_srep(config_path, trigger_arg, target_arg, report_path, n_per_mode, input_len,
                      seed);
    if (scan->parsed())
      return cmd_corpus_scan(scan_root, queries_path, tokenizer_spec, doc_window, workers,
                             report_path);
    if (theory->parsed()) return cmd_theory_check(theory_kind, seed, report_path);
    if (cache->parsed()) return cmd_cache(cache_action, cache_dir, retention_days);
  } catch (const subtrace::ConsistencyError& e) {
    std::cerr << "consistency error: " << e.what() << "\n";
    return kExitConsistency;
  } catch (const subtrace::GenerateError& e) {
    std::cerr << "generator error: " << e.what() << "\n";
    return kExitGenerator;
  } catch (const subtrace::CorpusBuildError& e) {
    std::cerr << "generator error: " << e.what() << " (completed " << e.completed_entries
              << " entries)\n";
    return kExitGenerator;
  } catch (const subtrace::OracleError& e) {
    std::cerr << "generator error: " << e.what() << "\n";
    return kExitGenerator;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

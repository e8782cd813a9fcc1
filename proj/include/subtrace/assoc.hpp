#pragma once

// Subsequence association: the log-ratio score psi between a candidate
// trigger subsequence of the input and a target subsequence of the output,
// its smoothed empirical estimator over a perturbation corpus, the
// reproducibility score over four fill modes, and an exact additive
// factorization check against a rule generator.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "subtrace/genclient.hpp"
#include "subtrace/parallel.hpp"
#include "subtrace/perturb.hpp"
#include "subtrace/rng.hpp"
#include "subtrace/seq.hpp"

namespace subtrace {

struct AssocEstimate {
  SubSeq trigger;
  SubSeq target;
  std::size_t n_total = 0;
  std::size_t n_cond = 0;   // entries whose input contains the trigger
  std::size_t n_joint = 0;  // of those, entries whose output contains the target
  std::size_t n_marg = 0;   // entries whose output contains the target
  double lambda = 0.5;
  std::optional<double> psi;  // nullopt when lambda = 0 hits an empty cell
};

inline void to_json(nlohmann::json& j, const AssocEstimate& a) {
  j = nlohmann::json{{"trigger", a.trigger}, {"target", a.target},
                     {"n_total", a.n_total}, {"n_cond", a.n_cond},
                     {"n_joint", a.n_joint}, {"n_marg", a.n_marg},
                     {"lambda", a.lambda}};
  if (a.psi) j["psi"] = *a.psi;
  else j["psi"] = nullptr;
}

// Additive smoothing with lambda in both numerator cells and 2*lambda in
// the denominators keeps the estimate a log of a ratio of proper
// probabilities. Natural log throughout.
inline AssocEstimate estimate_psi(const PerturbationCorpus& corpus, const SubSeq& trigger,
                                  const SubSeq& target, double lambda = 0.5,
                                  unsigned workers = 0) {
  if (lambda < 0) throw std::invalid_argument("estimate_psi: lambda must be >= 0");
  AssocEstimate est;
  est.trigger = trigger;
  est.target = target;
  est.lambda = lambda;
  est.n_total = corpus.entries.size();

  struct Counts {
    std::size_t cond = 0, joint = 0, marg = 0;
  };
  auto chunk_counts = parallel_map<Counts>(
      corpus.entries.size(), workers, [&](std::size_t i) {
        const auto& e = corpus.entries[i];
        Counts c;
        const bool has_trigger = is_subsequence(trigger, e.input);
        const bool has_target = is_subsequence(target, e.output);
        c.cond = has_trigger ? 1 : 0;
        c.joint = (has_trigger && has_target) ? 1 : 0;
        c.marg = has_target ? 1 : 0;
        return c;
      });
  for (const auto& c : chunk_counts) {
    est.n_cond += c.cond;
    est.n_joint += c.joint;
    est.n_marg += c.marg;
  }

  const double num_cond = static_cast<double>(est.n_joint) + lambda;
  const double den_cond = static_cast<double>(est.n_cond) + 2 * lambda;
  const double num_marg = static_cast<double>(est.n_marg) + lambda;
  const double den_marg = static_cast<double>(est.n_total) + 2 * lambda;
  if (num_cond <= 0 || den_cond <= 0 || num_marg <= 0 || den_marg <= 0) {
    est.psi = std::nullopt;  // only reachable with lambda = 0
  } else {
    est.psi = std::log(num_cond / den_cond) - std::log(num_marg / den_marg);
  }
  return est;
}

// ---------------------------------------------------------------------------
// Reproducibility over the four fill modes.

struct SrepModeResult {
  std::string mode;
  std::size_t n_requested = 0;
  std::size_t n_valid = 0;    // samples where fill and generation succeeded
  std::size_t n_success = 0;  // valid samples whose output contains the target
  std::optional<double> p_cond;
};

struct SrepReport {
  SubSeq trigger;
  SubSeq target;
  std::size_t target_len = 0;
  std::size_t n_per_mode = 0;
  std::uint64_t seed = 0;
  std::vector<SrepModeResult> modes;
  std::optional<double> s_rep;  // mean of defined per-mode conditionals
  bool partial = false;         // some samples were rejected or failed
};

inline void to_json(nlohmann::json& j, const SrepModeResult& m) {
  j = nlohmann::json{{"mode", m.mode}, {"n_requested", m.n_requested},
                     {"n_valid", m.n_valid}, {"n_success", m.n_success}};
  if (m.p_cond) j["p_cond"] = *m.p_cond;
  else j["p_cond"] = nullptr;
}

inline void to_json(nlohmann::json& j, const SrepReport& r) {
  j = nlohmann::json{{"schema", "subtrace-assoc/1"},
                     {"trigger", r.trigger},
                     {"target", r.target},
                     {"target_len", r.target_len},
                     {"n_per_mode", r.n_per_mode},
                     {"seed", r.seed},
                     {"modes", r.modes},
                     {"partial", r.partial}};
  if (r.s_rep) j["s_rep"] = *r.s_rep;
  else j["s_rep"] = nullptr;
}

struct SrepParams {
  SubSeq trigger;
  SubSeq target;
  std::size_t input_len = 20;  // padded input length handed to the fill modes
  std::size_t n_per_mode = 25;
  std::uint64_t seed = 0;
  std::size_t vocab_size = 0;                 // for the rand mode
  std::unordered_set<TokenId> rand_excluded;  // never drawn as padding
  int oracle_retry_budget = 3;
};

// Oracle-backed modes are optional; absent oracles are skipped and leave
// the mean over the remaining modes, with partial = true.
struct SrepOracles {
  FillOracle* bert = nullptr;
  FillOracle* gpt_mask = nullptr;
  ComposeOracle* gpt_compose = nullptr;
};

inline SrepReport eval_srep(const SrepParams& params, const SrepOracles& oracles,
                            const TokenGenerator& generate) {
  if (params.trigger.empty()) throw std::invalid_argument("eval_srep: empty trigger");
  if (params.input_len < params.trigger.size())
    throw std::invalid_argument("eval_srep: input_len shorter than trigger");

  SrepReport report;
  report.trigger = params.trigger;
  report.target = params.target;
  report.target_len = params.input_len;
  report.n_per_mode = params.n_per_mode;
  report.seed = params.seed;

  struct Mode {
    std::string name;
    std::uint64_t stream;
  };
  const std::vector<Mode> mode_list{{"bert", 1}, {"rand", 2}, {"gpt-m", 3}, {"gpt-t", 4}};

  for (const auto& mode : mode_list) {
    SrepModeResult res;
    res.mode = mode.name;
    res.n_requested = params.n_per_mode;

    bool mode_available = true;
    if (mode.name == "bert" && oracles.bert == nullptr) mode_available = false;
    if (mode.name == "gpt-m" && oracles.gpt_mask == nullptr) mode_available = false;
    if (mode.name == "gpt-t" && oracles.gpt_compose == nullptr) mode_available = false;
    if (mode.name == "rand" && params.vocab_size == 0) mode_available = false;
    if (!mode_available) {
      report.partial = true;
      report.modes.push_back(res);
      continue;
    }

    for (std::size_t i = 0; i < params.n_per_mode; ++i) {
      Rng rng = Rng::substream(params.seed ^ (mode.stream << 56), i);
      try {
        TokenSeq input;
        if (mode.name == "gpt-t") {
          input = compose_from_tokens(params.trigger, *oracles.gpt_compose,
                                      params.oracle_retry_budget);
        } else {
          MaskedSeq padded = insert_padding(params.trigger, params.input_len, rng);
          if (mode.name == "bert") {
            input = fill_with_oracle(padded, *oracles.bert, params.oracle_retry_budget);
          } else if (mode.name == "gpt-m") {
            input = fill_with_oracle(padded, *oracles.gpt_mask, params.oracle_retry_budget);
          } else {
            input = refill_random(padded, params.vocab_size, params.rand_excluded, rng);
          }
        }
        TokenSeq output = generate(input, params.seed ^ (mode.stream << 56) ^ (i * 0x9e3779b97f4a7c15ULL));
        ++res.n_valid;
        if (is_subsequence(params.target, output)) ++res.n_success;
      } catch (const std::exception&) {
        report.partial = true;  // rejected sample; excluded from the estimate
      }
    }
    if (res.n_valid > 0)
      res.p_cond = static_cast<double>(res.n_success) / static_cast<double>(res.n_valid);
    else
      report.partial = true;
    report.modes.push_back(res);
  }

  double sum = 0;
  std::size_t defined = 0;
  for (const auto& m : report.modes) {
    if (m.p_cond) {
      sum += *m.p_cond;
      ++defined;
    }
  }
  if (defined > 0) report.s_rep = sum / static_cast<double>(defined);
  return report;
}

// ---------------------------------------------------------------------------
// Exact additive factorization against a rule generator.
//
// Setup: disjoint single-rule triggers under independent-or combination,
// the target contained in the base emission, rule emissions sharing no
// token with the target, and inputs drawn by including each trigger
// independently with probability q. Then, conditioning on the positive
// containment events of the triggers present in the input,
//   log P(target in output | events) = sum_i psi_i + log P(target in output)
// holds with zero residual, because P(target | events) is a product over
// triggers. The check computes all quantities by exact enumeration.

struct FactorizationRow {
  std::vector<std::size_t> included_triggers;
  double lhs = 0;      // log conditional probability given the inclusion events
  double rhs = 0;      // sum of per-trigger psi plus log marginal
  double residual = 0;
};

struct FactorizationReport {
  std::vector<double> psi;  // per trigger
  double log_marginal = 0;
  std::vector<FactorizationRow> rows;
  double max_abs_residual = 0;
};

inline void to_json(nlohmann::json& j, const FactorizationRow& r) {
  j = nlohmann::json{{"included_triggers", r.included_triggers}, {"lhs", r.lhs},
                     {"rhs", r.rhs}, {"residual", r.residual}};
}

inline void to_json(nlohmann::json& j, const FactorizationReport& r) {
  j = nlohmann::json{{"schema", "subtrace-assoc/1"}, {"psi", r.psi},
                     {"log_marginal", r.log_marginal}, {"rows", r.rows},
                     {"max_abs_residual", r.max_abs_residual}};
}

inline void validate_factorization_setup(const RuleGenerator& gen, const SubSeq& target) {
  if (gen.combine != RuleCombine::kIndependentOr)
    throw std::invalid_argument("factorization_check: needs independent-or rule combination");
  if (gen.rules.empty()) throw std::invalid_argument("factorization_check: no rules");
  if (gen.rules.size() > 16)
    throw std::invalid_argument("factorization_check: too many triggers to enumerate");
  if (!is_subsequence(target, gen.base_emission))
    throw std::invalid_argument(
        "factorization_check: target must be a subsequence of the base emission");
  std::set<TokenId> target_tokens(target.begin(), target.end());
  std::set<TokenId> seen_trigger_tokens;
  for (const auto& rule : gen.rules) {
    if (rule.trigger.empty())
      throw std::invalid_argument("factorization_check: empty trigger");
    for (TokenId t : rule.trigger) {
      if (!seen_trigger_tokens.insert(t).second)
        throw std::invalid_argument(
            "factorization_check: triggers must use pairwise disjoint token sets");
    }
    for (TokenId t : rule.emission) {
      if (target_tokens.count(t))
        throw std::invalid_argument(
            "factorization_check: rule emissions must share no token with the target");
    }
  }
}

inline FactorizationReport factorization_check(const RuleGenerator& gen, const SubSeq& target,
                                               double q = 0.5) {
  validate_factorization_setup(gen, target);
  if (q <= 0 || q >= 1)
    throw std::invalid_argument("factorization_check: q must lie strictly in (0,1)");

  const std::size_t n = gen.rules.size();
  const std::size_t patterns = std::size_t{1} << n;

  // Input for inclusion pattern A: included triggers concatenated in order.
  auto input_for = [&](std::size_t mask) {
    TokenSeq input;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) {
        const auto& t = gen.rules[i].trigger;
        input.insert(input.end(), t.begin(), t.end());
      }
    }
    return input;
  };

  std::vector<double> weight(patterns), p_target(patterns);
  for (std::size_t mask = 0; mask < patterns; ++mask) {
    double w = 1.0;
    for (std::size_t i = 0; i < n; ++i)
      w *= (mask & (std::size_t{1} << i)) ? q : 1.0 - q;
    weight[mask] = w;
    p_target[mask] = exact_output_prob(gen, input_for(mask), target);
  }

  // P(target contained | events in `cond` all hold), by exact enumeration
  // over inclusion patterns consistent with the conditioning events.
  auto cond_prob = [&](std::size_t cond) {
    double num = 0, den = 0;
    for (std::size_t mask = 0; mask < patterns; ++mask) {
      if ((mask & cond) != cond) continue;
      num += weight[mask] * p_target[mask];
      den += weight[mask];
    }
    return num / den;
  };

  FactorizationReport report;
  const double marginal = cond_prob(0);
  report.log_marginal = std::log(marginal);
  report.psi.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    report.psi[i] = std::log(cond_prob(std::size_t{1} << i)) - report.log_marginal;

  for (std::size_t mask = 0; mask < patterns; ++mask) {
    FactorizationRow row;
    row.lhs = std::log(cond_prob(mask));
    row.rhs = report.log_marginal;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) {
        row.included_triggers.push_back(i);
        row.rhs += report.psi[i];
      }
    }
    row.residual = row.lhs - row.rhs;
    report.max_abs_residual = std::max(report.max_abs_residual, std::abs(row.residual));
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace subtrace

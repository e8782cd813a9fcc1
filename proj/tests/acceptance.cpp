// Acceptance gate: one self-contained check per release criterion, one
// PASS/FAIL line each, nonzero exit if anything fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "subtrace/assoc.hpp"
#include "subtrace/corpus_scan.hpp"
#include "subtrace/oracle_adapters.hpp"
#include "subtrace/parallel.hpp"
#include "subtrace/perturb.hpp"
#include "subtrace/theory.hpp"
#include "subtrace/tracer.hpp"

using namespace subtrace;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << criterion << ": " << name;
  if (!detail.empty()) std::cout << " (" << detail << ")";
  std::cout << std::endl;
  if (!ok) ++g_failures;
}

bool dp_is_subsequence(const SubSeq& needle, const TokenSeq& haystack) {
  std::vector<bool> dp(needle.size() + 1, false);
  dp[0] = true;
  for (std::size_t i = 0; i < haystack.size(); ++i)
    for (std::size_t j = needle.size(); j >= 1; --j)
      if (dp[j - 1] && haystack[i] == needle[j - 1]) dp[j] = true;
  return dp[needle.size()];
}

// --- 1: containment vs dynamic-programming oracle --------------------------

void criterion_containment() {
  Rng rng(101);
  std::size_t mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    TokenSeq host(rng.next_below(65));
    for (auto& t : host) t = static_cast<TokenId>(rng.next_below(6));
    SubSeq needle(rng.next_below(9));
    for (auto& t : needle) t = static_cast<TokenId>(rng.next_below(6));
    if (is_subsequence(needle, host) != dp_is_subsequence(needle, host)) ++mismatches;
  }
  report(1, "containment matches the DP oracle on 10000 random pairs", mismatches == 0,
         std::to_string(mismatches) + " mismatches");
}

// --- 2: association estimate vs closed-form probabilities ------------------

void criterion_psi_consistency() {
  // Ten single/double-rule generators with distinct emission probabilities
  // and trigger lengths. The analytic reference evaluates the exact output
  // probability on every realized corpus input, so only the generator's
  // seed noise separates the empirical estimate from it.
  double worst = 0;
  bool ok = true;
  for (int config = 0; config < 10; ++config) {
    RuleGenerator gen;
    const double p_emit = 0.30 + 0.06 * config;
    const SubSeq trigger = (config % 2 == 0) ? SubSeq{3} : SubSeq{3, 7};
    gen.rules = {{trigger, {99}, p_emit}};
    if (config % 3 == 2) gen.rules.push_back({{5}, {98}, 0.5});
    gen.base_emission = {50};

    PerturbSpec spec;
    spec.mode = PerturbMode::kRandFill;
    spec.mask_prob = 0.5;
    spec.corpus_size = 20000;
    spec.seed = 4000 + static_cast<std::uint64_t>(config);
    TokenSeq query{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    auto corpus = build_perturbation_corpus(
        query, PromptTemplate{}, spec, make_rand_fill(30, {}),
        [&gen](const TokenSeq& input, std::uint64_t s) { return mock_generate(gen, input, s); });

    const SubSeq target{99};
    auto est = estimate_psi(corpus, trigger, target, 0.5);

    double cond_sum = 0, marg_sum = 0;
    std::size_t cond_n = 0;
    for (const auto& e : corpus.entries) {
      const double p = exact_output_prob(gen, e.input, target);
      marg_sum += p;
      if (is_subsequence(trigger, e.input)) {
        cond_sum += p;
        ++cond_n;
      }
    }
    const double analytic = std::log(cond_sum / static_cast<double>(cond_n)) -
                            std::log(marg_sum / static_cast<double>(corpus.entries.size()));
    const double err = std::abs(*est.psi - analytic);
    worst = std::max(worst, err);
    if (err > 0.05) ok = false;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max |psi - analytic| = %.4f", worst);
  report(2, "association estimate tracks closed-form probabilities", ok, buf);
}

// --- 3: exact additive factorization ----------------------------------------

void criterion_factorization() {
  double worst = 0;
  for (std::size_t n_triggers : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
    RuleGenerator gen;
    gen.base_emission = {100, 101};
    for (std::size_t i = 0; i < n_triggers; ++i)
      gen.rules.push_back({{static_cast<TokenId>(10 + i)},
                           {static_cast<TokenId>(200 + i)},
                           0.2 + 0.25 * static_cast<double>(i)});
    auto rep = factorization_check(gen, {100, 101}, 0.5);
    worst = std::max(worst, rep.max_abs_residual);
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max residual = %.2e", worst);
  report(3, "additive factorization is exact for 1-3 triggers", worst < 1e-9, buf);
}

// --- 4: planted-trigger recovery --------------------------------------------

void criterion_planted_recovery() {
  int recovered = 0, depth1_matches = 0;
  const int instances = 100;
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng = Rng::substream(7000, static_cast<std::uint64_t>(inst));
    const std::size_t prompt_len = 12 + rng.next_below(9);       // <= 20
    const std::size_t trigger_len = 1 + rng.next_below(4);       // <= 4
    // Trigger tokens live outside the background vocabulary so the plant
    // is unambiguous.
    SubSeq trigger(trigger_len);
    for (std::size_t i = 0; i < trigger_len; ++i)
      trigger[i] = static_cast<TokenId>(40 + 2 * i);
    TokenSeq query(prompt_len);
    for (auto& t : query) t = static_cast<TokenId>(rng.next_below(30));
    auto slots = rng.next_subset(prompt_len, trigger_len);
    for (std::size_t i = 0; i < trigger_len; ++i) query[slots[i]] = trigger[i];

    // Deterministic firing: with a noisy rule, a superset of the trigger
    // whose few entries all happened to fire can edge out the trigger
    // itself under smoothing.
    RuleGenerator gen;
    gen.rules = {{trigger, {99}, 1.0}};
    gen.base_emission = {50};

    PerturbSpec spec;
    spec.mode = PerturbMode::kRandFill;
    spec.mask_prob = 0.5;
    spec.corpus_size = 512;
    spec.seed = 9000 + static_cast<std::uint64_t>(inst);
    auto corpus = build_perturbation_corpus(
        query, PromptTemplate{}, spec, make_rand_fill(30, {}),
        [&gen](const TokenSeq& input, std::uint64_t s) { return mock_generate(gen, input, s); });

    TraceParams params;
    params.target = {99};
    params.beam_width = 20;
    auto result = sat_trace(corpus, params);
    if (result.best && result.best->content == trigger) ++recovered;

    TraceParams depth1 = params;
    depth1.max_len = 1;
    auto beam1 = sat_trace(corpus, depth1);
    auto brute1 = brute_force_trace(corpus, depth1);
    if (beam1.best && brute1.best && beam1.best->content == brute1.best->content &&
        beam1.best->score == brute1.best->score &&
        beam1.best->estimate.n_joint == brute1.best->estimate.n_joint)
      ++depth1_matches;
  }
  report(4, "beam search recovers planted triggers",
         recovered >= 95 && depth1_matches == instances,
         std::to_string(recovered) + "/100 recovered, " + std::to_string(depth1_matches) +
             "/100 depth-1 brute-force matches");
}

// --- 5: reproducibility-score calibration ------------------------------------

void criterion_srep_calibration() {
  RuleGenerator gen;
  gen.rules = {{{3, 7}, {99}, 0.7}};
  gen.base_emission = {50};

  SrepParams params;
  params.trigger = {3, 7};
  params.target = {99};
  params.input_len = 12;
  params.n_per_mode = 100;
  params.seed = 512;
  params.vocab_size = 30;
  ConstantFillOracle fill(5);
  ConstantComposeOracle compose(5);
  SrepOracles oracles{&fill, &fill, &compose};
  auto rep = eval_srep(params, oracles, [&gen](const TokenSeq& input, std::uint64_t s) {
    return mock_generate(gen, input, s);
  });

  // The 3-sigma binomial band at n = 100, p = 0.7 is +/- 0.137; the pinned
  // +/- 0.09 band (just under 2 sigma) is asserted against a fixed seed.
  bool ok = rep.s_rep.has_value() && !rep.partial;
  double sum = 0;
  std::string rates;
  for (const auto& m : rep.modes) {
    if (!m.p_cond) {
      ok = false;
      continue;
    }
    sum += *m.p_cond;
    if (std::abs(*m.p_cond - 0.7) > 0.09 + 1e-12) ok = false;
    if (!rates.empty()) rates += " ";
    rates += m.mode + "=" + std::to_string(*m.p_cond);
  }
  if (ok && *rep.s_rep != sum / 4.0) ok = false;
  report(5, "per-mode reproduction rates sit in 0.7 +/- 0.09 and average exactly", ok, rates);
}

// --- 6: corpus-scan oracle equivalence ---------------------------------------

void criterion_scan_equivalence() {
  Rng rng(606);
  std::vector<TokenSeq> docs;
  for (int i = 0; i < 1000; ++i) {
    TokenSeq d(5 + rng.next_below(40));
    for (auto& t : d) t = static_cast<TokenId>(rng.next_below(8));
    docs.push_back(std::move(d));
  }
  std::vector<CorpusQuery> queries;
  for (int i = 0; i < 20; ++i) {
    CorpusQuery q;
    q.trigger.resize(1 + rng.next_below(2));
    for (auto& t : q.trigger) t = static_cast<TokenId>(rng.next_below(8));
    q.target.resize(1 + rng.next_below(2));
    for (auto& t : q.target) t = static_cast<TokenId>(rng.next_below(8));
    queries.push_back(std::move(q));
  }

  bool ok = true;
  auto ref = scan_conditional(docs, queries, 1);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    std::size_t n_trigger = 0, n_joint = 0;
    const SubSeq joint = concat(queries[qi].trigger, queries[qi].target);
    for (const auto& d : docs) {
      if (!is_subsequence(queries[qi].trigger, d)) continue;
      ++n_trigger;
      if (is_subsequence(joint, d)) ++n_joint;
    }
    if (ref.counts[qi].n_trigger != n_trigger || ref.counts[qi].n_joint != n_joint) ok = false;
  }
  for (unsigned workers : {2u, 8u}) {
    auto alt = scan_conditional(docs, queries, workers);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      if (alt.counts[qi].n_trigger != ref.counts[qi].n_trigger ||
          alt.counts[qi].n_joint != ref.counts[qi].n_joint)
        ok = false;
    }
  }
  report(6, "corpus scan matches per-document brute force across worker counts", ok, "");
}

// --- 7: pair-detector margins -------------------------------------------------

void criterion_detector_margins() {
  const int d = 8;
  Mat basis = Mat::Identity(d, d);
  auto layer = build_pair_detector(basis.col(0), basis.col(1), 50.0, basis.col(2));
  Rng rng(707);
  double min_present = 1.0, max_absent = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 2 + rng.next_below(31);
    std::vector<int> cols(len);
    for (auto& c : cols) c = 3 + static_cast<int>(rng.next_below(d - 3));
    if (trial % 2 == 0) {
      const std::size_t a = rng.next_below(len - 1);
      const std::size_t b = a + 1 + rng.next_below(len - a - 1);
      cols[a] = 0;
      cols[b] = 1;
    } else {
      cols[rng.next_below(len)] = 1;
    }
    Mat features(static_cast<Eigen::Index>(len), d);
    for (std::size_t t = 0; t < len; ++t)
      features.row(static_cast<Eigen::Index>(t)) = basis.col(cols[t]).transpose();
    const double peak = detector_activations(layer, features).maxCoeff();
    if (trial % 2 == 0) min_present = std::min(min_present, peak);
    else max_absent = std::max(max_absent, peak);
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "min present = %.4f, max absent = %.4f", min_present,
                max_absent);
  report(7, "pair-detector margins hold over 200 random sequences",
         min_present >= 0.99 && max_absent <= 0.01, buf);
}

// --- 8: near-orthogonality recipe ----------------------------------------------

void criterion_ortho_recipe() {
  const int n = 1000;
  const double eps = 0.2;
  const int d = required_dimension(n, eps);
  auto results = parallel_map<char>(100, 0, [&](std::size_t seed) {
    return sample_near_orthogonal(n, d, eps, seed).ok ? char(1) : char(0);
  });
  int ok_seeds = 0;
  for (char c : results) ok_seeds += c;
  report(8, "orthogonality recipe succeeds in >= 99/100 seeds", ok_seeds >= 99,
         "d = " + std::to_string(d) + ", ok seeds = " + std::to_string(ok_seeds));
}

// --- 9: gradient bound and finite differences -----------------------------------

void criterion_gradient_bound() {
  int held = 0;
  double max_fd_err = 0;
  const int instances = 50;
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng = Rng::substream(9090, static_cast<std::uint64_t>(inst));
    const int vocab = 3 + static_cast<int>(rng.next_below(6));
    const int d = 4 + static_cast<int>(rng.next_below(4));
    LinAttnModel model;
    for (TokenId t = 0; t < vocab; ++t) {
      Vec v(d);
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
    // Duplicate-free sequences: occurrence counts in {0, 1} keep the
    // duplication factor in the bound tight.
    const std::size_t n_seqs = 8 + rng.next_below(25);
    const std::size_t body = 1 + rng.next_below(static_cast<std::uint64_t>(vocab - 1));
    std::vector<LabeledSeq> dataset;
    for (std::size_t k = 0; k < n_seqs; ++k) {
      TokenSeq s;
      for (std::size_t idx : rng.next_subset(static_cast<std::size_t>(vocab - 1), body))
        s.push_back(1 + static_cast<TokenId>(idx));
      s.push_back(model.end_token);
      dataset.push_back({s, static_cast<TokenId>(rng.next_below(vocab))});
    }
    model.tau_dp = 1;
    const SubSeq pattern{1 + static_cast<TokenId>(rng.next_below(vocab - 1))};
    const TokenId y = static_cast<TokenId>(rng.next_below(vocab));

    auto res = gradient_bound_check(model, dataset, pattern, y);
    if (res.holds) ++held;
    const double fd_ov =
        finite_diff_gradient_term(model, dataset, pattern, y, GradientTerm::kAssociation);
    const double fd_kq =
        finite_diff_gradient_term(model, dataset, pattern, y, GradientTerm::kAttention);
    auto rel = [](double a, double b) {
      return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
    };
    max_fd_err = std::max({max_fd_err, rel(res.delta_ov, fd_ov), rel(res.delta_kq, fd_kq)});
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "held %d/50, max finite-diff rel err = %.2e", held, max_fd_err);
  report(9, "gradient bound holds and matches finite differences", held == 50 && max_fd_err <= 1e-5,
         buf);
}

// --- 10: byte-identical reruns ---------------------------------------------------

void criterion_reproducibility() {
  RuleGenerator gen;
  gen.rules = {{{3, 7}, {99}, 0.9}};
  gen.base_emission = {50};

  auto pipeline_bytes = [&](unsigned workers) {
    PerturbSpec spec;
    spec.mode = PerturbMode::kRandFill;
    spec.mask_prob = 0.5;
    spec.corpus_size = 128;
    spec.seed = 321;
    TokenSeq query{1, 2, 3, 4, 5, 6, 7, 8};
    auto corpus = build_perturbation_corpus(
        query, PromptTemplate{}, spec, make_rand_fill(30, {}),
        [&gen](const TokenSeq& input, std::uint64_t s) { return mock_generate(gen, input, s); },
        workers);
    corpus.generator_fingerprint = "acceptance";
    std::ostringstream corpus_bytes;
    save_corpus(corpus, corpus_bytes);

    TraceParams params;
    params.target = {99};
    nlohmann::json trace_report = sat_trace(corpus, params, workers);

    std::vector<TokenSeq> docs;
    for (const auto& e : corpus.entries) docs.push_back(e.output);
    auto scan = scan_conditional(docs, {{{99}, {}}}, workers);
    scan.wall_time_s = 0;  // timing is diagnostic, not part of the result
    nlohmann::json scan_report = scan;

    return corpus_bytes.str() + "\x1e" + trace_report.dump() + "\x1e" + scan_report.dump();
  };

  const std::string run1 = pipeline_bytes(1);
  const std::string run2 = pipeline_bytes(8);
  const std::string run3 = pipeline_bytes(0);
  report(10, "pipeline reruns produce byte-identical reports",
         run1 == run2 && run1 == run3, "");
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  criterion_containment();
  criterion_psi_consistency();
  criterion_factorization();
  criterion_planted_recovery();
  criterion_srep_calibration();
  criterion_scan_equivalence();
  criterion_detector_margins();
  criterion_ortho_recipe();
  criterion_gradient_bound();
  criterion_reproducibility();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED" : "CRITERIA FAILED") << " ("
            << g_failures << " failures, " << secs << " s)" << std::endl;
  return g_failures == 0 ? 0 : 1;
}

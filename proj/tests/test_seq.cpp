#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <functional>
#include <set>
#include <vector>

#include "subtrace/rng.hpp"
#include "subtrace/seq.hpp"

using namespace subtrace;

namespace {

// Independent O(n*m) dynamic-programming containment oracle.
bool dp_is_subsequence(const SubSeq& needle, const TokenSeq& haystack) {
  const std::size_t n = haystack.size(), m = needle.size();
  // dp[j] = true iff needle[0..j) embeds into the scanned prefix.
  std::vector<bool> dp(m + 1, false);
  dp[0] = true;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = m; j >= 1; --j) {
      if (dp[j - 1] && haystack[i] == needle[j - 1]) dp[j] = true;
    }
  }
  return dp[m];
}

TokenSeq random_seq(Rng& rng, std::size_t max_len, std::uint64_t alphabet) {
  TokenSeq s(rng.next_below(max_len + 1));
  for (auto& t : s) t = static_cast<TokenId>(rng.next_below(alphabet));
  return s;
}

}  // namespace

TEST_CASE("containment agrees with a DP oracle on random pairs") {
  Rng rng(20240811);
  for (int i = 0; i < 5000; ++i) {
    TokenSeq host = random_seq(rng, 24, 4);
    SubSeq needle = random_seq(rng, 6, 4);
    REQUIRE(is_subsequence(needle, host) == dp_is_subsequence(needle, host));
  }
}

TEST_CASE("containment basic cases") {
  REQUIRE(is_subsequence({}, {}));
  REQUIRE(is_subsequence({}, {1, 2, 3}));
  REQUIRE(is_subsequence({1, 3}, {1, 2, 3}));
  REQUIRE_FALSE(is_subsequence({3, 1}, {1, 2, 3}));
  REQUIRE_FALSE(is_subsequence({1}, {}));
  REQUIRE(is_subsequence({2, 2}, {2, 1, 2}));
  REQUIRE_FALSE(is_subsequence({2, 2, 2}, {2, 1, 2}));
}

TEST_CASE("containment is reflexive and transitive") {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    TokenSeq a = random_seq(rng, 10, 3);
    REQUIRE(is_subsequence(a, a));
    // Build b by deleting from c, and a by deleting from b: a must embed in c.
    TokenSeq c = random_seq(rng, 12, 3);
    TokenSeq b;
    for (TokenId t : c)
      if (rng.next_bernoulli(0.7)) b.push_back(t);
    TokenSeq a2;
    for (TokenId t : b)
      if (rng.next_bernoulli(0.7)) a2.push_back(t);
    REQUIRE(is_subsequence(b, c));
    REQUIRE(is_subsequence(a2, b));
    REQUIRE(is_subsequence(a2, c));
  }
}

TEST_CASE("containment interacts with concatenation") {
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    TokenSeq x = random_seq(rng, 8, 3);
    TokenSeq y = random_seq(rng, 8, 3);
    REQUIRE(is_subsequence(x, concat(x, y)));
    REQUIRE(is_subsequence(y, concat(x, y)));
    REQUIRE(is_subsequence(concat(x, y), concat(concat(x, y), y)));
  }
}

TEST_CASE("match_positions returns the leftmost witness") {
  auto w = match_positions({1, 3}, {1, 3, 1, 3});
  REQUIRE(w.has_value());
  REQUIRE(*w == std::vector<std::size_t>{0, 1});

  REQUIRE_FALSE(match_positions({3, 1, 3, 1}, {1, 3, 1, 3}).has_value());

  auto empty = match_positions({}, {5, 6});
  REQUIRE(empty.has_value());
  REQUIRE(empty->empty());

  // Leftmost means lexicographically smallest among all valid witnesses:
  // verify by exhaustive search on small random cases.
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    TokenSeq host = random_seq(rng, 9, 2);
    SubSeq needle = random_seq(rng, 3, 2);
    auto witness = match_positions(needle, host);
    if (!witness) {
      REQUIRE_FALSE(dp_is_subsequence(needle, host));
      continue;
    }
    REQUIRE(witness->size() == needle.size());
    for (std::size_t j = 0; j < needle.size(); ++j)
      REQUIRE(host[(*witness)[j]] == needle[j]);
    // Exhaustive minimum over index tuples (host is tiny).
    std::vector<std::size_t> best;
    std::vector<std::size_t> tuple;
    std::function<void(std::size_t, std::size_t)> search = [&](std::size_t j, std::size_t from) {
      if (!best.empty() && !tuple.empty() && tuple > best) return;
      if (j == needle.size()) {
        if (best.empty() || tuple < best) best = tuple;
        return;
      }
      for (std::size_t p = from; p < host.size(); ++p) {
        if (host[p] != needle[j]) continue;
        tuple.push_back(p);
        search(j + 1, p + 1);
        tuple.pop_back();
      }
    };
    search(0, 0);
    REQUIRE(*witness == best);
  }
}

TEST_CASE("enumerate_subsequences lists distinct contents in length-lex order") {
  auto r = enumerate_subsequences({1, 2, 1}, 3, 100);
  REQUIRE_FALSE(r.truncated);
  std::vector<SubSeq> expected{{1}, {2}, {1, 1}, {1, 2}, {2, 1}, {1, 2, 1}};
  REQUIRE(r.items == expected);
}

TEST_CASE("enumerate_subsequences honors max_len and the cap") {
  auto r = enumerate_subsequences({1, 2, 3}, 2, 100);
  REQUIRE_FALSE(r.truncated);
  std::vector<SubSeq> expected{{1}, {2}, {3}, {1, 2}, {1, 3}, {2, 3}};
  REQUIRE(r.items == expected);

  auto truncated = enumerate_subsequences({1, 2, 3, 4, 5}, 5, 4);
  REQUIRE(truncated.truncated);
  REQUIRE(truncated.items.size() == 4);

  REQUIRE_THROWS_AS(enumerate_subsequences({1}, 0, 10), std::invalid_argument);
  REQUIRE_THROWS_AS(enumerate_subsequences({1}, 1, 0), std::invalid_argument);
}

TEST_CASE("enumerate_subsequences agrees with containment") {
  TokenSeq host{3, 1, 4, 1, 5};
  auto r = enumerate_subsequences(host, 5, 1000);
  REQUIRE_FALSE(r.truncated);
  for (const auto& item : r.items) REQUIRE(is_subsequence(item, host));
  // Count distinct subsequences by brute force over the 2^5 position masks.
  std::set<SubSeq> all;
  for (unsigned mask = 1; mask < 32; ++mask) {
    SubSeq s;
    for (std::size_t i = 0; i < host.size(); ++i)
      if (mask & (1u << i)) s.push_back(host[i]);
    all.insert(s);
  }
  REQUIRE(r.items.size() == all.size());
}

#pragma once

// Token-sequence algebra: the subsequence relation, position-witnessed
// matching, and bounded subsequence enumeration.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace subtrace {

using TokenId = std::int64_t;
using TokenSeq = std::vector<TokenId>;

// A SubSeq carries no positions; containment is evaluated against a host
// sequence. Alias kept separate for readability at call sites.
using SubSeq = std::vector<TokenId>;

// Out-of-vocabulary marker; never equal to any vocabulary id, so it can
// never satisfy a containment query.
constexpr TokenId kUnknownToken = -1;

// True iff `needle` can be obtained from `haystack` by deleting zero or
// more tokens, order preserved. Single left-to-right greedy pass.
inline bool is_subsequence(const SubSeq& needle, const TokenSeq& haystack) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < haystack.size() && j < needle.size(); ++i) {
    if (haystack[i] == needle[j]) ++j;
  }
  return j == needle.size();
}

// Leftmost-greedy witness: strictly increasing indices i_1 < ... < i_k with
// haystack[i_j] == needle[j], each i_j the smallest legal index. Empty
// needle yields an empty witness.
inline std::optional<std::vector<std::size_t>> match_positions(
    const SubSeq& needle, const TokenSeq& haystack) {
  std::vector<std::size_t> witness;
  witness.reserve(needle.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < haystack.size() && j < needle.size(); ++i) {
    if (haystack[i] == needle[j]) {
      witness.push_back(i);
      ++j;
    }
  }
  if (j != needle.size()) return std::nullopt;
  return witness;
}

inline SubSeq concat(const SubSeq& left, const SubSeq& right) {
  SubSeq out = left;
  out.insert(out.end(), right.begin(), right.end());
  return out;
}

struct EnumerationResult {
  std::vector<SubSeq> items;
  bool truncated = false;
};

// All distinct non-empty subsequences of `host` with length <= max_len,
// deduplicated by token content, in (length, then lexicographic-by-id)
// order, truncated at `cap`.
inline EnumerationResult enumerate_subsequences(const TokenSeq& host,
                                                std::size_t max_len,
                                                std::size_t cap) {
  if (max_len < 1) throw std::invalid_argument("enumerate_subsequences: max_len must be >= 1");
  if (cap < 1) throw std::invalid_argument("enumerate_subsequences: cap must be >= 1");

  // Enumerate position subsets breadth-first by length, collecting distinct
  // contents. Host lengths here are small (oracle support), so the
  // exponential blow-up is bounded by `cap`.
  std::vector<SubSeq> by_content;
  EnumerationResult result;
  std::vector<std::vector<std::size_t>> frontier;  // index tuples of current length
  frontier.push_back({});
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<std::size_t>> next;
    std::vector<SubSeq> contents;
    for (const auto& prefix : frontier) {
      std::size_t start = prefix.empty() ? 0 : prefix.back() + 1;
      for (std::size_t i = start; i < host.size(); ++i) {
        auto tuple = prefix;
        tuple.push_back(i);
        SubSeq content;
        content.reserve(tuple.size());
        for (auto idx : tuple) content.push_back(host[idx]);
        contents.push_back(std::move(content));
        next.push_back(std::move(tuple));
      }
    }
    std::sort(contents.begin(), contents.end());
    contents.erase(std::unique(contents.begin(), contents.end()), contents.end());
    for (auto& c : contents) {
      if (result.items.size() == cap) {
        result.truncated = true;
        return result;
      }
      result.items.push_back(std::move(c));
    }
    if (next.empty()) break;
    frontier = std::move(next);
  }
  return result;
}

}  // namespace subtrace

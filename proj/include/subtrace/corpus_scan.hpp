#pragma once

// Training-corpus tracing: conditional containment rates of (trigger,
// target) pairs over a document collection, with gzip-transparent loading,
// fixed-size document windows, and a correlation helper for comparing
// corpus rates against generator-side association scores.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "subtrace/parallel.hpp"
#include "subtrace/seq.hpp"
#include "subtrace/sha256.hpp"
#include "subtrace/tokenizer.hpp"

namespace subtrace {

struct CorpusQuery {
  SubSeq trigger;
  SubSeq target;
};

inline void to_json(nlohmann::json& j, const CorpusQuery& q) {
  j = nlohmann::json{{"trigger", q.trigger}, {"target", q.target}};
}

inline void from_json(const nlohmann::json& j, CorpusQuery& q) {
  q.trigger = j.at("trigger").get<SubSeq>();
  q.target = j.at("target").get<SubSeq>();
}

struct QueryCounts {
  CorpusQuery query;
  std::size_t n_docs = 0;
  std::size_t n_trigger = 0;  // documents containing the trigger
  std::size_t n_joint = 0;    // documents containing trigger followed by target
  std::optional<double> p_trigger;
  std::optional<double> p_cond;  // n_joint / n_trigger; undefined when n_trigger = 0
};

struct ScanReport {
  std::vector<QueryCounts> counts;
  std::size_t documents_scanned = 0;
  std::size_t files_read = 0;
  std::vector<std::string> skipped_files;
  std::string corpus_fingerprint;
  std::uintmax_t bytes_scanned = 0;
  double wall_time_s = 0;
};

inline void to_json(nlohmann::json& j, const QueryCounts& c) {
  j = nlohmann::json{{"query", c.query}, {"n_docs", c.n_docs},
                     {"n_trigger", c.n_trigger}, {"n_joint", c.n_joint}};
  if (c.p_trigger) j["p_trigger"] = *c.p_trigger;
  else j["p_trigger"] = nullptr;
  if (c.p_cond) j["p_cond"] = *c.p_cond;
  else j["p_cond"] = nullptr;
}

inline void to_json(nlohmann::json& j, const ScanReport& r) {
  j = nlohmann::json{{"schema", "subtrace-scan/1"},
                     {"counts", r.counts},
                     {"documents_scanned", r.documents_scanned},
                     {"files_read", r.files_read},
                     {"skipped_files", r.skipped_files},
                     {"corpus_fingerprint", r.corpus_fingerprint},
                     {"bytes_scanned", r.bytes_scanned},
                     {"wall_time_s", r.wall_time_s}};
}

// ---------------------------------------------------------------------------
// Loading

inline bool looks_gzipped(const std::string& bytes) {
  return bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
         static_cast<unsigned char>(bytes[1]) == 0x8b;
}

inline std::string gunzip(const std::string& bytes) {
  z_stream zs{};
  // 15 + 32: max window, auto-detect gzip or zlib wrapping.
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw std::runtime_error("gunzip: inflateInit2 failed");
  std::string out;
  std::vector<char> buf(1 << 16);
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = reinterpret_cast<Bytef*>(buf.data());
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("gunzip: corrupt stream");
    }
    out.append(buf.data(), buf.size() - zs.avail_out);
  }
  inflateEnd(&zs);
  return out;
}

struct LoadedDocuments {
  std::vector<TokenSeq> docs;
  std::size_t files_read = 0;
  std::uintmax_t bytes_read = 0;
  std::vector<std::string> skipped_files;
  std::string fingerprint;  // SHA-256 over the tokenized documents
};

// Splits a token stream into consecutive windows of `window` tokens;
// window = 0 keeps the document whole.
inline void append_windows(const TokenSeq& tokens, std::size_t window,
                           std::vector<TokenSeq>& out) {
  if (tokens.empty()) return;
  if (window == 0) {
    out.push_back(tokens);
    return;
  }
  for (std::size_t begin = 0; begin < tokens.size(); begin += window) {
    const std::size_t end = std::min(begin + window, tokens.size());
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                     tokens.begin() + static_cast<std::ptrdiff_t>(end));
  }
}

// A path names either a regular file or a directory scanned recursively.
// Each file contributes one document per line; .gz payloads are
// decompressed transparently. Unreadable files are skipped and reported.
inline LoadedDocuments load_documents(const std::filesystem::path& path,
                                      const Tokenizer& tokenizer, std::size_t window = 0) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }

  LoadedDocuments loaded;
  Sha256 fp;
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) {
      loaded.skipped_files.push_back(file.string());
      continue;
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string bytes = ss.str();
    if (looks_gzipped(bytes)) {
      try {
        bytes = gunzip(bytes);
      } catch (const std::exception&) {
        loaded.skipped_files.push_back(file.string());
        continue;
      }
    }
    ++loaded.files_read;
    loaded.bytes_read += bytes.size();
    std::istringstream lines(bytes);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      TokenSeq tokens = tokenizer.encode(line);
      append_windows(tokens, window, loaded.docs);
    }
  }
  for (const auto& doc : loaded.docs) {
    fp.update(reinterpret_cast<const char*>(doc.data()), doc.size() * sizeof(TokenId));
    fp.update("\n");
  }
  loaded.fingerprint = fp.hex_digest();
  return loaded;
}

// ---------------------------------------------------------------------------
// Scanning

// Joint containment means the trigger followed by the target within the
// same document, i.e. containment of their concatenation.
inline ScanReport scan_conditional(const std::vector<TokenSeq>& docs,
                                   const std::vector<CorpusQuery>& queries,
                                   unsigned workers = 0) {
  struct PairCounts {
    std::size_t trigger = 0, joint = 0;
  };
  std::vector<SubSeq> joint_patterns;
  joint_patterns.reserve(queries.size());
  for (const auto& q : queries) joint_patterns.push_back(concat(q.trigger, q.target));

  auto per_doc = parallel_map<std::vector<PairCounts>>(docs.size(), workers, [&](std::size_t d) {
    std::vector<PairCounts> counts(queries.size());
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      if (is_subsequence(queries[qi].trigger, docs[d])) {
        counts[qi].trigger = 1;
        if (is_subsequence(joint_patterns[qi], docs[d])) counts[qi].joint = 1;
      }
    }
    return counts;
  });

  ScanReport report;
  report.documents_scanned = docs.size();
  report.counts.resize(queries.size());
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    auto& c = report.counts[qi];
    c.query = queries[qi];
    c.n_docs = docs.size();
    for (const auto& dc : per_doc) {
      c.n_trigger += dc[qi].trigger;
      c.n_joint += dc[qi].joint;
    }
    if (c.n_docs > 0)
      c.p_trigger = static_cast<double>(c.n_trigger) / static_cast<double>(c.n_docs);
    if (c.n_trigger > 0)
      c.p_cond = static_cast<double>(c.n_joint) / static_cast<double>(c.n_trigger);
  }
  return report;
}

// Two-pass Pearson correlation; undefined for fewer than two points or a
// zero-variance side.
inline std::optional<double> pearson(const std::vector<double>& x,
                                     const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace subtrace

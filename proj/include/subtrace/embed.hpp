#pragma once

// Token-embedding table with exact top-k cosine neighbor queries, backing
// the mask-and-refill sampler.
//
// File format (SUBTRACE-EMB v1, bit-exact):
//   line 1: "SUBTRACE-EMB v1\n"
//   line 2: "<V> <d>\n" (decimal, space separated)
//   then V*d little-endian IEEE-754 float32, row-major.
// Optional sidecar "<path>.vocab": newline-delimited UTF-8 surfaces,
// line i = surface of token id i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "subtrace/seq.hpp"

namespace subtrace {

struct EmbedTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  std::vector<float> rows;  // row-major, vocab_size * dim
  std::vector<std::string> id_to_surface;  // empty if no sidecar

  const float* row(std::size_t id) const { return rows.data() + id * dim; }

  double row_norm(std::size_t id) const {
    double s = 0;
    const float* r = row(id);
    for (std::size_t j = 0; j < dim; ++j) s += double(r[j]) * r[j];
    return std::sqrt(s);
  }
};

inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

inline EmbedTable load_embed_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("embed table not readable: " + path.string());
  std::string magic;
  if (!std::getline(in, magic) || magic != "SUBTRACE-EMB v1")
    throw std::runtime_error("embed table: bad magic line in " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("embed table: missing size line");
  std::size_t vocab = 0, dim = 0;
  {
    std::istringstream hs(header);
    if (!(hs >> vocab >> dim) || vocab == 0 || dim == 0)
      throw std::runtime_error("embed table: malformed size line '" + header + "'");
    std::string extra;
    if (hs >> extra) throw std::runtime_error("embed table: trailing junk in size line");
  }
  EmbedTable table;
  table.vocab_size = vocab;
  table.dim = dim;
  table.rows.resize(vocab * dim);
  in.read(reinterpret_cast<char*>(table.rows.data()),
          static_cast<std::streamsize>(table.rows.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != table.rows.size() * sizeof(float))
    throw std::runtime_error("embed table: row data shorter than header claims");
  char trailing;
  if (in.read(&trailing, 1))
    throw std::runtime_error("embed table: trailing bytes after last row");
  if (!host_is_little_endian()) {
    for (auto& v : table.rows) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&v, &u, 4);
    }
  }
  for (float v : table.rows) {
    if (!std::isfinite(v)) throw std::runtime_error("embed table: non-finite component");
  }
  auto vocab_path = path;
  vocab_path += ".vocab";
  if (std::filesystem::exists(vocab_path)) {
    std::ifstream vf(vocab_path);
    std::string line;
    while (std::getline(vf, line)) table.id_to_surface.push_back(line);
    if (table.id_to_surface.size() != vocab)
      throw std::runtime_error("embed table: sidecar vocab line count != V");
  }
  return table;
}

inline void save_embed_table(const EmbedTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("embed table not writable: " + path.string());
  out << "SUBTRACE-EMB v1\n" << table.vocab_size << ' ' << table.dim << '\n';
  if (host_is_little_endian()) {
    out.write(reinterpret_cast<const char*>(table.rows.data()),
              static_cast<std::streamsize>(table.rows.size() * sizeof(float)));
  } else {
    for (float v : table.rows) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!table.id_to_surface.empty()) {
    auto vocab_path = path;
    vocab_path += ".vocab";
    std::ofstream vf(vocab_path);
    for (const auto& s : table.id_to_surface) vf << s << '\n';
  }
}

// The k tokens with highest cosine similarity to `token`, excluding the
// token itself; ties broken by smaller id. Exact full scan.
inline std::vector<TokenId> top_k_similar(const EmbedTable& table, TokenId token,
                                          std::size_t k) {
  if (token < 0 || static_cast<std::size_t>(token) >= table.vocab_size)
    throw std::out_of_range("top_k_similar: token id out of range");
  if (k < 1) throw std::invalid_argument("top_k_similar: k must be >= 1");
  const std::size_t query = static_cast<std::size_t>(token);
  const float* q = table.row(query);
  const double qn = table.row_norm(query);
  struct Scored {
    double sim;
    std::size_t id;
  };
  std::vector<Scored> scored;
  scored.reserve(table.vocab_size - 1);
  for (std::size_t id = 0; id < table.vocab_size; ++id) {
    if (id == query) continue;
    const float* r = table.row(id);
    double dot = 0;
    for (std::size_t j = 0; j < table.dim; ++j) dot += double(q[j]) * r[j];
    const double denom = qn * table.row_norm(id);
    const double sim = denom > 0 ? dot / denom : 0.0;
    scored.push_back({sim, id});
  }
  const std::size_t take = std::min(k, scored.size());
  auto better = [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.id < b.id;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                    scored.end(), better);
  std::vector<TokenId> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(static_cast<TokenId>(scored[i].id));
  return out;
}

}  // namespace subtrace

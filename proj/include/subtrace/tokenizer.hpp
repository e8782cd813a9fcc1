#pragma once

// Tokenizers for mapping documents and oracle replies into the traced
// model's token space: a trivial whitespace tokenizer for fixtures and a
// merges-driven byte-pair tokenizer. Unknown tokens map to kUnknownToken,
// which matches no query pattern.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "subtrace/seq.hpp"

namespace subtrace {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual TokenSeq encode(const std::string& text) const = 0;
  virtual std::string decode(const TokenSeq& ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::string surface(TokenId id) const = 0;
};

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

class WhitespaceTokenizer : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(std::vector<std::string> vocab) : id_to_surface_(std::move(vocab)) {
    for (std::size_t i = 0; i < id_to_surface_.size(); ++i)
      surface_to_id_[id_to_surface_[i]] = static_cast<TokenId>(i);
  }

  static WhitespaceTokenizer from_vocab_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("vocab file not readable: " + path.string());
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(in, line)) vocab.push_back(line);
    return WhitespaceTokenizer(std::move(vocab));
  }

  TokenSeq encode(const std::string& text) const override {
    TokenSeq out;
    for (const auto& word : split_whitespace(text)) {
      auto it = surface_to_id_.find(word);
      out.push_back(it == surface_to_id_.end() ? kUnknownToken : it->second);
    }
    return out;
  }

  std::string decode(const TokenSeq& ids) const override {
    std::string out;
    for (TokenId id : ids) {
      if (!out.empty()) out += ' ';
      out += surface(id);
    }
    return out;
  }

  std::size_t vocab_size() const override { return id_to_surface_.size(); }

  std::string surface(TokenId id) const override {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_surface_.size()) return "<unk>";
    return id_to_surface_[static_cast<std::size_t>(id)];
  }

 private:
  std::vector<std::string> id_to_surface_;
  std::unordered_map<std::string, TokenId> surface_to_id_;
};

// Word-internal byte-pair encoding. Words are whitespace-split; characters
// are merged greedily by merge-rule priority; resulting symbols are looked
// up in the vocabulary. A leading "_" marks word starts in decode.
class BpeTokenizer : public Tokenizer {
 public:
  BpeTokenizer(std::vector<std::string> vocab,
               std::vector<std::pair<std::string, std::string>> merges)
      : id_to_surface_(std::move(vocab)) {
    for (std::size_t i = 0; i < id_to_surface_.size(); ++i)
      surface_to_id_[id_to_surface_[i]] = static_cast<TokenId>(i);
    for (std::size_t i = 0; i < merges.size(); ++i)
      merge_rank_[merges[i].first + "\x01" + merges[i].second] = i;
  }

  static BpeTokenizer from_files(const std::filesystem::path& vocab_path,
                                 const std::filesystem::path& merges_path) {
    std::ifstream vin(vocab_path);
    if (!vin) throw std::runtime_error("vocab file not readable: " + vocab_path.string());
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(vin, line)) vocab.push_back(line);
    std::ifstream min(merges_path);
    if (!min) throw std::runtime_error("merges file not readable: " + merges_path.string());
    std::vector<std::pair<std::string, std::string>> merges;
    while (std::getline(min, line)) {
      if (line.empty() || line[0] == '#') continue;
      auto space = line.find(' ');
      if (space == std::string::npos)
        throw std::runtime_error("merges file: malformed line '" + line + "'");
      merges.emplace_back(line.substr(0, space), line.substr(space + 1));
    }
    return BpeTokenizer(std::move(vocab), std::move(merges));
  }

  TokenSeq encode(const std::string& text) const override {
    TokenSeq out;
    for (const auto& word : split_whitespace(text)) {
      std::vector<std::string> symbols;
      symbols.reserve(word.size());
      for (std::size_t i = 0; i < word.size(); ++i) {
        // UTF-8: keep continuation bytes attached to their lead byte.
        std::size_t len = 1;
        unsigned char c = static_cast<unsigned char>(word[i]);
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        symbols.push_back(word.substr(i, len));
        i += len - 1;
      }
      if (!symbols.empty()) symbols[0] = "_" + symbols[0];
      apply_merges(symbols);
      for (const auto& sym : symbols) {
        auto it = surface_to_id_.find(sym);
        out.push_back(it == surface_to_id_.end() ? kUnknownToken : it->second);
      }
    }
    return out;
  }

  std::string decode(const TokenSeq& ids) const override {
    std::string out;
    for (TokenId id : ids) {
      std::string s = surface(id);
      if (!s.empty() && s[0] == '_') {
        if (!out.empty()) out += ' ';
        out += s.substr(1);
      } else {
        out += s;
      }
    }
    return out;
  }

  std::size_t vocab_size() const override { return id_to_surface_.size(); }

  std::string surface(TokenId id) const override {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_surface_.size()) return "<unk>";
    return id_to_surface_[static_cast<std::size_t>(id)];
  }

 private:
  void apply_merges(std::vector<std::string>& symbols) const {
    while (symbols.size() > 1) {
      std::size_t best_rank = merge_rank_.size();
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = merge_rank_.find(symbols[i] + "\x01" + symbols[i + 1]);
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_pos = i;
        }
      }
      if (best_rank == merge_rank_.size()) break;
      symbols[best_pos] += symbols[best_pos + 1];
      symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
  }

  std::vector<std::string> id_to_surface_;
  std::unordered_map<std::string, TokenId> surface_to_id_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
};

// Tokenizer spec strings: "ws:<vocab>" or "bpe:<vocab>:<merges>".
inline std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec) {
  auto first = spec.find(':');
  if (first == std::string::npos)
    throw std::invalid_argument("tokenizer spec must be ws:<vocab> or bpe:<vocab>:<merges>");
  const std::string kind = spec.substr(0, first);
  if (kind == "ws") {
    return std::make_unique<WhitespaceTokenizer>(
        WhitespaceTokenizer::from_vocab_file(spec.substr(first + 1)));
  }
  if (kind == "bpe") {
    auto second = spec.find(':', first + 1);
    if (second == std::string::npos)
      throw std::invalid_argument("bpe tokenizer spec needs vocab and merges paths");
    return std::make_unique<BpeTokenizer>(BpeTokenizer::from_files(
        spec.substr(first + 1, second - first - 1), spec.substr(second + 1)));
  }
  throw std::invalid_argument("unknown tokenizer kind: " + kind);
}

}  // namespace subtrace

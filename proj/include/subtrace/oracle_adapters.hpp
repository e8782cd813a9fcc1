#pragma once

// Fill/compose oracles backed by a text-generation client. Masked slots
// are rendered with a literal mask surface, replies are re-tokenized with
// the study model's tokenizer before the containment contract is checked.

#include <memory>
#include <string>

#include "subtrace/genclient.hpp"
#include "subtrace/perturb.hpp"
#include "subtrace/tokenizer.hpp"

namespace subtrace {

class GenFillOracle : public FillOracle {
 public:
  GenFillOracle(GenClient& client, GeneratorSpec spec, const Tokenizer& tokenizer,
                std::string instruction, std::string mask_surface = kDefaultMaskSurface)
      : client_(client),
        spec_(std::move(spec)),
        tokenizer_(tokenizer),
        instruction_(std::move(instruction)),
        mask_surface_(std::move(mask_surface)) {}

  TokenSeq fill(const MaskedSeq& m) override {
    std::string rendered;
    for (const auto& slot : m.slots) {
      if (!rendered.empty()) rendered += ' ';
      rendered += slot.masked ? mask_surface_ : tokenizer_.surface(slot.token);
    }
    std::string prompt = instruction_.empty() ? rendered : instruction_ + "\n" + rendered;
    return tokenizer_.encode(client_.generate(spec_, prompt));
  }

 private:
  GenClient& client_;
  GeneratorSpec spec_;
  const Tokenizer& tokenizer_;
  std::string instruction_;
  std::string mask_surface_;
};

class GenComposeOracle : public ComposeOracle {
 public:
  GenComposeOracle(GenClient& client, GeneratorSpec spec, const Tokenizer& tokenizer,
                   std::string instruction = kGptTokenComposePrompt)
      : client_(client),
        spec_(std::move(spec)),
        tokenizer_(tokenizer),
        instruction_(std::move(instruction)) {}

  TokenSeq compose(const SubSeq& tokens) override {
    std::string rendered;
    for (TokenId t : tokens) {
      if (!rendered.empty()) rendered += ' ';
      rendered += tokenizer_.surface(t);
    }
    std::string prompt = instruction_.empty() ? rendered : instruction_ + "\n" + rendered;
    return tokenizer_.encode(client_.generate(spec_, prompt));
  }

 private:
  GenClient& client_;
  GeneratorSpec spec_;
  const Tokenizer& tokenizer_;
  std::string instruction_;
};

// Offline stand-ins for tests and mock pipelines.

// Replaces every masked slot with a fixed token.
class ConstantFillOracle : public FillOracle {
 public:
  explicit ConstantFillOracle(TokenId fill_token) : fill_token_(fill_token) {}

  TokenSeq fill(const MaskedSeq& m) override {
    TokenSeq out;
    out.reserve(m.slots.size());
    for (const auto& slot : m.slots) out.push_back(slot.masked ? fill_token_ : slot.token);
    return out;
  }

 private:
  TokenId fill_token_;
};

// Interleaves a fixed filler token around the requested tokens.
class ConstantComposeOracle : public ComposeOracle {
 public:
  explicit ConstantComposeOracle(TokenId filler_token) : filler_token_(filler_token) {}

  TokenSeq compose(const SubSeq& tokens) override {
    TokenSeq out;
    out.reserve(tokens.size() * 2 + 1);
    out.push_back(filler_token_);
    for (TokenId t : tokens) {
      out.push_back(t);
      out.push_back(filler_token_);
    }
    return out;
  }

 private:
  TokenId filler_token_;
};

}  // namespace subtrace

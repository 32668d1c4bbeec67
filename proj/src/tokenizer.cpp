#include "rcadapt/tokenizer.hpp"

#include <cctype>

namespace rcadapt {

namespace {

bool is_space(unsigned char c) { return c < 0x80 && std::isspace(c); }
bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::vector<Token> BasicTokenizer::tokenize(std::string_view text) const {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (is_punct(c)) {
      tokens.push_back({std::string(1, text[i]), i, i + 1});
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < text.size()) {
      const auto w = static_cast<unsigned char>(text[i]);
      if (is_space(w) || is_punct(w)) break;
      ++i;
    }
    tokens.push_back({std::string(text.substr(start, i - start)), start, i});
  }
  return tokens;
}

const Tokenizer& default_tokenizer() {
  static const BasicTokenizer tokenizer;
  return tokenizer;
}

}  // namespace rcadapt

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace rcadapt {

// A token with its half-open character range [begin, end) in the source text.
struct Token {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const Token&) const = default;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<Token> tokenize(std::string_view text) const = 0;
};

// Splits on whitespace and emits every ASCII punctuation character as its own
// token. Bytes >= 0x80 are treated as word characters so UTF-8 sequences stay
// intact.
class BasicTokenizer final : public Tokenizer {
 public:
  std::vector<Token> tokenize(std::string_view text) const override;
};

const Tokenizer& default_tokenizer();

}  // namespace rcadapt

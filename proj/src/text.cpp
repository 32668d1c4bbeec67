#include "rcadapt/text.hpp"

#include <cctype>
#include <sstream>

namespace rcadapt {

std::string to_lower(std::string_view text) {
  std::string out(text);
  for (auto& c : out) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80) c = static_cast<char>(std::tolower(u));
  }
  return out;
}

std::vector<std::string> normalized_tokens(std::string_view text) {
  std::string stripped;
  stripped.reserve(text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) continue;
    stripped.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
  }
  std::vector<std::string> tokens;
  std::istringstream in(stripped);
  std::string word;
  while (in >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    tokens.push_back(word);
  }
  return tokens;
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& t : normalized_tokens(text)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

}  // namespace rcadapt

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace rcadapt {

// SQuAD-style answer normalization: lowercase, drop ASCII punctuation, drop
// the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

// Whitespace split of normalize_answer(text).
std::vector<std::string> normalized_tokens(std::string_view text);

std::string to_lower(std::string_view text);

}  // namespace rcadapt

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rcadapt/tokenizer.hpp"

namespace rcadapt {

enum class Domain { source, target };

std::string_view to_string(Domain d);

// Inclusive token-index span (start, end) into a passage or a window.
struct AnswerSpan {
  int start = 0;
  int end = 0;

  bool operator==(const AnswerSpan&) const = default;
};

struct RCExample {
  std::string id;
  std::string context;
  std::vector<Token> passage_tokens;
  std::string question;
  std::vector<Token> question_tokens;
  std::optional<AnswerSpan> answer;
  Domain domain = Domain::source;
  // Free-form gold answer as given by the dataset, before span conduction.
  std::optional<std::string> answer_text;

  // Passage substring covered by a passage-token span.
  std::string span_text(const AnswerSpan& span) const;
  // Reference answer for scoring: answer_text when present, else the span text.
  std::optional<std::string> gold_text() const;
};

// Throws std::invalid_argument when an example breaks the span/offset invariants.
void validate_example(const RCExample& example);

enum class DatasetFormat { span_json, cloze_json, conversational_json };

DatasetFormat parse_dataset_format(std::string_view name);

std::vector<RCExample> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                    Domain domain = Domain::source,
                                    const Tokenizer& tokenizer = default_tokenizer());

// Parses an in-memory JSON document with the same rules as load_dataset.
std::vector<RCExample> parse_dataset(std::string_view json_text, DatasetFormat format,
                                     Domain domain = Domain::source,
                                     const Tokenizer& tokenizer = default_tokenizer());

// Picks the answer occurrence with the smallest summed distance to the nearest
// occurrence of every question entity. Ties go to the smallest index. Entities
// with no occurrence contribute nothing.
int extract_cloze_span(const std::vector<Token>& passage_tokens,
                       const std::vector<int>& answer_occurrences,
                       const std::vector<std::vector<int>>& entity_occurrences);

// Span of at most max_span_len tokens with the highest token F1 against
// answer_text, or nullopt when no span overlaps the answer at all. Spans whose
// first or last token normalizes to nothing are not considered.
std::optional<AnswerSpan> best_f1_span(const std::vector<Token>& passage_tokens,
                                       std::string_view answer_text, int max_span_len = 30);

inline constexpr std::string_view kTurnSeparator = "[TURN]";

// q1 sep a1 sep ... q_{t-1} sep a_{t-1} sep current.
std::vector<Token> build_conversational_question(
    const std::vector<std::pair<std::vector<Token>, std::vector<Token>>>& history,
    const std::vector<Token>& current);

// Keeps the last max_len tokens.
std::vector<Token> truncate_query(const std::vector<Token>& tokens, int max_len);

// Lowercased token-string to id table with reserved special tokens.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kUnk = 3;
  static constexpr int kTurn = 4;

  Vocabulary();

  int add(std::string_view token);
  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  // Tokens in first-appearance order over questions then passages.
  static Vocabulary build(const std::vector<const std::vector<RCExample>*>& datasets);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct CharRange {
  int begin = -1;
  int end = -1;

  bool operator==(const CharRange&) const = default;
};

struct EncodedWindow {
  std::string example_id;
  std::vector<int> token_ids;
  std::vector<bool> passage_mask;
  int window_offset = 0;
  std::vector<CharRange> char_offsets;
  std::optional<AnswerSpan> label;

  int length() const { return static_cast<int>(token_ids.size()); }
  // Number of leading non-padding positions.
  int valid_length() const;
  // Sequence position of the first passage token (or -1 without passage).
  int passage_begin() const;
  int passage_count() const;
  // Maps a window position to its passage token index.
  int to_passage_index(int position) const { return position - passage_begin() + window_offset; }
};

struct WindowOptions {
  int max_len = 64;  // m
  int stride = 128;
  int max_query_len = 40;
};

inline constexpr int kReservedPositions = 3;  // [CLS], [SEP], [SEP]

// Sliding-window encoding of one example: [CLS] question [SEP] passage-slice [SEP] pad...
// Consecutive windows advance by min(stride, capacity) so every passage token is
// covered. With training=true, windows that do not fully contain the answer are
// dropped.
std::vector<EncodedWindow> window_examples(const RCExample& example, const Vocabulary& vocab,
                                           const WindowOptions& options, bool training);

std::vector<EncodedWindow> window_dataset(const std::vector<RCExample>& examples,
                                          const Vocabulary& vocab, const WindowOptions& options,
                                          bool training);

// One JSON object per window, one window per line.
void write_windows_jsonl(std::ostream& out, const std::vector<EncodedWindow>& windows);

}  // namespace rcadapt

#include "rcadapt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "rcadapt/errors.hpp"
#include "rcadapt/text.hpp"

namespace rcadapt {

using nlohmann::json;

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

std::string RCExample::span_text(const AnswerSpan& span) const {
  const auto& first = passage_tokens.at(static_cast<std::size_t>(span.start));
  const auto& last = passage_tokens.at(static_cast<std::size_t>(span.end));
  return context.substr(first.begin, last.end - first.begin);
}

std::optional<std::string> RCExample::gold_text() const {
  if (answer_text) return answer_text;
  if (answer) return span_text(*answer);
  return std::nullopt;
}

void validate_example(const RCExample& example) {
  const auto M = static_cast<int>(example.passage_tokens.size());
  if (example.answer) {
    const auto& a = *example.answer;
    if (a.start < 0 || a.start > a.end || a.end >= M) {
      throw std::invalid_argument("example " + example.id + ": answer span out of range");
    }
  }
  std::size_t prev_end = 0;
  for (const auto& t : example.passage_tokens) {
    if (t.begin < prev_end || t.end <= t.begin || t.end > example.context.size() ||
        example.context.compare(t.begin, t.end - t.begin, t.text) != 0) {
      throw std::invalid_argument("example " + example.id + ": token offsets do not match context");
    }
    prev_end = t.end;
  }
}

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "span_json") return DatasetFormat::span_json;
  if (name == "cloze_json") return DatasetFormat::cloze_json;
  if (name == "conversational_json") return DatasetFormat::conversational_json;
  throw ConfigError("unknown dataset format '" + std::string(name) + "'");
}

namespace {

[[noreturn]] void schema_error(std::size_t index, const std::string& field, const std::string& what) {
  throw ParseError("record " + std::to_string(index) + ": field '" + field + "' " + what);
}

const json& require(const json& record, std::size_t index, const char* field, json::value_t type) {
  auto it = record.find(field);
  if (it == record.end()) schema_error(index, field, "is missing");
  const bool ok = type == json::value_t::number_integer ? it->is_number_integer()
                  : type == json::value_t::string       ? it->is_string()
                  : type == json::value_t::array        ? it->is_array()
                  : type == json::value_t::object       ? it->is_object()
                                                        : true;
  if (!ok) schema_error(index, field, "has the wrong type");
  return *it;
}

std::string require_string(const json& record, std::size_t index, const char* field) {
  return require(record, index, field, json::value_t::string).get<std::string>();
}

// Token run covering the character range [begin, end); nullopt when the range
// touches no token.
std::optional<AnswerSpan> snap_to_tokens(const std::vector<Token>& tokens, std::size_t begin,
                                         std::size_t end) {
  int first = -1;
  int last = -1;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const auto& t = tokens[static_cast<std::size_t>(i)];
    if (t.end > begin && t.begin < end) {
      if (first < 0) first = i;
      last = i;
    }
  }
  if (first < 0) return std::nullopt;
  return AnswerSpan{first, last};
}

std::vector<Token> tokenize_shifted(const Tokenizer& tokenizer, std::string_view text,
                                    std::size_t shift) {
  auto tokens = tokenizer.tokenize(text);
  for (auto& t : tokens) {
    t.begin += shift;
    t.end += shift;
  }
  return tokens;
}

const std::regex& mask_pattern() {
  static const std::regex pattern("@(entity[0-9]+|placeholder)");
  return pattern;
}

// Tokenizes text keeping "@entityN"/"@placeholder" masks as single tokens.
std::vector<Token> tokenize_with_masks(const Tokenizer& tokenizer, const std::string& text) {
  std::vector<Token> tokens;
  std::size_t cursor = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), mask_pattern());
       it != std::sregex_iterator(); ++it) {
    const auto pos = static_cast<std::size_t>(it->position());
    const auto len = static_cast<std::size_t>(it->length());
    auto before = tokenize_shifted(tokenizer, std::string_view(text).substr(cursor, pos - cursor), cursor);
    tokens.insert(tokens.end(), before.begin(), before.end());
    tokens.push_back({text.substr(pos, len), pos, pos + len});
    cursor = pos + len;
  }
  auto rest = tokenize_shifted(tokenizer, std::string_view(text).substr(cursor), cursor);
  tokens.insert(tokens.end(), rest.begin(), rest.end());
  return tokens;
}

struct Replaced {
  std::string text;
  std::vector<Token> tokens;
  // For each original token, the inclusive range of replacement tokens.
  std::vector<AnswerSpan> index_map;
};

Replaced replace_masks(const Tokenizer& tokenizer, const std::string& text,
                       const std::vector<Token>& tokens,
                       const std::map<std::string, std::string>& entity_map) {
  Replaced out;
  std::size_t cursor = 0;
  for (const auto& t : tokens) {
    out.text.append(text, cursor, t.begin - cursor);
    const int first = static_cast<int>(out.tokens.size());
    auto found = entity_map.find(t.text);
    std::vector<Token> pieces;
    if (found != entity_map.end()) pieces = tokenize_shifted(tokenizer, found->second, out.text.size());
    if (!pieces.empty()) {
      out.text += found->second;
      out.tokens.insert(out.tokens.end(), pieces.begin(), pieces.end());
    } else {
      const auto at = out.text.size();
      out.text += t.text;
      out.tokens.push_back({t.text, at, at + t.text.size()});
    }
    out.index_map.push_back({first, static_cast<int>(out.tokens.size()) - 1});
    cursor = t.end;
  }
  out.text.append(text, cursor, std::string::npos);
  return out;
}

bool is_non_span_answer(std::string_view answer) {
  const auto norm = normalize_answer(answer);
  return norm.empty() || norm == "yes" || norm == "no" || norm == "unknown";
}

std::optional<RCExample> parse_span_record(const json& r, std::size_t index, Domain domain,
                                           const Tokenizer& tokenizer) {
  RCExample ex;
  ex.id = require_string(r, index, "id");
  ex.context = require_string(r, index, "context");
  ex.question = require_string(r, index, "question");
  ex.domain = domain;
  const auto& answers = require(r, index, "answers", json::value_t::array);
  if (answers.empty()) return std::nullopt;
  const auto& a = answers.front();
  if (!a.is_object()) schema_error(index, "answers", "must hold objects");
  const auto text = require_string(a, index, "text");
  const auto& start_field = require(a, index, "answer_start", json::value_t::number_integer);
  const auto start = start_field.get<long long>();
  if (start < 0 || static_cast<std::size_t>(start) + text.size() > ex.context.size()) {
    schema_error(index, "answer_start", "points outside the context");
  }
  ex.passage_tokens = tokenizer.tokenize(ex.context);
  ex.question_tokens = tokenizer.tokenize(ex.question);
  const auto begin = static_cast<std::size_t>(start);
  ex.answer = snap_to_tokens(ex.passage_tokens, begin, begin + text.size());
  if (!ex.answer) return std::nullopt;
  ex.answer_text = text;
  return ex;
}

std::optional<RCExample> parse_cloze_record(const json& r, std::size_t index, Domain domain,
                                            const Tokenizer& tokenizer) {
  RCExample ex;
  ex.id = require_string(r, index, "id");
  const auto context = require_string(r, index, "context");
  const auto question = require_string(r, index, "question");
  const auto answer_entity = require_string(r, index, "answer_entity");
  const auto& entities = require(r, index, "question_entities", json::value_t::array);
  std::map<std::string, std::string> entity_map;
  if (auto it = r.find("entity_map"); it != r.end()) {
    if (!it->is_object()) schema_error(index, "entity_map", "has the wrong type");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) schema_error(index, "entity_map", "values must be strings");
      entity_map[k] = v.get<std::string>();
    }
  }
  ex.domain = domain;

  const auto passage = tokenize_with_masks(tokenizer, context);
  std::vector<int> answer_occ;
  for (int i = 0; i < static_cast<int>(passage.size()); ++i) {
    if (passage[static_cast<std::size_t>(i)].text == answer_entity) answer_occ.push_back(i);
  }
  if (answer_occ.empty()) return std::nullopt;
  std::vector<std::vector<int>> entity_occ;
  for (const auto& e : entities) {
    if (!e.is_string()) schema_error(index, "question_entities", "must hold strings");
    std::vector<int> occ;
    const auto name = e.get<std::string>();
    for (int i = 0; i < static_cast<int>(passage.size()); ++i) {
      if (passage[static_cast<std::size_t>(i)].text == name) occ.push_back(i);
    }
    entity_occ.push_back(std::move(occ));
  }
  const int answer_index = extract_cloze_span(passage, answer_occ, entity_occ);

  // Masks are replaced only after the answer index is fixed.
  auto replaced = replace_masks(tokenizer, context, passage, entity_map);
  ex.context = std::move(replaced.text);
  ex.passage_tokens = std::move(replaced.tokens);
  ex.answer = replaced.index_map[static_cast<std::size_t>(answer_index)];
  auto q = replace_masks(tokenizer, question, tokenize_with_masks(tokenizer, question), entity_map);
  ex.question = std::move(q.text);
  ex.question_tokens = std::move(q.tokens);
  ex.answer_text = ex.span_text(*ex.answer);
  return ex;
}

std::optional<RCExample> parse_conversational_record(const json& r, std::size_t index,
                                                     Domain domain, const Tokenizer& tokenizer) {
  RCExample ex;
  ex.id = require_string(r, index, "id");
  ex.context = require_string(r, index, "context");
  const auto question = require_string(r, index, "question");
  require(r, index, "turn", json::value_t::number_integer);
  const auto& history = require(r, index, "history", json::value_t::array);
  const auto answer_text = require_string(r, index, "answer_text");
  ex.domain = domain;

  std::vector<std::pair<std::vector<Token>, std::vector<Token>>> turns;
  for (const auto& h : history) {
    if (!h.is_object()) schema_error(index, "history", "must hold objects");
    turns.emplace_back(tokenizer.tokenize(require_string(h, index, "q")),
                       tokenizer.tokenize(require_string(h, index, "a")));
  }
  if (is_non_span_answer(answer_text)) return std::nullopt;
  ex.passage_tokens = tokenizer.tokenize(ex.context);
  ex.answer = best_f1_span(ex.passage_tokens, answer_text);
  if (!ex.answer) return std::nullopt;
  ex.answer_text = answer_text;
  ex.question_tokens = build_conversational_question(turns, tokenizer.tokenize(question));
  // Rebuild the display string so question token offsets index into it.
  ex.question.clear();
  for (auto& t : ex.question_tokens) {
    if (!ex.question.empty()) ex.question.push_back(' ');
    t.begin = ex.question.size();
    ex.question += t.text;
    t.end = ex.question.size();
  }
  return ex;
}

}  // namespace

std::vector<RCExample> parse_dataset(std::string_view json_text, DatasetFormat format,
                                     Domain domain, const Tokenizer& tokenizer) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("data") || !doc["data"].is_array()) {
    throw ParseError("top-level field 'data' is missing or not an array");
  }
  std::vector<RCExample> out;
  const auto& data = doc["data"];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& record = data[i];
    if (!record.is_object()) throw ParseError("record " + std::to_string(i) + ": not an object");
    std::optional<RCExample> ex;
    switch (format) {
      case DatasetFormat::span_json: ex = parse_span_record(record, i, domain, tokenizer); break;
      case DatasetFormat::cloze_json: ex = parse_cloze_record(record, i, domain, tokenizer); break;
      case DatasetFormat::conversational_json:
        ex = parse_conversational_record(record, i, domain, tokenizer);
        break;
    }
    if (ex) {
      validate_example(*ex);
      out.push_back(std::move(*ex));
    }
  }
  return out;
}

std::vector<RCExample> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                    Domain domain, const Tokenizer& tokenizer) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str(), format, domain, tokenizer);
}

int extract_cloze_span(const std::vector<Token>& passage_tokens,
                       const std::vector<int>& answer_occurrences,
                       const std::vector<std::vector<int>>& entity_occurrences) {
  if (answer_occurrences.empty()) throw std::invalid_argument("answer not found in passage");
  const auto M = static_cast<int>(passage_tokens.size());
  int best = -1;
  long long best_cost = std::numeric_limits<long long>::max();
  for (int a : answer_occurrences) {
    if (a < 0 || a >= M) throw std::out_of_range("answer occurrence outside passage");
    long long cost = 0;
    for (const auto& occ : entity_occurrences) {
      if (occ.empty()) continue;
      long long nearest = std::numeric_limits<long long>::max();
      for (int e : occ) nearest = std::min<long long>(nearest, std::abs(a - e));
      cost += nearest;
    }
    if (cost < best_cost || (cost == best_cost && a < best)) {
      best = a;
      best_cost = cost;
    }
  }
  return best;
}

std::optional<AnswerSpan> best_f1_span(const std::vector<Token>& passage_tokens,
                                       std::string_view answer_text, int max_span_len) {
  if (max_span_len < 1) throw std::invalid_argument("max_span_len must be >= 1");
  const auto gold = normalized_tokens(answer_text);
  if (gold.empty()) return std::nullopt;
  std::unordered_map<std::string, int> gold_counts;
  for (const auto& g : gold) ++gold_counts[g];

  // Each passage token normalizes to zero or more words.
  std::vector<std::vector<std::string>> words;
  words.reserve(passage_tokens.size());
  for (const auto& t : passage_tokens) words.push_back(normalized_tokens(t.text));

  const auto M = static_cast<int>(passage_tokens.size());
  const auto gold_len = static_cast<long long>(gold.size());
  std::optional<AnswerSpan> best;
  long long best_num = 0;  // F1 = 2*overlap / (pred_len + gold_len), stored as a fraction
  long long best_den = 1;
  // Spans never start or end on a token that normalizes away (articles,
  // punctuation); such a span ties with its trimmed form.
  for (int i = 0; i < M; ++i) {
    if (words[static_cast<std::size_t>(i)].empty()) continue;
    std::unordered_map<std::string, int> pred_counts;
    long long overlap = 0;
    long long pred_len = 0;
    for (int j = i; j < std::min(M, i + max_span_len); ++j) {
      for (const auto& w : words[static_cast<std::size_t>(j)]) {
        auto g = gold_counts.find(w);
        if (g != gold_counts.end() && pred_counts[w] < g->second) ++overlap;
        ++pred_counts[w];
        ++pred_len;
      }
      if (overlap == 0 || words[static_cast<std::size_t>(j)].empty()) continue;
      const long long num = 2 * overlap;
      const long long den = pred_len + gold_len;
      if (!best || num * best_den > best_num * den) {
        best = AnswerSpan{i, j};
        best_num = num;
        best_den = den;
      }
    }
  }
  return best;
}

std::vector<Token> build_conversational_question(
    const std::vector<std::pair<std::vector<Token>, std::vector<Token>>>& history,
    const std::vector<Token>& current) {
  std::vector<Token> out;
  const Token sep{std::string(kTurnSeparator), 0, 0};
  for (const auto& [q, a] : history) {
    out.insert(out.end(), q.begin(), q.end());
    out.push_back(sep);
    out.insert(out.end(), a.begin(), a.end());
    out.push_back(sep);
  }
  out.insert(out.end(), current.begin(), current.end());
  return out;
}

std::vector<Token> truncate_query(const std::vector<Token>& tokens, int max_len) {
  if (max_len < 0) throw std::invalid_argument("max_len must be non-negative");
  if (static_cast<int>(tokens.size()) <= max_len) return tokens;
  return {tokens.end() - max_len, tokens.end()};
}

Vocabulary::Vocabulary() {
  for (const char* s : {"[PAD]", "[CLS]", "[SEP]", "[UNK]"}) add(s);
  add(kTurnSeparator);
}

int Vocabulary::add(std::string_view token) {
  auto key = token.size() > 0 && token.front() == '[' ? std::string(token) : to_lower(token);
  auto [it, inserted] = ids_.emplace(key, size());
  if (inserted) tokens_.push_back(std::move(key));
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  if (auto it = ids_.find(to_lower(token)); it != ids_.end()) return it->second;
  return kUnk;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (n < v.size()) {
      if (line != v.token(n)) throw ParseError("vocabulary special token mismatch at line " + std::to_string(n));
    } else if (v.add(line) != n) {
      throw ParseError("duplicate vocabulary entry '" + line + "'");
    }
    ++n;
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<const std::vector<RCExample>*>& datasets) {
  Vocabulary v;
  for (const auto* ds : datasets) {
    for (const auto& ex : *ds) {
      for (const auto& t : ex.question_tokens) v.add(t.text);
      for (const auto& t : ex.passage_tokens) v.add(t.text);
    }
  }
  return v;
}

int EncodedWindow::valid_length() const {
  int n = length();
  while (n > 0 && token_ids[static_cast<std::size_t>(n - 1)] == Vocabulary::kPad) --n;
  return n;
}

int EncodedWindow::passage_begin() const {
  for (int i = 0; i < length(); ++i) {
    if (passage_mask[static_cast<std::size_t>(i)]) return i;
  }
  return -1;
}

int EncodedWindow::passage_count() const {
  return static_cast<int>(std::count(passage_mask.begin(), passage_mask.end(), true));
}

std::vector<EncodedWindow> window_examples(const RCExample& example, const Vocabulary& vocab,
                                           const WindowOptions& options, bool training) {
  if (options.stride < 1) throw ConfigError("stride must be >= 1");
  if (options.max_len <= options.max_query_len + kReservedPositions) {
    throw ConfigError("max_len must exceed max_query_len + 3");
  }
  if (training && !example.answer) {
    throw std::invalid_argument("example " + example.id + " has no answer for training windows");
  }
  const auto question = truncate_query(example.question_tokens, options.max_query_len);
  const int q_len = static_cast<int>(question.size());
  const int capacity = options.max_len - q_len - kReservedPositions;
  const int M = static_cast<int>(example.passage_tokens.size());
  const int step = std::min(options.stride, capacity);
  const int p_begin = q_len + 2;

  std::vector<EncodedWindow> windows;
  for (int offset = 0;; offset += step) {
    const int count = std::min(capacity, M - offset);
    std::optional<AnswerSpan> label;
    if (example.answer && example.answer->start >= offset && example.answer->end < offset + count) {
      label = AnswerSpan{example.answer->start - offset + p_begin, example.answer->end - offset + p_begin};
    }
    if (!training || label) {
      EncodedWindow w;
      w.example_id = example.id;
      w.window_offset = offset;
      w.label = label;
      w.token_ids.assign(static_cast<std::size_t>(options.max_len), Vocabulary::kPad);
      w.passage_mask.assign(static_cast<std::size_t>(options.max_len), false);
      w.char_offsets.assign(static_cast<std::size_t>(options.max_len), CharRange{});
      w.token_ids[0] = Vocabulary::kCls;
      for (int i = 0; i < q_len; ++i) w.token_ids[static_cast<std::size_t>(1 + i)] = vocab.id(question[static_cast<std::size_t>(i)].text);
      w.token_ids[static_cast<std::size_t>(q_len + 1)] = Vocabulary::kSep;
      for (int i = 0; i < count; ++i) {
        const auto& t = example.passage_tokens[static_cast<std::size_t>(offset + i)];
        const auto pos = static_cast<std::size_t>(p_begin + i);
        w.token_ids[pos] = vocab.id(t.text);
        w.passage_mask[pos] = true;
        w.char_offsets[pos] = {static_cast<int>(t.begin), static_cast<int>(t.end)};
      }
      w.token_ids[static_cast<std::size_t>(p_begin + std::max(count, 0))] = Vocabulary::kSep;
      windows.push_back(std::move(w));
    }
    if (offset + capacity >= M) break;
  }
  return windows;
}

std::vector<EncodedWindow> window_dataset(const std::vector<RCExample>& examples,
                                          const Vocabulary& vocab, const WindowOptions& options,
                                          bool training) {
  std::vector<EncodedWindow> out;
  for (const auto& ex : examples) {
    auto w = window_examples(ex, vocab, options, training);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

void write_windows_jsonl(std::ostream& out, const std::vector<EncodedWindow>& windows) {
  for (const auto& w : windows) {
    json j;
    j["example_id"] = w.example_id;
    j["token_ids"] = w.token_ids;
    j["passage_mask"] = w.passage_mask;
    j["window_offset"] = w.window_offset;
    json offsets = json::array();
    for (const auto& c : w.char_offsets) offsets.push_back({c.begin, c.end});
    j["char_offsets"] = std::move(offsets);
    j["label"] = w.label ? json{w.label->start, w.label->end} : json(nullptr);
    out << j.dump() << '\n';
  }
}

}  // namespace rcadapt

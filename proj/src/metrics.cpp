#include "rcadapt/metrics.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>

#include "rcadapt/text.hpp"

namespace rcadapt {

int exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1 : 0;
}

double f1_score(std::string_view prediction, std::string_view gold) {
  const auto pred = normalized_tokens(prediction);
  const auto ref = normalized_tokens(gold);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : ref) ++counts[t];
  int common = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(common) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

EvalResult evaluate_predictions(const std::vector<SpanPrediction>& predictions,
                                const std::vector<RCExample>& examples) {
  if (examples.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  std::map<std::string, const SpanPrediction*> by_id;
  for (const auto& p : predictions) by_id.emplace(p.example_id, &p);
  long long matches = 0;
  std::vector<double> f1s;
  f1s.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto gold = ex.gold_text();
    if (!gold) throw std::invalid_argument("example " + ex.id + " has no gold answer");
    auto it = by_id.find(ex.id);
    if (it == by_id.end()) throw std::invalid_argument("no prediction for example " + ex.id);
    const auto text = ex.span_text(it->second->span);
    matches += exact_match(text, *gold);
    f1s.push_back(f1_score(text, *gold));
  }
  // Summing in sorted order keeps the result independent of dataset order.
  std::sort(f1s.begin(), f1s.end());
  double f1_sum = 0.0;
  for (double v : f1s) f1_sum += v;
  const auto n = static_cast<double>(examples.size());
  EvalResult r;
  r.n_examples = static_cast<int>(examples.size());
  r.exact_match = 100.0 * static_cast<double>(matches) / n;
  r.f1 = 100.0 * f1_sum / n;
  return r;
}

EvalResult evaluate(SpanModel& model, const Vocabulary& vocab, const std::vector<RCExample>& examples,
                    const DecodeOptions& options) {
  if (examples.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  for (const auto& ex : examples) {
    if (!ex.gold_text()) throw std::invalid_argument("example " + ex.id + " has no gold answer");
  }
  return evaluate_predictions(predict_examples(model, vocab, examples, options), examples);
}

}  // namespace rcadapt

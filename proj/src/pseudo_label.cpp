#include "rcadapt/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

#include "json.hpp"

namespace rcadapt {

namespace {

bool ranks_before(const SpanCandidate& a, const SpanCandidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start != b.start) return a.start < b.start;
  return a.end < b.end;
}

}  // namespace

NBestList n_best_spans(const Vector& start_logits, const Vector& end_logits,
                       const std::vector<bool>& passage_mask, int n_best, int max_span_len) {
  if (n_best < 1) throw std::invalid_argument("n_best must be >= 1");
  if (max_span_len < 1) throw std::invalid_argument("max_span_len must be >= 1");
  std::vector<int> valid;
  for (int i = 0; i < static_cast<int>(passage_mask.size()); ++i) {
    if (passage_mask[static_cast<std::size_t>(i)]) valid.push_back(i);
  }
  if (valid.empty()) throw std::invalid_argument("empty passage window");

  // Every valid pair is scored: |valid| * max_span_len is small next to the
  // forward pass, and the result is exact under the span-length constraint.
  std::vector<SpanCandidate> pairs;
  pairs.reserve(valid.size() * static_cast<std::size_t>(std::min<int>(max_span_len, static_cast<int>(valid.size()))));
  for (std::size_t a = 0; a < valid.size(); ++a) {
    const int i = valid[a];
    for (std::size_t b = a; b < valid.size() && valid[b] - i < max_span_len; ++b) {
      const int j = valid[b];
      pairs.push_back({i, j, start_logits[i] + end_logits[j]});
    }
  }
  const auto keep = std::min<std::size_t>(static_cast<std::size_t>(n_best), pairs.size());
  std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(keep), pairs.end(), ranks_before);
  pairs.resize(keep);
  return NBestList{std::move(pairs)};
}

SpanPrediction generating_probability(const NBestList& nbest) {
  if (nbest.candidates.empty()) throw std::invalid_argument("empty n-best list");
  const auto& top = nbest.candidates.front();
  double denom = 0.0;
  for (const auto& c : nbest.candidates) denom += std::exp(c.score - top.score);
  SpanPrediction p;
  p.span = {top.start, top.end};
  p.p_g = 1.0 / denom;
  return p;
}

SpanPrediction predict_window(const EncodedWindow& window, const Vector& start_logits,
                              const Vector& end_logits, int n_best, int max_span_len) {
  auto p = generating_probability(n_best_spans(start_logits, end_logits, window.passage_mask, n_best, max_span_len));
  p.example_id = window.example_id;
  p.span = {window.to_passage_index(p.span.start), window.to_passage_index(p.span.end)};
  return p;
}

SpanPrediction aggregate_windows(const std::vector<SpanPrediction>& window_predictions) {
  if (window_predictions.empty()) throw std::invalid_argument("no window predictions to aggregate");
  const SpanPrediction* best = &window_predictions.front();
  for (const auto& p : window_predictions) {
    if (p.p_g > best->p_g) best = &p;
  }
  return *best;
}

PseudoLabeledSet filter_pseudo_labels(const std::vector<SpanPrediction>& predictions,
                                      const std::vector<RCExample>& examples, double threshold) {
  std::map<std::string, const RCExample*> by_id;
  for (const auto& ex : examples) by_id.emplace(ex.id, &ex);
  PseudoLabeledSet set;
  set.threshold = threshold;
  for (const auto& p : predictions) {
    if (p.p_g < threshold) continue;
    auto it = by_id.find(p.example_id);
    if (it == by_id.end()) throw std::invalid_argument("prediction for unknown example " + p.example_id);
    RCExample labeled = *it->second;
    labeled.answer = p.span;
    labeled.answer_text.reset();
    set.examples.push_back(std::move(labeled));
    set.predictions.push_back(p);
  }
  return set;
}

std::vector<SpanPrediction> predict_examples(SpanModel& model, const Vocabulary& vocab,
                                             const std::vector<RCExample>& examples,
                                             const DecodeOptions& options) {
  std::vector<EncodedWindow> windows;
  std::vector<std::size_t> owner;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    for (auto& w : window_examples(examples[e], vocab, options.windows, false)) {
      windows.push_back(std::move(w));
      owner.push_back(e);
    }
  }
  std::vector<std::vector<SpanPrediction>> per_example(examples.size());
  const auto batch = static_cast<std::size_t>(std::max(1, options.batch_size));
  std::vector<const EncodedWindow*> ptrs;
  for (std::size_t start = 0; start < windows.size(); start += batch) {
    const auto stop = std::min(windows.size(), start + batch);
    ptrs.clear();
    for (auto k = start; k < stop; ++k) ptrs.push_back(&windows[k]);
    const auto tape = model.forward(ptrs, false);
    for (auto k = start; k < stop; ++k) {
      const auto& out = tape.outputs[k - start];
      per_example[owner[k]].push_back(
          predict_window(windows[k], out.start_logits, out.end_logits, options.n_best, options.max_span_len));
    }
  }
  std::vector<SpanPrediction> out;
  out.reserve(examples.size());
  for (const auto& preds : per_example) out.push_back(aggregate_windows(preds));
  return out;
}

void write_pseudo_labels_jsonl(std::ostream& out, const PseudoLabeledSet& set) {
  for (const auto& p : set.predictions) {
    nlohmann::json j{{"id", p.example_id}, {"start", p.span.start}, {"end", p.span.end}, {"p_g", p.p_g},
                     {"epoch", set.epoch}};
    out << j.dump() << '\n';
  }
}

}  // namespace rcadapt

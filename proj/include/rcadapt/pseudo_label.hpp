#pragma once

#include <string>
#include <vector>

#include "rcadapt/corpus.hpp"
#include "rcadapt/encoder.hpp"

namespace rcadapt {

struct SpanCandidate {
  int start = 0;
  int end = 0;
  double score = 0.0;  // g^s_start + g^e_end

  bool operator==(const SpanCandidate&) const = default;
};

// Candidates ordered by descending score, ties by smaller start then smaller end.
struct NBestList {
  std::vector<SpanCandidate> candidates;
};

struct SpanPrediction {
  std::string example_id;
  AnswerSpan span;
  double p_g = 0.0;
};

struct PseudoLabeledSet {
  // Each example carries its predicted span as `answer`.
  std::vector<RCExample> examples;
  std::vector<SpanPrediction> predictions;
  int epoch = 0;
  double threshold = 0.0;

  std::size_t size() const { return examples.size(); }
};

// Top-n_best (i, j) pairs by g^s_i + g^e_j over passage positions with
// i <= j and j - i < max_span_len. Throws when no position is valid.
NBestList n_best_spans(const Vector& start_logits, const Vector& end_logits,
                       const std::vector<bool>& passage_mask, int n_best, int max_span_len = 30);

// Softmax over the n-best scores; p_g is the largest probability and the span
// is the top candidate. Coordinates are those of the n-best list.
SpanPrediction generating_probability(const NBestList& nbest);

// One window's best span, mapped to passage-token coordinates.
SpanPrediction predict_window(const EncodedWindow& window, const Vector& start_logits,
                              const Vector& end_logits, int n_best, int max_span_len);

// The window prediction with the highest p_g (earliest on ties). Spans must
// already be in passage coordinates.
SpanPrediction aggregate_windows(const std::vector<SpanPrediction>& window_predictions);

// Keeps predictions with p_g >= threshold and attaches their spans as labels.
PseudoLabeledSet filter_pseudo_labels(const std::vector<SpanPrediction>& predictions,
                                      const std::vector<RCExample>& examples, double threshold);

struct DecodeOptions {
  WindowOptions windows;
  int n_best = 20;
  int max_span_len = 30;
  int batch_size = 32;
};

// Eval-mode prediction for every example, one aggregated prediction each, in
// input order.
std::vector<SpanPrediction> predict_examples(SpanModel& model, const Vocabulary& vocab,
                                             const std::vector<RCExample>& examples,
                                             const DecodeOptions& options);

// {"id", "start", "end", "p_g", "epoch"} per line.
void write_pseudo_labels_jsonl(std::ostream& out, const PseudoLabeledSet& set);

}  // namespace rcadapt

#pragma once

#include <string_view>
#include <vector>

#include "rcadapt/corpus.hpp"
#include "rcadapt/encoder.hpp"
#include "rcadapt/pseudo_label.hpp"

namespace rcadapt {

// 1 when the normalized strings are equal, else 0.
int exact_match(std::string_view prediction, std::string_view gold);

// Token-overlap F1 over normalized tokens. Both empty gives 1, one empty gives 0.
double f1_score(std::string_view prediction, std::string_view gold);

// Percentages in [0, 100].
struct EvalResult {
  double exact_match = 0.0;
  double f1 = 0.0;
  int n_examples = 0;

  // Mean of EM and F1, the score used for transfer forces.
  double average() const { return (exact_match + f1) / 2.0; }
};

// Scores one prediction per example (matched by id). Throws on an empty or
// unlabeled dataset.
EvalResult evaluate_predictions(const std::vector<SpanPrediction>& predictions,
                                const std::vector<RCExample>& examples);

EvalResult evaluate(SpanModel& model, const Vocabulary& vocab, const std::vector<RCExample>& examples,
                    const DecodeOptions& options);

}  // namespace rcadapt

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rcadapt/corpus.hpp"
#include "rcadapt/tensor.hpp"

namespace testing {

inline rcadapt::RCExample make_example(const std::string& id, const std::string& question, const std::string& context,
                                       int start, int end) {
  rcadapt::RCExample ex;
  ex.id = id;
  ex.question = question;
  ex.context = context;
  ex.question_tokens = rcadapt::default_tokenizer().tokenize(question);
  ex.passage_tokens = rcadapt::default_tokenizer().tokenize(context);
  if (start >= 0) {
    ex.answer = rcadapt::AnswerSpan{start, end};
    ex.answer_text = ex.span_text(*ex.answer);
  }
  return ex;
}

// Passage "w0 w1 ... w{n-1}".
inline std::string word_passage(int n, const std::string& stem = "w") {
  std::string out;
  for (int i = 0; i < n; ++i) out += (i ? " " : "") + stem + std::to_string(i);
  return out;
}

inline rcadapt::Matrix random_matrix(int rows, int cols, rcadapt::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  rcadapt::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

inline rcadapt::Vector random_vector(int n, rcadapt::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  rcadapt::Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central difference of f with respect to *x.
inline double central_difference(double* x, const std::function<double()>& f, double h = 1e-6) {
  const double saved = *x;
  *x = saved + h;
  const double up = f();
  *x = saved - h;
  const double down = f();
  *x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace testing

#include "rcadapt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rcadapt {

void zero_grads(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

void truncated_normal_(Matrix& m, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double x = normal(rng);
    while (std::abs(x) > 2.0) x = normal(rng);
    m.data()[i] = x * stddev;
  }
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) return {};
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  Matrix mask(rows, cols);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : 0.0;
  return mask;
}

Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

Vector softmax(const Vector& logits) { return log_softmax(logits).array().exp(); }

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng deserialize_rng(const std::string& state) {
  Rng rng;
  std::istringstream in(state);
  in >> rng;
  if (!in) throw std::invalid_argument("malformed RNG state");
  return rng;
}

}  // namespace rcadapt

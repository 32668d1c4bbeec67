#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rcadapt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

// Normal(0, stddev) resampled until it falls within two standard deviations.
void truncated_normal_(Matrix& m, double stddev, Rng& rng);

// Inverted-dropout mask: entries are 0 with probability p and 1/(1-p) otherwise.
// Returns an empty matrix when dropout is inactive.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, bool train, Rng& rng);

inline Matrix apply_mask(const Matrix& x, const Matrix& mask) {
  return mask.size() == 0 ? x : Matrix(x.cwiseProduct(mask));
}

// Numerically stable log-softmax over a vector.
Vector log_softmax(const Vector& logits);
Vector softmax(const Vector& logits);

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& state);

}  // namespace rcadapt

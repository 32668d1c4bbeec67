#pragma once

#include "rcadapt/tensor.hpp"

namespace rcadapt {

// Adaptive moment estimation with constant learning rate and bias correction.
class Adam {
 public:
  Adam(ParameterList params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step();
  void zero_grad() { zero_grads(params_); }
  double learning_rate() const { return lr_; }
  long long steps() const { return t_; }

 private:
  ParameterList params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long long t_ = 0;
};

}  // namespace rcadapt

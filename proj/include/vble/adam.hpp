#pragma once

#include <vector>

#include "vble/tensor.hpp"

namespace vble {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction, updating leaf tensors in place.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step(const Gradients& grads);
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace vble

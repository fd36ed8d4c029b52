#pragma once

#include <vector>

#include "addp/nn/tensor.hpp"

namespace addp::nn {

/// Adam with L2 weight decay folded into the gradient. Frozen parameters are
/// skipped entirely, so their values stay bit-identical.
class Adam {
 public:
  struct Options {
    Real lr = 1e-4;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.0;
  };

  Adam(std::vector<Parameter*> params, Options opts);

  /// Applies one update using `grad * grad_scale`.
  void step(Real grad_scale = 1.0);
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  Options opts_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace addp::nn

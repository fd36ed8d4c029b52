#include "addp/nn/optim.hpp"

#include <cmath>

namespace addp::nn {

Adam::Adam(std::vector<Parameter*> params, Options opts) : params_(std::move(params)), opts_(opts) {
  for (const Parameter* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(Real grad_scale) {
  ++t_;
  const Real c1 = 1.0 - std::pow(opts_.beta1, static_cast<Real>(t_));
  const Real c2 = 1.0 - std::pow(opts_.beta2, static_cast<Real>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    const Mat g = p.grad * grad_scale + opts_.weight_decay * p.value;
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
    p.value.array() -= opts_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opts_.eps);
  }
}

}  // namespace addp::nn

#pragma once

#include <vector>

#include "faar/tensor.hpp"

namespace faar {

// Plain SGD with momentum: v <- mu*v + g, p <- p - lr*v. Parameters without a
// gradient this step are treated as g = 0 (their velocity still decays).
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double lr, double momentum = 0.9)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    check_arg(lr_ > 0.0, "sgd: learning rate must be > 0");
    check_arg(momentum_ >= 0.0 && momentum_ < 1.0, "sgd: momentum must be in [0,1)");
    vel_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      vel_[i].assign(params_[i].numel(), 0.0);
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      auto& v = vel_[i];
      const bool has_g = p.has_grad();
      const double* g = has_g ? p.grad().data() : nullptr;
      double* w = p.data();
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = momentum_ * v[j] + (has_g ? g[j] : 0.0);
        w[j] -= lr_ * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double* velocity_for(const Tensor& p) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].same_storage(p)) return vel_[i].data();
    return nullptr;
  }

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<double>>& velocities() { return vel_; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> vel_;
  double lr_;
  double momentum_;
};

}  // namespace faar

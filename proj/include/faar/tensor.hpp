#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "faar/common.hpp"

namespace faar {

enum class Dtype { real64, complex128 };

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::real64;
  std::vector<double> re;    // real payload
  std::vector<cplx> cx;      // complex payload
  bool requires_grad = false;  // leaf that wants dL/dx after backward
  bool grad_path = false;      // produced by a recorded op on a gradient path
  Tape* tape = nullptr;        // tape this tensor was recorded on, if any
  std::vector<double> grad;  // dL/dx for real tensors (allocated on demand)
  std::vector<cplx> cgrad;   // cotangent for complex tensors: (dL/dRe, dL/dIm)

  std::size_t numel() const { return shape_numel(shape); }
  bool needs_grad() const { return requires_grad || grad_path; }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(numel(), 0.0);
    return grad;
  }
  std::vector<cplx>& ensure_cgrad() {
    if (cgrad.empty()) cgrad.assign(numel(), cplx(0.0, 0.0));
    return cgrad;
  }
};

}  // namespace detail

// Dense n-dimensional array handle with value semantics on the handle and
// shared storage. Real tensors may carry gradients; complex tensors only
// appear as intermediates of the spectral ops and carry cotangents that are
// internal to backward.
class Tensor {
 public:
  Tensor() : p_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.p_->shape = shape;
    t.p_->re.assign(shape_numel(shape), 0.0);
    return t;
  }

  static Tensor full(const Shape& shape, double value) {
    Tensor t = zeros(shape);
    for (auto& v : t.p_->re) v = value;
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<double> values) {
    check_arg(values.size() == shape_numel(shape),
              "Tensor::from: " + std::to_string(values.size()) +
                  " values for shape " + shape_str(shape));
    Tensor t;
    t.p_->shape = shape;
    t.p_->re = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor complex_zeros(const Shape& shape) {
    Tensor t;
    t.p_->shape = shape;
    t.p_->dtype = Dtype::complex128;
    t.p_->cx.assign(shape_numel(shape), cplx(0.0, 0.0));
    return t;
  }

  static Tensor from_complex(const Shape& shape, std::vector<cplx> values) {
    check_arg(values.size() == shape_numel(shape),
              "Tensor::from_complex: size mismatch for " + shape_str(shape));
    Tensor t;
    t.p_->shape = shape;
    t.p_->dtype = Dtype::complex128;
    t.p_->cx = std::move(values);
    return t;
  }

  // Trainable leaf.
  static Tensor param(const Shape& shape, std::vector<double> values) {
    Tensor t = from(shape, std::move(values));
    t.p_->requires_grad = true;
    return t;
  }

  const Shape& shape() const { return p_->shape; }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t numel() const { return p_->numel(); }
  Dtype dtype() const { return p_->dtype; }
  bool is_complex() const { return p_->dtype == Dtype::complex128; }

  double* data() { return p_->re.data(); }
  const double* data() const { return p_->re.data(); }
  std::vector<double>& values() { return p_->re; }
  const std::vector<double>& values() const { return p_->re; }
  cplx* cdata() { return p_->cx.data(); }
  const cplx* cdata() const { return p_->cx.data(); }
  const std::vector<cplx>& cvalues() const { return p_->cx; }

  double value() const {
    check_arg(!is_complex() && numel() == 1, "Tensor::value: not a real scalar");
    return p_->re[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool v) {
    check_arg(!is_complex() || !v, "complex tensors cannot require grad");
    p_->requires_grad = v;
  }
  bool needs_grad() const { return p_->needs_grad(); }

  bool has_grad() const { return !p_->grad.empty(); }
  const std::vector<double>& grad() const {
    check_state(has_grad(), "Tensor::grad: no gradient has been accumulated");
    return p_->grad;
  }
  std::vector<double>& grad_buffer() { return p_->ensure_grad(); }
  void zero_grad() { p_->grad.clear(); }

  std::shared_ptr<detail::TensorImpl> impl() const { return p_; }
  bool same_storage(const Tensor& other) const { return p_ == other.p_; }

 private:
  std::shared_ptr<detail::TensorImpl> p_;
};

// Records one forward pass. Constructing a Tape makes it the active recorder
// for the current thread; destruction restores the previous one. A tape is
// single-use: exactly one backward per recording, and it is rebuilt for every
// training step (prefix masks change per step, so graphs are never reused).
class Tape {
 public:
  Tape() : prev_(tl_active()) { tl_active() = this; }
  ~Tape() {
    for (auto& n : nodes_) n.out->tape = nullptr;
    tl_active() = prev_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return tl_active(); }

  void record(std::shared_ptr<detail::TensorImpl> out, std::function<void()> pull) {
    out->tape = this;
    out->grad_path = true;
    nodes_.push_back({std::move(out), std::move(pull)});
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss: seeds dloss/dloss = 1 and accumulates
  // into every requires_grad leaf reachable from it. Additive across fan-out.
  void backward(const Tensor& loss) {
    check_arg(!loss.is_complex() && loss.numel() == 1,
              "backward: loss must be a real scalar");
    check_state(loss.impl()->tape == this,
                "backward: loss is detached from this tape");
    check_state(!used_, "backward: tape already consumed; re-record the forward pass");
    used_ = true;
    loss.impl()->ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& n = *it;
      // Nodes whose output never received a gradient contribute nothing.
      if (n.out->grad.empty() && n.out->cgrad.empty()) continue;
      n.pull();
    }
  }

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void()> pull;
  };

  static Tape*& tl_active() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Node> nodes_;
  bool used_ = false;
  Tape* prev_;
};

// Runs the reverse sweep on the tape that recorded `loss`.
inline void backward(const Tensor& loss) {
  check_arg(!loss.is_complex() && loss.numel() == 1,
            "backward: loss must be a real scalar");
  check_state(loss.impl()->tape != nullptr,
              "backward: loss is not attached to a recording tape");
  loss.impl()->tape->backward(loss);
}

}  // namespace faar

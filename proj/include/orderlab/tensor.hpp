#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "orderlab/rng.hpp"

namespace orderlab::ad {

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dim in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename Real>
struct TensorData {
  std::vector<int> shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // empty until backward touches this tensor
  bool requires_grad{false};
};

// Value-semantic handle to a shared storage node. Copies alias the same data,
// which is what the tape's backward closures rely on.
template <typename Real>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<Real>>()) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static Tensor filled(std::vector<int> shape, Real value, bool requires_grad = false) {
    Tensor t;
    const std::size_t n = shape_numel(shape);
    t.d_->shape = std::move(shape);
    t.d_->values.assign(n, value);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<Real> values, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    if (n != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                                  " values, got " + std::to_string(values.size()));
    }
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar_of(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, Real mean, Real stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (Real& v : t.d_->values) v = static_cast<Real>(rng.normal(mean, stddev));
    return t;
  }

  // A Tensor is a handle onto shared storage: const handles still expose
  // mutation of the storage (shared_ptr semantics), which the tape's backward
  // closures rely on after capturing handles by value.
  const std::vector<int>& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->values.size(); }
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) const { d_->requires_grad = b; }

  std::span<const Real> values() const { return d_->values; }
  std::span<Real> values_mut() const { return d_->values; }
  const Real* data() const { return d_->values.data(); }
  Real* data_mut() const { return d_->values.data(); }

  Real scalar() const {
    if (d_->values.size() != 1) {
      throw std::logic_error("tensor: scalar() called on shape " + shape_str(d_->shape));
    }
    return d_->values[0];
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const Real> grad() const {
    if (d_->grad.empty()) throw std::logic_error("tensor: grad not populated; run backward first");
    return d_->grad;
  }
  std::span<Real> grad_mut() const {
    ensure_grad();
    return d_->grad;
  }
  void ensure_grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), Real(0));
  }
  void clear_grad() const { d_->grad.clear(); }

  // Identity of the underlying storage; used by gradient checks and tests.
  const TensorData<Real>* node() const { return d_.get(); }
  TensorData<Real>* node_mut() { return d_.get(); }

 private:
  std::shared_ptr<TensorData<Real>> d_;
};

}  // namespace orderlab::ad

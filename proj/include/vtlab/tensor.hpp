#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "vtlab/rng.hpp"

namespace vtlab {

struct GradNode;

// Dense row-major tensor of 64-bit reals with an optional reverse-mode tape.
// Data and gradient buffers are shared between copies; operations never
// mutate their inputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = std::make_shared<std::vector<double>>(numel(), 0.0);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor scalar(double value) { return full({1}, value); }

  static Tensor from_vec(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.validate_shape();
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw std::invalid_argument("Tensor::from_vec: data length does not match shape");
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : *t.data_) v = sigma * rng.normal();
    return t;
  }

  static Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo = 0.0,
                             double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : *t.data_) v = lo + (hi - lo) * rng.uniform();
    return t;
  }

  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) (*t.data_)[static_cast<int64_t>(i) * n + i] = 1.0;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }

  int dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw std::out_of_range("Tensor::dim: axis out of range");
    return shape_[i];
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape_) n *= d;
    return n;
  }

  bool defined() const { return data_ != nullptr; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::vector<double>& vec() { return *data_; }
  const std::vector<double>& vec() const { return *data_; }

  double& operator[](int64_t i) { return (*data_)[i]; }
  double operator[](int64_t i) const { return (*data_)[i]; }

  int64_t offset_of(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw std::invalid_argument("Tensor::at: rank mismatch");
    int64_t off = 0;
    int axis = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  double& at(std::initializer_list<int> idx) { return (*data_)[offset_of(idx)]; }
  double at(std::initializer_list<int> idx) const { return (*data_)[offset_of(idx)]; }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // ---- autograd ----

  bool requires_grad() const { return requires_grad_; }
  bool tracked() const { return requires_grad_ || node_ != nullptr; }

  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = std::make_shared<std::vector<double>>(numel(), 0.0);
    return *this;
  }

  // Allocates the gradient buffer for an op output that participates in a
  // backward pass. All copies of this tensor share the buffer.
  void make_tracked() {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(numel(), 0.0);
  }

  const std::vector<double>& grad() const {
    if (!grad_) throw std::runtime_error("Tensor::grad: tensor has no gradient buffer");
    return *grad_;
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }

  std::shared_ptr<std::vector<double>> grad_ptr() const { return grad_; }
  std::shared_ptr<std::vector<double>> data_ptr() const { return data_; }
  std::shared_ptr<GradNode> node_ptr() const { return node_; }

  void set_node(std::shared_ptr<GradNode> node) { node_ = std::move(node); }

  // Same storage, no tape edge.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Fresh storage, no tape edge.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  void backward();

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  void validate_shape() const {
    for (int d : shape_)
      if (d <= 0) throw std::invalid_argument("Tensor: extents must be positive");
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  std::shared_ptr<GradNode> node_;
  bool requires_grad_ = false;
};

// One recorded operation on the tape: edges to producing nodes plus a
// closure that routes the output gradient into the inputs' buffers.
struct GradNode {
  std::vector<std::shared_ptr<GradNode>> parents;
  std::function<void()> run;
};

inline void Tensor::backward() {
  if (numel() != 1) throw std::runtime_error("Tensor::backward: root must be a scalar");
  if (!grad_) throw std::runtime_error("Tensor::backward: root is not tracked");
  (*grad_)[0] = 1.0;
  if (!node_) return;

  // Reverse topological order: consumers run before producers.
  std::vector<GradNode*> order;
  std::unordered_set<GradNode*> seen;
  std::vector<std::pair<GradNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      GradNode* p = node->parents[next++].get();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->run();
}

}  // namespace vtlab

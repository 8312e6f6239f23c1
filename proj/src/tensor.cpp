#include "flowsynth/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace flowsynth {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  Tensor::BackwardFn backward;
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_next_order = 0;

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<float> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                                shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  impl->order = t_next_order++;
  return impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor::Tensor(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  impl_ = new_impl(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : impl_(new_impl(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::numel() const { return impl().data.size(); }
std::span<float> Tensor::data() { return impl().data; }
std::span<const float> Tensor::data() const { return impl().data; }

float Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_to_string(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl().requires_grad = flag; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<float> Tensor::grad() const {
  auto& i = impl();
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0f);
  return i.grad;
}

void Tensor::zero_grad() {
  auto& i = impl();
  std::fill(i.grad.begin(), i.grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data, false); }

Tensor Tensor::make_result(Shape shape, std::vector<float> values, std::vector<Tensor> parents, BackwardFn backward) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
  }
  auto impl = new_impl(std::move(shape), std::move(values), needs);
  if (needs) {
    for (auto& p : parents) {
      if (p.defined()) impl->parents.push_back(p.impl_);
    }
    impl->backward = std::move(backward);
  }
  return Tensor(std::move(impl));
}

void Tensor::backward() {
  auto& root = impl();
  if (root.consumed) throw std::logic_error("backward() called twice on the same graph; rebuild it with a new forward pass");
  if (!root.requires_grad) throw std::logic_error("backward() on a tensor that does not require gradients");
  if (root.data.size() != 1) throw std::logic_error("backward() needs a scalar, got shape " + shape_to_string(root.shape));

  std::vector<detail::TensorImpl*> nodes;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->backward) nodes.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  // Creation order is a topological order of the graph.
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->order > b->order; });

  root.grad.assign(1, 1.0f);
  // Hold every interior node alive while closures run.
  std::vector<std::shared_ptr<detail::TensorImpl>> keep;
  keep.reserve(nodes.size());
  for (auto* n : nodes) {
    for (auto& p : n->parents) keep.push_back(p);
  }
  for (auto* n : nodes) {
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0f);
    std::shared_ptr<detail::TensorImpl> self(impl_, n);  // aliasing: non-owning view kept alive by impl_/keep
    n->backward(Tensor(self));
    n->backward = nullptr;
    n->parents.clear();
    if (n != &root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  root.consumed = true;
}

}  // namespace flowsynth

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flowsynth {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense row-major float tensor with an optional gradient buffer. Operations
// on tensors that require gradients record a backward closure; backward()
// walks the recorded graph in reverse creation order and then frees it.
class Tensor {
 public:
  using BackwardFn = std::function<void(const Tensor& out)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Allocates a zero gradient on first access. Tensors are handles, so the
  // buffer is writable through const references too.
  std::span<float> grad() const;
  void zero_grad();

  // Reverse-mode accumulation from this scalar. Throws std::logic_error when
  // the graph was already consumed by an earlier call.
  void backward();

  // Copy of the values without graph history.
  Tensor detach() const;

  bool is_same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  // For op implementations: wraps a freshly computed result. The backward
  // closure is kept only when gradients are enabled and a parent needs them.
  static Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> parents,
                            BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

}  // namespace flowsynth

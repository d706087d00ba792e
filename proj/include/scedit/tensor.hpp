#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "scedit/errors.hpp"

namespace scedit {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

// Calls f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::kF32) return f.template operator()<float>();
  return f.template operator()<double>();
}

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

// Dense row-major array with optional participation in the gradient tape.
//
// Copies share the underlying buffer (handle semantics, like a framework
// tensor). Operations always allocate a fresh result and never write to
// their operands; only the optimizer and grad accumulation mutate buffers in
// place, through the explicit mutable accessors.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, DType dtype = DType::kF32);
  static Tensor zeros(Shape shape, DType dtype = DType::kF32);
  static Tensor full(Shape shape, double value, DType dtype = DType::kF32);
  static Tensor from_vector(Shape shape, std::span<const double> values,
                            DType dtype = DType::kF32);
  static Tensor from_vector(Shape shape, std::span<const float> values);
  static Tensor scalar(double value, DType dtype = DType::kF32);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      DType dtype = DType::kF32);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        DType dtype = DType::kF32);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();

  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  // Deep copy with no gradient history.
  Tensor clone() const;
  // Shares nothing with the source graph; the data is copied.
  Tensor detach() const { return clone(); }
  Tensor to(DType dtype) const;
  Tensor reshape(Shape shape) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  Tensor grad() const;
  void zero_grad();
  void clear_grad();

  // Overwrites this tensor's values with src's (same shape/dtype). Used by
  // checkpoint loading and by the optimizer; never called by operations.
  void assign(const Tensor& src);

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool bit_equal(const Tensor& other) const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Controls what the forward pass records.
//   kInference: nothing is recorded; outputs carry no history.
//   kRecord:    an op is recorded when any operand needs a gradient.
//   kRecordAll: every op is recorded, even over frozen operands. Used to
//               measure what a non-decoupled encoder would retain.
enum class GradMode { kInference, kRecord, kRecordAll };

GradMode grad_mode();

class GradModeGuard {
 public:
  explicit GradModeGuard(GradMode mode);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  GradMode previous_;
};

struct InferenceGuard : GradModeGuard {
  InferenceGuard() : GradModeGuard(GradMode::kInference) {}
};

namespace detail {

// Incoming gradient edge. Exactly one of node/leaf is set for a live edge;
// both empty means the operand needs no gradient.
struct Edge {
  std::shared_ptr<Node> node;
  std::shared_ptr<TensorImpl> leaf;
  bool live() const { return node != nullptr || leaf != nullptr; }
};

struct Node {
  const char* kind = "";
  std::vector<Edge> next;
  // Tensors retained for the adjoint. Outputs are never saved here.
  std::vector<Tensor> saved;
  std::function<std::vector<Tensor>(const Tensor& grad_out, const Node& node)> backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  bool produced_by_op = false;
  bool produced_in_inference = false;
  Tensor grad;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

template <class T>
std::span<const T> Tensor::data() const {
  if (!impl_) throw Error("data() on undefined tensor");
  if (impl_->dtype != dtype_of<T>()) {
    throw Error(std::string("dtype mismatch: tensor is ") + dtype_name(impl_->dtype));
  }
  if constexpr (std::is_same_v<T, float>) {
    return impl_->f32;
  } else {
    return impl_->f64;
  }
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (!impl_) throw Error("mutable_data() on undefined tensor");
  if (impl_->dtype != dtype_of<T>()) {
    throw Error(std::string("dtype mismatch: tensor is ") + dtype_name(impl_->dtype));
  }
  if constexpr (std::is_same_v<T, float>) {
    return impl_->f32;
  } else {
    return impl_->f64;
  }
}

}  // namespace scedit

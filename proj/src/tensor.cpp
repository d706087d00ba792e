#include "scedit/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace scedit {

namespace {
thread_local GradMode g_grad_mode = GradMode::kRecord;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dtype) {
  for (auto extent : shape) {
    if (extent < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::kF32) {
    impl->f32.assign(n, 0.0f);
  } else {
    impl->f64.assign(n, 0.0);
  }
  return impl;
}
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

GradMode grad_mode() { return g_grad_mode; }

GradModeGuard::GradModeGuard(GradMode mode) : previous_(g_grad_mode) { g_grad_mode = mode; }
GradModeGuard::~GradModeGuard() { g_grad_mode = previous_; }

Tensor Tensor::empty(Shape shape, DType dtype) { return Tensor(make_impl(std::move(shape), dtype)); }

Tensor Tensor::zeros(Shape shape, DType dtype) { return empty(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  visit_dtype(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_vector: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t = empty(std::move(shape), dtype);
  visit_dtype(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::span<const float> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_vector: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t = empty(std::move(shape), DType::kF32);
  std::copy(values.begin(), values.end(), t.mutable_data<float>().begin());
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  std::normal_distribution<double> dist(0.0, stddev);
  visit_dtype(dtype, [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  std::uniform_real_distribution<double> dist(lo, hi);
  visit_dtype(dtype, [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("shape() on undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw Error("dtype() on undefined tensor");
  return impl_->dtype;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  if (i < 0 || i >= numel()) throw ShapeError("flat index out of range");
  return dtype() == DType::kF32 ? static_cast<double>(impl_->f32[static_cast<std::size_t>(i)])
                                : impl_->f64[static_cast<std::size_t>(i)];
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  visit_dtype(dtype(), [&]<class T>() {
    auto d = data<T>();
    std::copy(d.begin(), d.end(), out.begin());
  });
  return out;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out = empty(shape(), target);
  if (target == DType::kF64) {
    std::copy(impl_->f32.begin(), impl_->f32.end(), out.impl_->f64.begin());
  } else {
    std::transform(impl_->f64.begin(), impl_->f64.end(), out.impl_->f32.begin(),
                   [](double v) { return static_cast<float>(v); });
  }
  return out;
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape " + shape_str(shape()) + " -> " + shape_str(new_shape));
  }
  Tensor out = clone();
  out.impl_->shape = std::move(new_shape);
  return out;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw Error("set_requires_grad on undefined tensor");
  if (flag && impl_->grad_fn) throw AutogradError("requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.defined(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw AutogradError("tensor has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_) return;
  impl_->grad = Tensor::zeros(shape(), dtype());
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad = Tensor();
}

void Tensor::assign(const Tensor& src) {
  if (src.shape() != shape()) {
    throw ShapeError("assign: shape " + shape_str(src.shape()) + " into " + shape_str(shape()));
  }
  if (src.dtype() == dtype()) {
    impl_->f32 = src.impl_->f32;
    impl_->f64 = src.impl_->f64;
  } else {
    Tensor converted = src.to(dtype());
    impl_->f32 = converted.impl_->f32;
    impl_->f64 = converted.impl_->f64;
  }
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  if (dtype() == DType::kF32) {
    return std::memcmp(impl_->f32.data(), other.impl_->f32.data(), impl_->f32.size() * sizeof(float)) == 0;
  }
  return std::memcmp(impl_->f64.data(), other.impl_->f64.data(), impl_->f64.size() * sizeof(double)) == 0;
}

}  // namespace scedit

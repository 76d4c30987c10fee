#include "r2r/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace r2r {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor t = *this;
  t.reshape(std::move(shape));
  return t;
}

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::require_finite(const char* what) const {
  if (!all_finite()) throw NonFiniteError(std::string(what) + ": non-finite value");
}

double Tensor::sum() const {
  double s = 0.0;
  for (float v : data_) s += v;
  return s;
}

double Tensor::abs_sum() const {
  double s = 0.0;
  for (float v : data_) s += std::fabs(v);
  return s;
}

float Tensor::max_abs() const {
  float m = 0.0f;
  for (float v : data_) m = std::max(m, std::fabs(v));
  return m;
}

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](float x, float y) { return x + y; });
}
Tensor operator-(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](float x, float y) { return x - y; });
}
Tensor operator*(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](float x, float y) { return x * y; });
}
Tensor operator*(const Tensor& a, float s) {
  Tensor out = a;
  for (auto& v : out.vec()) v *= s;
  return out;
}

Tensor batch_item(const Tensor& batch, std::size_t n) {
  if (batch.rank() < 1 || n >= batch.dim(0)) throw ShapeError("batch_item: index out of range");
  Shape s = batch.shape();
  s[0] = 1;
  const std::size_t per = shape_numel(s);
  std::vector<float> d(batch.data() + n * per, batch.data() + (n + 1) * per);
  return Tensor(std::move(s), std::move(d));
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack: no items");
  Shape s{items.size()};
  const Shape& inner = items.front().shape();
  std::size_t skip = (!inner.empty() && inner[0] == 1) ? 1 : 0;
  for (std::size_t i = skip; i < inner.size(); ++i) s.push_back(inner[i]);
  std::vector<float> d;
  d.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != inner) throw ShapeError("stack: mismatched shapes");
    d.insert(d.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor(std::move(s), std::move(d));
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("max_abs_diff: size mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace r2r

#include "eupe/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "eupe/error.hpp"

namespace eupe {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::State: return "state error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Version: return "version error";
    case ErrorKind::Truncated: return "truncated file";
    case ErrorKind::ShapeMismatch: return "shape mismatch";
    case ErrorKind::Io: return "io error";
    case ErrorKind::Data: return "data error";
  }
  return "error";
}

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
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  storage_->data.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  if (values.size() != shape_numel(shape_)) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(values.size()));
  }
  storage_->data = std::move(values);
}

Tensor Tensor::scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

Tensor Tensor::from(std::initializer_list<float> values) {
  return Tensor(Shape{values.size()}, std::vector<float>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::numel() const { return storage_ ? storage_->data.size() : 0; }

std::span<const float> Tensor::data() const {
  if (!storage_) return {};
  return storage_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!storage_) return {};
  return storage_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return storage_->data[0];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!storage_) throw StateError("set_requires_grad on undefined tensor");
  storage_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) return {};
  return storage_->grad;
}

std::span<float> Tensor::grad_buffer() const {
  if (!storage_) throw StateError("grad_buffer on undefined tensor");
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), 0.0f);
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  if (storage_) {
    storage_->grad.clear();
    storage_->grad.shrink_to_fit();
  }
}

Tensor Tensor::clone() const {
  if (!storage_) return {};
  Tensor out(shape_, storage_->data);
  out.storage_->requires_grad = storage_->requires_grad;
  return out;
}

Tensor Tensor::view(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.storage_ = storage_;
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return da.size() == db.size() &&
         (da.empty() || std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) == 0);
}

bool all_finite(const Tensor& t) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace eupe

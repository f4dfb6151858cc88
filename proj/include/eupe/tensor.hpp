#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace eupe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array with an optional gradient buffer.
//
// Tensor is a handle: copies share storage (data, grad and the
// requires_grad flag). Use clone() for an independent copy. Views created by
// reshape() share storage with their base, so gradients written through a
// view land in the base buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value);
  static Tensor from(std::initializer_list<float> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value = true);

  bool has_grad() const;
  std::span<const float> grad() const;
  // Allocates a zero gradient buffer on first use. Const because gradient
  // accumulation goes through shared handles held by tape closures.
  std::span<float> grad_buffer() const;
  void zero_grad();
  void clear_grad();

  Tensor clone() const;
  // Same storage, different shape. numel must match.
  Tensor view(Shape shape) const;
  bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  struct Storage {
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };

  Shape shape_;
  std::shared_ptr<Storage> storage_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

}  // namespace eupe

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fovea {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension or length mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or text input.
class ParseError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major float array. Images are [C,H,W] on the [0,255] scale.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> values() const { return data_; }
  std::span<float> values() { return data_; }
  const float* data() const { return data_.data(); }
  float* data() { return data_.data(); }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// [C,H,W] element access.
  float& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  float at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  Tensor reshaped(Shape shape) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

Tensor zeros_like(const Tensor& t);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& t, float factor);
/// y += a * x
void axpy(float a, const Tensor& x, Tensor& y);
Tensor clamped(const Tensor& t, float lo, float hi);
double dot(const Tensor& a, const Tensor& b);
double max_abs_difference(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

struct Norms {
  double l1_per_pixel = 0.0;
  double linf = 0.0;
};

/// l1_per_pixel divides by the total element count.
Norms norms(const Tensor& t);

// FVT1: "FVT1", u32 rank, u32 dims..., f32 data; all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
/// `offset` tracks the absolute stream position for error messages.
Tensor read_tensor(std::istream& in, std::size_t& offset);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

namespace binary {
void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in, std::size_t& offset);
void read_exact(std::istream& in, char* dst, std::size_t n, std::size_t& offset);
}  // namespace binary

}  // namespace fovea

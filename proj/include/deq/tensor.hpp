#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deq {

using Shape = std::vector<std::size_t>;

/// Storage precision tag. Arithmetic is always carried out in double; an F32
/// tensor holds values that are exactly representable as float and is
/// serialized with 4-byte elements.
enum class DType : std::uint8_t { F64 = 0, F32 = 1 };

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::F64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::F64);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  DType dtype() const noexcept { return dtype_; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  Tensor reshaped(Shape shape) const;
  Tensor cast(DType dtype) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);
  /// this += s * other
  Tensor& axpy(double s, const Tensor& other);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.dtype_ == b.dtype_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::F64;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double s, Tensor a);

double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& t);
double max_abs(const Tensor& t);
bool all_finite(const Tensor& t);
/// ‖a − b‖₂ / max(‖b‖₂, floor)
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-300);

void require_same_shape(const char* op, const Tensor& a, const Tensor& b);

/// Named parameter tensors in insertion order.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor value);
  bool contains(std::string_view name) const;
  Tensor& operator[](std::string_view name);
  const Tensor& operator[](std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  /// Total number of scalar coordinates.
  std::size_t numel() const;
  std::vector<double> flatten() const;
  /// Overwrite values from a flat vector produced by flatten().
  void unflatten(std::span<const double> flat);

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  ParamSet& operator+=(const ParamSet& other);

  /// Entries whose names start with prefix, with the prefix stripped.
  ParamSet with_prefix_stripped(std::string_view prefix) const;
  /// Copy of this set with every name prefixed.
  ParamSet prefixed(std::string_view prefix) const;
  void merge(const ParamSet& other);

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<Entry> entries_;
};

double norm2(const ParamSet& p);

}  // namespace deq

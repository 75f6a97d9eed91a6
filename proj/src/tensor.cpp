#include "deq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace deq {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, DType dtype)
    : shape_(std::move(shape)), data_(element_count(shape_), 0.0), dtype_(dtype) {}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                     to_string(shape_));
  }
  if (dtype_ == DType::F32) {
    for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::cast(DType dtype) const { return Tensor(shape_, data_, dtype); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape("add", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape("sub", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor& Tensor::axpy(double s, const Tensor& other) {
  require_same_shape("axpy", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double s, Tensor a) { return a *= s; }

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape("dot", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  require_same_shape("relative_error", a, b);
  return norm2(a - b) / std::max(norm2(b), floor);
}

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.first == name; });
}

Tensor& ParamSet::operator[](std::string_view name) {
  for (auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw std::out_of_range("ParamSet: no entry named '" + std::string(name) + "'");
}

const Tensor& ParamSet::operator[](std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw std::out_of_range("ParamSet: no entry named '" + std::string(name) + "'");
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(numel());
  for (const auto& e : entries_) flat.insert(flat.end(), e.second.data().begin(), e.second.data().end());
  return flat;
}

void ParamSet::unflatten(std::span<const double> flat) {
  if (flat.size() != numel()) {
    throw ShapeError("ParamSet::unflatten: expected " + std::to_string(numel()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto& e : entries_) {
    auto dst = e.second.data();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
    off += dst.size();
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& e : entries_) out.add(e.first, Tensor(e.second.shape(), e.second.dtype()));
  return out;
}

ParamSet& ParamSet::operator+=(const ParamSet& other) {
  for (const auto& e : other.entries_) {
    if (contains(e.first)) {
      (*this)[e.first] += e.second;
    } else {
      add(e.first, e.second);
    }
  }
  return *this;
}

ParamSet ParamSet::with_prefix_stripped(std::string_view prefix) const {
  ParamSet out;
  for (const auto& e : entries_) {
    if (e.first.starts_with(prefix)) out.add(e.first.substr(prefix.size()), e.second);
  }
  return out;
}

ParamSet ParamSet::prefixed(std::string_view prefix) const {
  ParamSet out;
  for (const auto& e : entries_) out.add(std::string(prefix) + e.first, e.second);
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& e : other.entries_) add(e.first, e.second);
}

double norm2(const ParamSet& p) {
  double s = 0.0;
  for (const auto& e : p) {
    for (double v : e.second.data()) s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace deq

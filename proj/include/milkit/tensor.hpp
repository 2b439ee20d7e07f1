#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. data().size() == product(shape()) always.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_size(shape_),
            "tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      require(row.size() == c, "tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : size() / rows(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  double item() const {
    require(data_.size() == 1, "tensor: item() on tensor of shape " + shape_string(shape_));
    return data_.front();
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool operator==(const Tensor&) const = default;

 private:
  void check_shape() const {
    for (auto d : shape_) require(d > 0, "tensor: dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

/// n doubles in [lo, hi), advancing the stream by exactly n draws.
inline Tensor rng_uniform(RandomStream& stream, double lo, double hi, std::size_t n) {
  require(lo < hi, "rng_uniform: require lo < hi");
  std::vector<double> out(n);
  for (auto& v : out) v = lo + (hi - lo) * stream.uniform();
  return Tensor({n}, std::move(out));
}

inline Tensor uniform_tensor(RandomStream& stream, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  const Tensor draws = rng_uniform(stream, lo, hi, t.size());
  std::copy(draws.data().begin(), draws.data().end(), t.data().begin());
  return t;
}

inline Tensor normal_tensor(RandomStream& stream, Shape shape, double mean = 0.0, double sigma = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stream.normal(mean, sigma);
  return t;
}

}  // namespace milkit

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokfuse {

// Error hierarchy. The CLI maps each class to an exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DivisibilityError : ShapeError {
  using ShapeError::ShapeError;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense tensor, row-major with the last axis (channels) fastest.
// Feature maps are rank 3: [H, W, C]. Conv weights are rank 4:
// [k, k, Cin, Cout]. Token sequences are rank 2: [L, width].
//
// Scalar is the storage type. The projectors run on float; the gradient
// checker instantiates the same code on double.
template <class Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, Scalar fill = Scalar{0})
      : shape_(std::move(shape)) {
    check_rank();
    data_.assign(shape_product(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != shape_product(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  const std::vector<Scalar>& values() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  // Rank-3 accessor.
  Scalar& at(std::size_t h, std::size_t w, std::size_t c) {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }
  Scalar at(std::size_t h, std::size_t w, std::size_t c) const {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }

  // Reinterprets the buffer under a new shape with the same element count.
  BasicTensor reshaped(Shape shape) const& {
    BasicTensor out = *this;
    out.reshape_in_place(std::move(shape));
    return out;
  }
  BasicTensor reshaped(Shape shape) && {
    reshape_in_place(std::move(shape));
    return std::move(*this);
  }

  // Gradient slot. Gradients accumulate; zero_grad() must be called
  // explicitly between independent backward passes.
  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<Scalar> grad() {
    ensure_grad();
    return grad_;
  }
  std::span<const Scalar> grad() const noexcept { return grad_; }
  void zero_grad() { grad_.assign(data_.size(), Scalar{0}); }
  void drop_grad() noexcept {
    grad_.clear();
    grad_.shrink_to_fit();
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    if (shape_.size() > kMaxRank) {
      throw ShapeError("tensor rank " + std::to_string(shape_.size()) +
                       " exceeds the supported maximum of 4");
    }
  }

  void reshape_in_place(Shape shape) {
    if (shape_product(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    shape_ = std::move(shape);
    if (!grad_.empty()) grad_.resize(data_.size());
  }

  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), Scalar{0});
  }

  Shape shape_;
  std::vector<Scalar> data_;
  std::vector<Scalar> grad_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <class Scalar>
bool all_finite(const BasicTensor<Scalar>& t) {
  const auto v = t.data();
  return std::all_of(v.begin(), v.end(),
                     [](Scalar x) { return std::isfinite(x); });
}

// Element-wise conversion between storage types; gradients are not copied.
template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.size());
  const auto in = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(in[i]);
  return BasicTensor<To>(t.shape(), std::move(out));
}

}  // namespace tokfuse

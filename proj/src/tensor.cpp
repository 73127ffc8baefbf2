#include "msa/tensor.hpp"

#include <cmath>

#include "msa/errors.hpp"

namespace msa {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

Tensor Tensor::zeros(Shape shape) {
  return from_vector(std::move(shape), std::vector<double>());
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return from_vector(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return from_vector({}, {value}); }

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  for (std::size_t e : shape) {
    MSA_CHECK(e > 0, ErrorKind::kShape, "tensor extents must be positive, got ",
              shape_str(shape));
  }
  const std::size_t n = shape_numel(shape);
  if (values.empty()) values.assign(n, 0.0);
  MSA_CHECK(values.size() == n, ErrorKind::kShape, "shape ", shape_str(shape),
            " needs ", n, " values, got ", values.size());
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<const std::vector<double>>(std::move(values));
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  MSA_CHECK(axis < shape_.size(), ErrorKind::kContract, "axis ", axis,
            " out of range for rank-", shape_.size(), " tensor");
  return shape_[axis];
}

std::span<const double> Tensor::data() const {
  MSA_CHECK(data_ != nullptr, ErrorKind::kContract, "tensor is undefined");
  return {data_->data(), data_->size()};
}

double Tensor::value() const {
  MSA_CHECK(size() == 1, ErrorKind::kContract,
            "value() requires a scalar tensor, shape is ", shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::size_t i) const { return data()[i]; }

double Tensor::at(std::size_t i, std::size_t j) const {
  MSA_CHECK(rank() == 2, ErrorKind::kContract, "at(i,j) needs rank 2");
  return data()[i * shape_[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  MSA_CHECK(rank() == 3, ErrorKind::kContract, "at(i,j,k) needs rank 3");
  return data()[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::with_node(Tape* tape, int node) const {
  Tensor t = *this;
  t.tape_ = tape;
  t.node_ = node;
  return t;
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace msa

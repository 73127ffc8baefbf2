#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msa {

class Tape;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Immutable dense tensor of doubles, row-major. Copies share the payload.
// A tracked tensor additionally carries the handle of the tape node that
// produced it; the payload itself is never mutated.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_vector(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t extent(std::size_t axis) const;

  std::span<const double> data() const;
  const std::shared_ptr<const std::vector<double>>& payload() const { return data_; }

  double value() const;  // scalar tensors only
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  bool defined() const { return data_ != nullptr; }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same payload, no tape association.
  Tensor detached() const;
  // Same payload, bound to a tape node (used by Tape when recording).
  Tensor with_node(Tape* tape, int node) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace msa

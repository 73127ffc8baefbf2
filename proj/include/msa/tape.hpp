#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "msa/tensor.hpp"

namespace msa {

// Result of one backward pass: a gradient per tracked leaf, keyed by node.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const;
  const Tensor& at(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }
  const std::unordered_map<int, Tensor>& by_node() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

// Reverse-mode gradient tape. Nodes are append-only, so creation order is a
// topological order. A tape is confined to one training step on one thread
// and rebuilt each step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a tensor as a leaf; backward reports exactly one gradient per
  // leaf (zeros when the loss does not reach it).
  Tensor leaf(const Tensor& value);

  // grad_out is the gradient at this node; parent_grads are accumulation
  // buffers aligned with the `parents` vector passed at record time.
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<const std::span<double>> parent_grads)>;

  Tensor record(Tensor value, std::vector<int> parents, BackwardFn backward);

  // Propagates from a scalar loss. An untracked loss yields an empty map.
  Gradients backward(const Tensor& loss) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    BackwardFn backward;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
  std::vector<int> leaves_;
};

}  // namespace msa

#include "msa/tape.hpp"

#include "msa/errors.hpp"

namespace msa {

bool Gradients::contains(const Tensor& leaf) const {
  return leaf.node() >= 0 && grads_.count(leaf.node()) > 0;
}

const Tensor& Gradients::at(const Tensor& leaf) const {
  MSA_CHECK(leaf.tracked(), ErrorKind::kContract,
            "gradient lookup on an untracked tensor");
  auto it = grads_.find(leaf.node());
  MSA_CHECK(it != grads_.end(), ErrorKind::kContract, "node ", leaf.node(),
            " is not a leaf of this tape");
  return it->second;
}

Tensor Tape::leaf(const Tensor& value) {
  MSA_CHECK(value.defined(), ErrorKind::kContract, "cannot track an undefined tensor");
  const int id = static_cast<int>(nodes_.size());
  Node node;
  node.shape = value.shape();
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  leaves_.push_back(id);
  return value.with_node(this, id);
}

Tensor Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
  for (int p : parents) {
    MSA_CHECK(p >= 0 && p < static_cast<int>(nodes_.size()), ErrorKind::kContract,
              "parent node ", p, " does not exist on this tape");
  }
  const int id = static_cast<int>(nodes_.size());
  Node node;
  node.shape = value.shape();
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return value.with_node(this, id);
}

Gradients Tape::backward(const Tensor& loss) const {
  MSA_CHECK(loss.size() == 1, ErrorKind::kContract,
            "backward requires a scalar loss, shape is ", shape_str(loss.shape()));
  Gradients result;
  if (!loss.tracked()) return result;  // no tracked leaves anywhere upstream
  MSA_CHECK(loss.tape() == this, ErrorKind::kContract,
            "loss belongs to a different tape");

  std::vector<std::vector<double>> grad(nodes_.size());
  grad[loss.node()] = {1.0};

  for (int id = loss.node(); id >= 0; --id) {
    const Node& node = nodes_[id];
    if (grad[id].empty() || node.is_leaf || !node.backward) continue;
    std::vector<std::span<double>> parent_views(node.parents.size());
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      std::vector<double>& buf = grad[node.parents[i]];
      if (buf.empty()) buf.assign(shape_numel(nodes_[node.parents[i]].shape), 0.0);
      parent_views[i] = {buf.data(), buf.size()};
    }
    node.backward({grad[id].data(), grad[id].size()},
                  {parent_views.data(), parent_views.size()});
    grad[id].clear();
    grad[id].shrink_to_fit();
  }

  for (int leaf : leaves_) {
    if (grad[leaf].empty()) {
      result.grads_.emplace(leaf, Tensor::zeros(nodes_[leaf].shape));
    } else {
      result.grads_.emplace(leaf, Tensor::from_vector(nodes_[leaf].shape,
                                                      std::move(grad[leaf])));
    }
  }
  return result;
}

}  // namespace msa

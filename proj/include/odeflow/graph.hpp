#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

class Node;
using Var = std::shared_ptr<Node>;

// Per-backward-pass gradient storage. Keeping gradients out of the nodes
// until the pass finishes lets several backward passes over shared leaves
// run concurrently (one store per execution context).
class GradStore {
 public:
  Tensor& slot(const Node* node, const std::vector<int>& shape);
  const Tensor* find(const Node* node) const;
  void accumulate(const Node* node, const std::vector<int>& shape, const Tensor& delta, double scale = 1.0);
  std::unordered_map<const Node*, Tensor>& map() { return grads_; }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

// One recorded value in the computation graph. Interior nodes carry a
// backward function that routes the incoming gradient to their parents.
class Node {
 public:
  Tensor value;
  Tensor grad;  // leaf accumulation slot, materialized on first use
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(const Tensor& grad_out, GradStore&)> backward_fn;
  uint64_t id = 0;  // creation order; keeps traversal deterministic
  std::string name;

  bool is_leaf() const { return !backward_fn; }
  Tensor& grad_slot();
  void zero_grad();
};

// Thread-local switch: while disabled, ops compute values but record no
// backward functions (inference / finite-difference probes).
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var make_leaf(Tensor value, bool requires_grad, std::string name = "");
Var make_constant(Tensor value);
Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(const Tensor&, GradStore&)> backward_fn);

// Reverse-mode pass from a scalar root. Seeds with 1 (or `seed` if given),
// walks the graph in reverse creation order, and accumulates gradients of
// all reachable requires_grad leaves into the store.
GradStore backward_collect(const Var& root, const Tensor* seed = nullptr);

// Same pass, but also adds the leaf gradients into each leaf's grad slot.
void backward(const Var& loss);

// Named collection of trainable leaves with deterministic iteration order.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t numel() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace odeflow

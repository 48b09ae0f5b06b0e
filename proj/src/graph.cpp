#include "odeflow/graph.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>

namespace odeflow {

namespace {
std::atomic<uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& GradStore::slot(const Node* node, const std::vector<int>& shape) {
  auto it = grads_.find(node);
  if (it == grads_.end()) it = grads_.emplace(node, Tensor(shape)).first;
  return it->second;
}

const Tensor* GradStore::find(const Node* node) const {
  auto it = grads_.find(node);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::accumulate(const Node* node, const std::vector<int>& shape, const Tensor& delta,
                           double scale) {
  slot(node, shape).add_scaled(delta, scale);
}

Tensor& Node::grad_slot() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

void Node::zero_grad() {
  if (!grad.empty()) grad.fill(0.0);
}

Var make_leaf(Tensor value, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->name = std::move(name);
  return n;
}

Var make_constant(Tensor value) { return make_leaf(std::move(value), false); }

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(const Tensor&, GradStore&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p->requires_grad) {
        needs = true;
        break;
      }
    }
    if (needs) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return n;
}

namespace {

// Iterative DFS topological order over nodes that require grad.
std::vector<const Node*> topo_order(const Var& root) {
  std::vector<const Node*> order;
  std::unordered_map<const Node*, int> state;  // 0 = new, 1 = open, 2 = done
  std::vector<const Node*> stack{root.get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (const auto& p : n->parents) {
        if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
      }
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(n);
      }
    }
  }
  // Parents precede children; reverse for the backward sweep and then order
  // ties by descending creation id for determinism.
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });
  return order;
}

}  // namespace

GradStore backward_collect(const Var& root, const Tensor* seed) {
  if (!root) throw std::invalid_argument("backward on null node");
  if (!seed && root->value.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                Tensor::shape_str(root->value.shape()));
  }
  GradStore store;
  Tensor& root_grad = store.slot(root.get(), root->value.shape());
  if (seed) {
    if (!seed->same_shape(root->value)) throw std::invalid_argument("backward seed shape mismatch");
    root_grad = *seed;
  } else {
    root_grad.fill(1.0);
  }
  if (!root->requires_grad) return store;

  for (const Node* n : topo_order(root)) {
    if (!n->backward_fn) continue;
    const Tensor* g = store.find(n);
    if (!g) continue;  // not reached by any gradient path
    n->backward_fn(*g, store);
  }
  return store;
}

void backward(const Var& loss) {
  GradStore store = backward_collect(loss);
  for (auto& [node, g] : store.map()) {
    if (node->is_leaf() && node->requires_grad) {
      if (!g.all_finite()) {
        throw std::runtime_error("non-finite gradient for leaf '" + node->name + "'");
      }
      const_cast<Node*>(node)->grad_slot().add_scaled(g, 1.0);
    }
  }
}

Var ParamSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var v = make_leaf(std::move(init), true, name);
  index_[name] = items_.size();
  items_.emplace_back(name, v);
  return v;
}

Var ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

bool ParamSet::has(const std::string& name) const { return index_.count(name) > 0; }

int64_t ParamSet::numel() const {
  int64_t n = 0;
  for (const auto& [name, v] : items_) n += v->value.size();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& [name, v] : items_) v->zero_grad();
}

}  // namespace odeflow

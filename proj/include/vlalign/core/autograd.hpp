#pragma once

#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vlalign/core/tensor.hpp"

// Reverse-mode autodiff over Tensor. A Graph is built per forward pass;
// backward() runs the tape in reverse topological order and accumulates
// gradients into the parameter store.

namespace vlalign {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
};

inline Tensor& ensure_grad(Node& n) {
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

inline NodePtr make_node(Tensor v, std::vector<NodePtr> parents,
                         std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
  }
  return n;
}

// Named model parameter with freeze flag.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

class ParamStore {
 public:
  ParamStore() = default;

  // Shape-only stores register parameter names, shapes and freeze flags
  // without materializing data (parameter accounting at full scale).
  explicit ParamStore(bool shape_only) : shape_only_(shape_only) {}

  bool shape_only() const { return shape_only_; }

  Param& add(const std::string& name, Tensor init, bool trainable) {
    if (by_name_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = shape_only_ ? Tensor::shape_only(init.shape()) : std::move(init);
    p->trainable = trainable;
    Param* raw = p.get();
    params_.push_back(std::move(p));
    by_name_[name] = raw;
    return *raw;
  }

  Param* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  const Param* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  Param& get(const std::string& name) {
    Param* p = find(name);
    if (!p) throw std::runtime_error("unknown parameter: " + name);
    return *p;
  }

  // Registration order, stable across runs.
  std::vector<Param*> all() {
    std::vector<Param*> v;
    v.reserve(params_.size());
    for (auto& p : params_) v.push_back(p.get());
    return v;
  }

  std::vector<const Param*> all() const {
    std::vector<const Param*> v;
    v.reserve(params_.size());
    for (auto& p : params_) v.push_back(p.get());
    return v;
  }

  std::vector<Param*> trainable() {
    std::vector<Param*> v;
    for (auto& p : params_)
      if (p->trainable) v.push_back(p.get());
    return v;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  long count_trainable() const {
    long n = 0;
    for (auto& p : params_)
      if (p->trainable) n += p->value.declared_numel();
    return n;
  }

  long count_frozen() const {
    long n = 0;
    for (auto& p : params_)
      if (!p->trainable) n += p->value.declared_numel();
    return n;
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, Param*> by_name_;
  bool shape_only_ = false;
};

// One forward pass. Parameter leaves are cached so a parameter used
// several times maps to a single node and gradients accumulate.
class Graph {
 public:
  Graph() = default;

  // no_grad graphs drop the tape: leaves never require gradients, so no
  // backward closures are kept (inference passes).
  explicit Graph(bool no_grad) : no_grad_(no_grad) {}

  NodePtr param(Param& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->requires_grad = p.trainable && !no_grad_;
    leaves_[&p] = n;
    order_.emplace_back(&p, n);
    return n;
  }

  NodePtr constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
  }

  // Accumulates d(root)/d(param) into Param::grad for trainable leaves.
  void backward(const NodePtr& root) {
    if (root->value.numel() != 1)
      throw ShapeError("backward: root must be scalar, got " + root->value.shape_str());
    if (!root->requires_grad) return;

    std::vector<Node*> topo = topo_order(root.get());
    ensure_grad(*root)[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.numel() > 0) n->backward(*n);
    }
    for (auto& [p, node] : order_) {
      if (!p->trainable || node->grad.numel() == 0) continue;
      if (p->grad.numel() == 0) p->zero_grad();
      for (long i = 0; i < p->grad.numel(); ++i) p->grad[i] += node->grad[i];
    }
  }

 private:
  static std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> topo;
    std::unordered_set<Node*> done;
    // iterative post-order DFS
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    std::unordered_set<Node*> on_path{root};
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* c = n->parents[next++].get();
        if (c->requires_grad && !done.count(c) && !on_path.count(c)) {
          stack.emplace_back(c, 0);
          on_path.insert(c);
        }
      } else {
        topo.push_back(n);
        done.insert(n);
        on_path.erase(n);
        stack.pop_back();
      }
    }
    return topo;
  }

  std::unordered_map<const Param*, NodePtr> leaves_;
  std::vector<std::pair<Param*, NodePtr>> order_;
  bool no_grad_ = false;
};

}  // namespace vlalign

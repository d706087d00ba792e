#include "scedit/autograd.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

namespace scedit {

namespace {

template <class T>
void accumulate_into(Tensor& dst, const Tensor& src) {
  auto d = dst.mutable_data<T>();
  auto s = src.data<T>();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (!dst.defined()) {
    dst = src.clone();
    return;
  }
  if (dst.shape() != src.shape()) {
    throw ShapeError("gradient shape " + shape_str(src.shape()) + " does not match " +
                     shape_str(dst.shape()));
  }
  visit_dtype(dst.dtype(), [&]<class T>() { accumulate_into<T>(dst, src); });
}

// Reverse topological order of the nodes reachable from root (root first).
std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> post;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, cursor] = stack.back();
    if (cursor < node->next.size()) {
      detail::Node* child = node->next[cursor++].node.get();
      if (child && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

}  // namespace

namespace detail {

bool should_record(std::span<const Tensor> operands) {
  switch (grad_mode()) {
    case GradMode::kInference:
      return false;
    case GradMode::kRecordAll:
      return true;
    case GradMode::kRecord:
      return std::any_of(operands.begin(), operands.end(), [](const Tensor& t) {
        return t.defined() && (t.requires_grad() || t.impl()->grad_fn);
      });
  }
  return false;
}

Edge edge_for(const Tensor& operand) {
  Edge e;
  if (!operand.defined()) return e;
  if (operand.impl()->grad_fn) {
    e.node = operand.impl()->grad_fn;
  } else if (operand.requires_grad()) {
    e.leaf = operand.impl_ptr();
  }
  return e;
}

void mark_op_output(Tensor& out) {
  out.impl()->produced_by_op = true;
  out.impl()->produced_in_inference = grad_mode() == GradMode::kInference;
}

void record(Tensor& out, const char* kind, std::span<const Tensor> operands,
            std::vector<Tensor> saved,
            std::function<std::vector<Tensor>(const Tensor&, const Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->kind = kind;
  node->next.reserve(operands.size());
  for (const auto& op : operands) node->next.push_back(edge_for(op));
  node->saved = std::move(saved);
  node->backward = std::move(backward_fn);
  out.impl()->grad_fn = std::move(node);
}

}  // namespace detail

void backward(const Tensor& loss, std::span<const Tensor> ensure) {
  if (!loss.defined()) throw AutogradError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw AutogradError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }

  if (!loss.impl()->grad_fn) {
    if (loss.requires_grad()) {
      Tensor& g = loss.impl()->grad;
      accumulate(g, Tensor::full(loss.shape(), 1.0, loss.dtype()));
    }
  } else {
    InferenceGuard no_record;
    auto order = topo_order(loss.impl()->grad_fn.get());
    std::unordered_map<detail::Node*, Tensor> pending;
    pending[order.front()] = Tensor::full(loss.shape(), 1.0, loss.dtype());
    for (detail::Node* node : order) {
      auto it = pending.find(node);
      if (it == pending.end()) continue;
      Tensor grad_out = std::move(it->second);
      pending.erase(it);
      std::vector<Tensor> grads = node->backward(grad_out, *node);
      for (std::size_t i = 0; i < node->next.size(); ++i) {
        const auto& edge = node->next[i];
        if (!edge.live() || i >= grads.size() || !grads[i].defined()) continue;
        if (edge.node) {
          accumulate(pending[edge.node.get()], grads[i]);
        } else {
          if (edge.leaf->produced_in_inference) {
            throw AutogradError(
                "trainable leaf was produced in inference mode; recompute it with recording "
                "enabled");
          }
          accumulate(edge.leaf->grad, grads[i]);
        }
      }
    }
  }

  for (const Tensor& t : ensure) {
    if (t.requires_grad() && !t.has_grad()) {
      Tensor handle = t;
      handle.zero_grad();
    }
  }
}

std::int64_t retained_activation_elements(const Tensor& root) {
  if (!root.defined() || !root.impl()->grad_fn) return 0;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::int64_t total = 0;
  for (detail::Node* node : topo_order(root.impl()->grad_fn.get())) {
    for (const Tensor& s : node->saved) {
      if (!s.defined() || !s.impl()->produced_by_op) continue;
      if (seen.insert(s.impl()).second) total += s.numel();
    }
  }
  return total;
}

std::int64_t graph_node_count(const Tensor& root) {
  if (!root.defined() || !root.impl()->grad_fn) return 0;
  return static_cast<std::int64_t>(topo_order(root.impl()->grad_fn.get()).size());
}

}  // namespace scedit

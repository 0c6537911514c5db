#include "gnmt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "gnmt/error.hpp"

namespace gnmt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

namespace {
thread_local int no_grad_depth = 0;
}  // namespace

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::no_grad_depth; }

bool grad_enabled() { return detail::no_grad_depth == 0; }

namespace {

std::shared_ptr<detail::Node> new_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = detail::next_sequence();
  return node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({1}, {value}, requires_grad));
}

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const double> Tensor::data() const { return checked().data; }

std::span<double> Tensor::mutable_data() { return checked().data; }

double Tensor::item() const {
  const auto& node = checked();
  if (node.data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(node.shape));
  return node.data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool value) { checked().requires_grad = value; }

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const { return checked().grad; }

void Tensor::zero_grad() { checked().grad.clear(); }

Tensor Tensor::detach() const {
  const auto& node = checked();
  return Tensor(new_leaf(node.shape, node.data, false));
}

void Tensor::backward() {
  auto& root = checked();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (root.consumed) throw ContractError("backward() called twice on the same graph");
  if (!root.requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Collect every node reachable through recorded parents.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{&root};
  seen.insert(&root);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Reverse execution order: a node is created after all of its parents.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  root.ensure_grad()[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Clearing parent links may drop the last owner of a node still listed in
  // `order`, so hold them until the loop ends.
  std::vector<std::shared_ptr<detail::Node>> keep_alive;
  for (detail::Node* n : order) {
    for (auto& p : n->parents) keep_alive.push_back(p);
  }
  for (detail::Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->consumed = true;
    }
  }
  root.consumed = true;
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = next_sequence();
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace gnmt

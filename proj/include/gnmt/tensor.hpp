#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gnmt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded operation (or leaf) of a dynamically built graph. Interior
// nodes own their parents until backward() runs, after which the graph is
// released and the node is marked consumed.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

std::uint64_t next_sequence();

}  // namespace detail

/// Gradient recording is disabled on the current thread while a guard lives.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Dense row-major array of doubles taking part in a reverse-mode graph.
///
/// A Tensor is a cheap handle: copies share the same underlying node, so a
/// parameter registered in two places is still one parameter.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for initialisation and optimiser updates. Must not be
  /// used on a tensor whose graph is still awaiting backward().
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Back-propagates from this scalar. Each graph can be walked once.
  void backward();

  /// New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates an op result. Parents and the backward closure are only kept when
/// gradient recording is on and at least one parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace gnmt

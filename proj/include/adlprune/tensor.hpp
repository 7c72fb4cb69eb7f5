#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adlprune {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;  // recording order on the tape
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major f64 array. Copies share storage; a Tensor produced by an op
/// on requires_grad inputs keeps its inputs alive until it is dropped.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, meant for leaf tensors (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Fresh leaf with the same values and no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// Records a new op result. `backward` reads `self.grad` and accumulates
  /// into the grad buffers of inputs that require grad. When no input needs a
  /// gradient the result is a plain constant and nothing is recorded.
  static Tensor record(Shape shape, std::vector<double> data,
                       std::vector<Tensor> inputs,
                       std::function<void(detail::Node&)> backward,
                       const char* op_name);

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep over the recorded ops reachable from `loss`, in reverse
/// recording order. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

/// Disables graph recording on this thread while alive (evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Post-op NaN/Inf detection. On by default.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace adlprune

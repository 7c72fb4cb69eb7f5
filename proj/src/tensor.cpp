#include "adlprune/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace adlprune {

namespace {

std::atomic<std::uint64_t> g_seq{0};
std::atomic<bool> g_finite_checks{true};
thread_local bool t_grad_enabled = true;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, "x"));
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = adlprune::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (adlprune::numel(shape) != data.size()) {
    throw ShapeError(fmt::format("shape {} holds {} values, got {}",
                                 shape_str(shape), adlprune::numel(shape),
                                 data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) {
    throw ShapeError(fmt::format("dim {} out of range for {}", i,
                                 shape_str(shape())));
  }
  return node_->shape[i];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError(fmt::format("item() on non-scalar {}", shape_str(shape())));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= node_->shape[i]) throw ShapeError("at(): index out of range");
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::record(Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward_fn,
                      const char* op_name) {
  if (g_finite_checks.load(std::memory_order_relaxed)) {
    for (double v : data) {
      if (!std::isfinite(v)) {
        throw NumericalError(
            fmt::format("non-finite value produced by {}", op_name));
      }
    }
  }
  const bool needs_grad = t_grad_enabled && std::any_of(
      inputs.begin(), inputs.end(),
      [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  Tensor out = from(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) {
    for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
    out.node_->backward = std::move(backward_fn);
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError(fmt::format("backward() needs a scalar loss, got {}",
                                 loss.defined() ? shape_str(loss.shape())
                                                : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward(): loss does not depend on any parameter");
  }

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    if (n->backward) order.push_back(n);
    for (auto& in : n->inputs) {
      if (in) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) {
              return a->seq > b->seq;
            });

  loss.node()->grad_buffer()[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->grad.empty()) continue;  // no path carried gradient here
    n->backward(*n);
  }
  // Intermediate gradients are single-use.
  for (detail::Node* n : order) n->grad.clear();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

bool finite_checks_enabled() { return g_finite_checks; }

}  // namespace adlprune

#include "fulora/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "fulora/error.hpp"

namespace fulora {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::int64_t t_step_index = -1;
std::atomic<std::uint64_t> g_seq{0};

void check_finite(const char* op, const std::vector<float>& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      std::ostringstream msg;
      msg << "non-finite output in op '" << op << "' at element " << i;
      if (t_step_index >= 0) msg << " (step " << t_step_index << ")";
      throw NumericalError(msg.str());
    }
  }
}

}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream s;
  s << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s << ", ";
    s << shape[i];
  }
  s << ')';
  return s.str();
}

void set_step_index(std::int64_t step) { t_step_index = step; }
std::int64_t step_index() { return t_step_index; }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::vector<float>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

bool any_requires_grad(const std::vector<std::shared_ptr<TensorImpl>>& inputs) {
  for (const auto& in : inputs) {
    if (in && in->requires_grad) return true;
  }
  return false;
}

Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<std::shared_ptr<TensorImpl>> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (t_grad_enabled && any_requires_grad(inputs)) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(numel_of(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::size(std::int64_t i) const {
  const auto& s = shape();
  const auto n = static_cast<std::int64_t>(s.size());
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw ShapeError("dimension index out of range for shape " + shape_str(s));
  return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const float> Tensor::data() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  if (impl_->node) throw std::logic_error("cannot mutate a tensor recorded on the tape");
  return impl_->data;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (impl_->node) throw std::logic_error("requires_grad can only be set on leaves");
  impl_->requires_grad = on;
}

bool Tensor::is_leaf() const { return !impl_->node; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

Tensor Tensor::grad() const {
  if (impl_->grad.empty()) return zeros(impl_->shape.empty() ? Shape{} : impl_->shape);
  return from(impl_->shape, impl_->grad);
}

std::span<const float> Tensor::grad_data() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad && !impl_->node;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tape::Tape(const Tensor& root) {
  std::vector<detail::TensorImpl*> stack{root.impl().get()};
  std::unordered_set<const detail::TensorImpl*> seen{root.impl().get()};
  entries_.reserve(64);
  if (root.impl()->node) entries_.push_back(root.impl());
  while (!stack.empty()) {
    auto* cur = stack.back();
    stack.pop_back();
    if (!cur->node) continue;
    for (const auto& in : cur->node->inputs) {
      if (!in || !in->requires_grad || !seen.insert(in.get()).second) continue;
      if (in->node) entries_.push_back(in);
      stack.push_back(in.get());
    }
  }
  std::sort(entries_.begin(), entries_.end(),
            [](const auto& a, const auto& b) { return a->node->seq < b->node->seq; });
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e->node->op);
  return names;
}

void Tape::backward_from(const Tensor& root) const {
  auto& g = root.impl()->ensure_grad();
  std::fill(g.begin(), g.end(), 1.0f);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& impl = **it;
    if (impl.grad.empty()) continue;
    impl.node->backward(impl);
    // Intermediate grads are consumed exactly once.
    if (impl.node) std::vector<float>().swap(impl.grad);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.impl()->node || !loss.requires_grad()) {
    throw std::logic_error("backward on a tensor that was not produced under the tape");
  }
  Tape tape(loss);
  tape.backward_from(loss);
}

}  // namespace fulora

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fulora {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

/// One recorded op. Backward reads the output's grad and accumulates into the
/// inputs' grads.
struct Node {
  const char* op = "";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  std::vector<float>& ensure_grad();
};

}  // namespace detail

/// Dense row-major float32 tensor with shared (reference) semantics: copies
/// alias the same storage, use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim() const { return static_cast<std::int64_t>(shape().size()); }
  /// Size of dimension i; negative i counts from the back.
  std::int64_t size(std::int64_t i) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  /// Writable view. Only legal on leaves; recorded tensors are immutable.
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient as a tensor of the same shape (zeros when none flowed).
  Tensor grad() const;
  std::span<const float> grad_data() const;
  void zero_grad();

  /// Deep copy detached from any tape.
  Tensor clone() const;
  /// Same storage values, new leaf without history.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Training-step index reported in non-finite errors (thread-local, -1 = none).
void set_step_index(std::int64_t step);
std::int64_t step_index();

/// True when ops record onto the tape (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Ordered record of the ops reachable from a root tensor, in execution
/// order (every op's inputs precede it).
class Tape {
 public:
  explicit Tape(const Tensor& root);
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;
  /// Visits each op once, latest first.
  void backward_from(const Tensor& root) const;

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> entries_;
};

/// Populates grads of every leaf that requires grad and is reachable from
/// loss. loss must be a scalar produced under the tape.
void backward(const Tensor& loss);

namespace detail {

/// Builds a result tensor and, when grad mode is on and any input requires
/// grad, records a node. Runs the finite check on the output.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<std::shared_ptr<TensorImpl>> inputs,
                   std::function<void(const TensorImpl& out)> backward);

bool any_requires_grad(const std::vector<std::shared_ptr<TensorImpl>>& inputs);

}  // namespace detail

}  // namespace fulora

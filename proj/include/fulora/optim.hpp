#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "fulora/param.hpp"

namespace fulora {

/// Plain SGD, value <- value - lr * grad, with optional heavy-ball momentum
/// (momentum = 0 reproduces the plain rule exactly).
class Sgd {
 public:
  explicit Sgd(float lr, float momentum = 0.0f);
  /// Applies one update to every trainable param and clears the grads.
  /// Throws when no trainable param has received a gradient since the
  /// previous step (step before backward).
  void step(const std::vector<Param*>& params);
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  std::int64_t steps() const { return steps_; }

 private:
  float lr_;
  float momentum_;
  std::int64_t steps_ = 0;
  std::unordered_map<const Param*, std::vector<float>> velocity_;
};

/// Adam with bias-corrected first and second moments.
class Adam {
 public:
  Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);
  void step(const std::vector<Param*>& params);
  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }
  std::int64_t steps() const { return steps_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  float lr_, beta1_, beta2_, eps_;
  std::int64_t steps_ = 0;
  std::unordered_map<const Param*, Moments> state_;
};

}  // namespace fulora

#include "fulora/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fulora {

namespace {

void require_fresh_grads(const std::vector<Param*>& params, const char* who) {
  for (const auto* p : params) {
    if (p->trainable() && p->has_grad()) return;
  }
  throw std::logic_error(std::string(who) + ": step called before backward (no fresh gradients)");
}

}  // namespace

Sgd::Sgd(float lr, float momentum) : lr_(lr), momentum_(momentum) {
  if (!(lr >= 0.0f)) throw std::invalid_argument("sgd: learning rate must be >= 0");
  if (momentum < 0.0f || momentum >= 1.0f) throw std::invalid_argument("sgd: momentum must be in [0, 1)");
}

void Sgd::step(const std::vector<Param*>& params) {
  require_fresh_grads(params, "sgd");
  for (auto* p : params) {
    if (!p->trainable() || !p->has_grad()) continue;
    auto value = p->value().mutable_data();
    auto grad = p->value().grad_data();
    if (momentum_ == 0.0f) {
      for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr_ * grad[i];
    } else {
      auto& vel = velocity_[p];
      if (vel.empty()) vel.assign(value.size(), 0.0f);
      for (std::size_t i = 0; i < value.size(); ++i) {
        vel[i] = momentum_ * vel[i] + grad[i];
        value[i] -= lr_ * vel[i];
      }
    }
    p->zero_grad();
  }
  ++steps_;
}

Adam::Adam(float lr, float beta1, float beta2, float eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr >= 0.0f)) throw std::invalid_argument("adam: learning rate must be >= 0");
  if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f) throw std::invalid_argument("adam: betas must be in [0, 1)");
}

void Adam::step(const std::vector<Param*>& params) {
  require_fresh_grads(params, "adam");
  ++steps_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(steps_));
  const float step_size = static_cast<float>(lr_ / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (auto* p : params) {
    if (!p->trainable() || !p->has_grad()) continue;
    auto value = p->value().mutable_data();
    auto grad = p->value().grad_data();
    auto& st = state_[p];
    if (st.m.empty()) {
      st.m.assign(value.size(), 0.0f);
      st.v.assign(value.size(), 0.0f);
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i];
      st.m[i] = beta1_ * st.m[i] + (1.0f - beta1_) * g;
      st.v[i] = beta2_ * st.v[i] + (1.0f - beta2_) * g * g;
      value[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) * inv_sqrt_bc2 + eps_);
    }
    p->zero_grad();
  }
}

}  // namespace fulora

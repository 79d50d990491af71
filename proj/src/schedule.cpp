#include "fulora/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fulora/error.hpp"
#include "fulora/ops.hpp"

namespace fulora {

namespace {

void check_step(int t, int steps) {
  if (t < 1 || t > steps) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

}  // namespace

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end)
    : beta_start_(beta_start), beta_end_(beta_end) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule: require 0 < beta_start <= beta_end < 1");
  }
  beta_.resize(static_cast<std::size_t>(steps));
  alpha_bar_.resize(beta_.size());
  log_sigma_.resize(beta_.size());
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double b = steps == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    prod *= 1.0 - b;
    beta_[static_cast<std::size_t>(t - 1)] = b;
    alpha_bar_[static_cast<std::size_t>(t - 1)] = prod;
    log_sigma_[static_cast<std::size_t>(t - 1)] = 0.5 * std::log((1.0 - prod) / prod);
  }
}

double NoiseSchedule::beta(int t) const {
  check_step(t, steps());
  return beta_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_step(t, steps());
  return alpha_bar_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::sigma(int t) const {
  check_step(t, steps());
  return std::exp(log_sigma_[static_cast<std::size_t>(t - 1)]);
}

double NoiseSchedule::timestep_for_sigma(double sigma) const {
  if (!(sigma > 0.0)) return 1.0;
  const double ls = std::log(sigma);
  if (ls <= log_sigma_.front()) return 1.0;
  if (ls >= log_sigma_.back()) return static_cast<double>(steps());
  const auto it = std::upper_bound(log_sigma_.begin(), log_sigma_.end(), ls);
  const auto hi = static_cast<std::size_t>(it - log_sigma_.begin());
  const std::size_t lo = hi - 1;
  const double w = (ls - log_sigma_[lo]) / (log_sigma_[hi] - log_sigma_[lo]);
  return static_cast<double>(lo + 1) + w;
}

double NoiseSchedule::sigma_at(double t) const {
  const double tc = std::clamp(t, 1.0, static_cast<double>(steps()));
  const auto lo = static_cast<std::size_t>(std::floor(tc)) - 1;
  if (lo + 1 >= log_sigma_.size()) return std::exp(log_sigma_.back());
  const double w = tc - static_cast<double>(lo + 1);
  return std::exp(log_sigma_[lo] + w * (log_sigma_[lo + 1] - log_sigma_[lo]));
}

void NoiseSchedule::save_to(Checkpoint& ckpt) const {
  std::vector<float> b(beta_.begin(), beta_.end());
  std::vector<float> a(alpha_bar_.begin(), alpha_bar_.end());
  const auto n = static_cast<std::int64_t>(beta_.size());
  ckpt.put("schedule.beta", Tensor::from({n}, std::move(b)));
  ckpt.put("schedule.alpha_bar", Tensor::from({n}, std::move(a)));
  ckpt.put("schedule.T", Tensor::scalar(static_cast<float>(n)));
}

Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " and eps " + shape_str(eps.shape()) + " differ");
  }
  const std::int64_t batch = x0.dim() == 0 ? 1 : x0.size(0);
  if (t.size() != 1 && static_cast<std::int64_t>(t.size()) != batch) {
    throw ShapeError("q_sample: " + std::to_string(t.size()) + " steps for batch of " + std::to_string(batch));
  }
  const std::int64_t per = x0.numel() / batch;
  auto xs = x0.data();
  auto es = eps.data();
  std::vector<float> out(xs.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const int tb = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(b)];
    const double ab = schedule.alpha_bar(tb);
    if (tb == 0) throw std::out_of_range("diffusion step 0 outside [1, T]");
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i) {
      out[static_cast<std::size_t>(i)] = static_cast<float>(sa * xs[static_cast<std::size_t>(i)] + sn * es[static_cast<std::size_t>(i)]);
    }
  }
  return Tensor::from(x0.shape(), std::move(out));
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  const int ts[1] = {t};
  return q_sample(x0, std::span<const int>(ts, 1), eps, schedule);
}

double predict_mu_scalar(double xt, double beta_t, double alpha_bar_t, double eps_hat) {
  if (!(alpha_bar_t < 1.0)) throw std::domain_error("predict_mu: alpha_bar_t == 1 makes beta_t / sqrt(1 - alpha_bar_t) undefined");
  return (xt - beta_t / std::sqrt(1.0 - alpha_bar_t) * eps_hat) / std::sqrt(1.0 - beta_t);
}

Tensor predict_mu(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& schedule) {
  if (xt.shape() != eps_hat.shape()) {
    throw ShapeError("predict_mu: xt " + shape_str(xt.shape()) + " and eps_hat " + shape_str(eps_hat.shape()) + " differ");
  }
  const double b = schedule.beta(t);
  const double ab = schedule.alpha_bar(t);
  if (!(ab < 1.0)) throw std::domain_error("predict_mu: alpha_bar_t == 1");
  const double c_eps = b / std::sqrt(1.0 - ab);
  const double c_out = 1.0 / std::sqrt(1.0 - b);
  auto xs = xt.data();
  auto es = eps_hat.data();
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<float>(c_out * (xs[i] - c_eps * es[i]));
  return Tensor::from(xt.shape(), std::move(out));
}

Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat) { return mse_loss(eps_hat, eps); }

Tensor ancestral_step(const Tensor& xt, int t, const Tensor& eps_hat, const Tensor& z, const NoiseSchedule& schedule,
                      ReverseNoise noise) {
  Tensor mu = predict_mu(xt, t, eps_hat, schedule);
  if (t == 1) return mu;
  if (z.shape() != xt.shape()) throw ShapeError("ancestral_step: z " + shape_str(z.shape()) + " vs xt " + shape_str(xt.shape()));
  const double b = schedule.beta(t);
  const double s = noise == ReverseNoise::SqrtBeta ? std::sqrt(b) : b;
  auto m = mu.mutable_data();
  auto zs = z.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(m[i] + s * zs[i]);
  return mu;
}

}  // namespace fulora

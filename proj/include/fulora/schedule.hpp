#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fulora/checkpoint.hpp"
#include "fulora/tensor.hpp"

namespace fulora {

/// Noise level applied by the ancestral step.
enum class ReverseNoise {
  SqrtBeta,  // sigma_t = sqrt(beta_t)
  Beta,      // sigma_t = beta_t, the coefficient exactly as printed in the method description
};

/// Linear variance schedule over steps t = 1..T. alpha_bar(t) is the running
/// product of (1 - beta_s) for s <= t, with alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, double beta_start, double beta_end);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(int t) const;
  double alpha_bar(int t) const;
  /// VE noise level sqrt((1 - alpha_bar) / alpha_bar) at step t.
  double sigma(int t) const;
  /// Fractional timestep whose sigma matches (log-linear interpolation
  /// between integer steps, clamped to [1, T]).
  double timestep_for_sigma(double sigma) const;

  /// Inverse of timestep_for_sigma on [1, T] (log-linear between steps).
  double sigma_at(double t) const;
  std::span<const double> betas() const { return beta_; }
  std::span<const double> alpha_bars() const { return alpha_bar_; }

  /// "schedule.beta", "schedule.alpha_bar" and scalar "schedule.T".
  void save_to(Checkpoint& ckpt) const;

 private:
  double beta_start_, beta_end_;
  std::vector<double> beta_;       // index t-1
  std::vector<double> alpha_bar_;  // index t-1
  std::vector<double> log_sigma_;  // index t-1
};

/// Training example: x0, per-sample steps, injected noise and noised input.
struct DiffusionBatch {
  Tensor x0;
  std::vector<int> t;
  Tensor eps;
  Tensor xt;
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, with one step per
/// leading-dimension sample (or a single step broadcast to all).
Tensor q_sample(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule);
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Reverse-process mean: (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t).
Tensor predict_mu(const Tensor& xt, int t, const Tensor& eps_hat, const NoiseSchedule& schedule);

/// Scalar form of predict_mu for explicit (beta_t, alpha_bar_t).
double predict_mu_scalar(double xt, double beta_t, double alpha_bar_t, double eps_hat);

/// Mean squared error between injected and predicted noise.
Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat);

/// mu + sigma_t z for t > 1, mu for t = 1.
Tensor ancestral_step(const Tensor& xt, int t, const Tensor& eps_hat, const Tensor& z,
                      const NoiseSchedule& schedule, ReverseNoise noise = ReverseNoise::SqrtBeta);

}  // namespace fulora

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fulora/denoiser.hpp"
#include "fulora/lora.hpp"
#include "fulora/schedule.hpp"

namespace fulora {

enum class SamplerKind { Ancestral, Euler, UniPC };

std::string to_string(SamplerKind kind);
SamplerKind sampler_from_string(const std::string& name);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Euler;
  int steps = 20;
  std::uint64_t seed = 0;
  float lora_weight = 1.0f;
  int unipc_order = 2;
  ReverseNoise reverse_noise = ReverseNoise::SqrtBeta;

  /// Throws ConfigError unless 1 <= steps <= T and unipc_order in {1,2,3}
  /// with order <= steps.
  void validate(int T) const;
};

/// Karras spacing (rho = 7) between sigma(T) and sigma(1), followed by an
/// exact 0: steps + 1 strictly decreasing entries.
std::vector<double> karras_sigmas(const NoiseSchedule& schedule, int steps, double rho = 7.0);

/// Timesteps evenly spaced from T down to 1 (fractional), mapped to sigma,
/// followed by an exact 0.
std::vector<double> uniform_time_sigmas(const NoiseSchedule& schedule, int steps);

/// Evenly spaced in log sigma between sigma(T) and sigma(1), then 0.
std::vector<double> log_sigmas(const NoiseSchedule& schedule, int steps);

/// Unit Gaussian x_T of shape (n, sample_shape...). Image i draws from its own
/// stream derive_seed(seed, i), so batches can be split freely.
Tensor initial_noise(const Shape& sample_shape, int n, std::uint64_t seed);

/// Full-T reverse chain from x_T. Step noise for image i continues the same
/// per-image stream used for its x_T.
Tensor sample_ancestral(const NoisePredictor& model, const NoiseSchedule& schedule, const Shape& sample_shape, int n,
                        std::uint64_t seed, ReverseNoise noise = ReverseNoise::SqrtBeta);

/// Probability-flow ODE on the Karras grid with Euler steps, in the
/// variance-exploding frame x = x_vp / alpha. Starts from x_T (VP frame).
Tensor sample_euler(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps);

/// UniPC with the B(h) = h variant, data prediction, order warm-up and
/// order 1 on the final step. Order 1 is the predictor alone, which reduces
/// to the DDIM update. sample_unipc steps on the log_sigmas grid; Karras
/// spacing leaves steps too large in lambda near sigma_min at 10 steps.
Tensor sample_unipc(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps,
                    int order);
Tensor sample_unipc_on(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                       const std::vector<double>& sigmas, int order);

/// Deterministic first-order update x_t = alpha_t x0 + sigma_t eps on the
/// log_sigmas grid (reference for the order-1 reduction).
Tensor sample_ddim(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps);
Tensor sample_ddim_on(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                      const std::vector<double>& sigmas);

/// Dispatches on cfg.kind. Ancestral ignores cfg.steps (full T).
Tensor sample(const NoisePredictor& model, const NoiseSchedule& schedule, const Shape& sample_shape, int n,
              const SamplerConfig& cfg);

/// Model ready for sampling with adapters at the given weight: merged into a
/// copy when weight == 1, routed dynamically through lora_forward otherwise.
UNet with_lora(const UNet& base, const LoraSet& set, float weight);

/// "<plane>_<sampler>_<seed>.png"
std::string sample_filename(const std::string& plane, SamplerKind kind, std::uint64_t seed);

}  // namespace fulora

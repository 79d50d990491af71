#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fulora/denoiser.hpp"
#include "fulora/nn.hpp"
#include "fulora/param.hpp"
#include "fulora/schedule.hpp"

namespace fulora::toy2d {

/// Mixture of `modes` isotropic Gaussians evenly spaced on a circle.
struct Ring {
  int modes = 8;
  double radius = 1.0;
  double stddev = 0.1;

  std::array<double, 2> center(int k) const;
  /// (n, 2) samples.
  Tensor sample(int n, std::uint64_t seed) const;
  /// Index of the nearest center for each row of (n, 2) points.
  std::vector<int> assign(const Tensor& points) const;
};

/// Time-conditioned MLP noise predictor for 2-D points.
class MlpDenoiser : public NoisePredictor {
 public:
  MlpDenoiser(int hidden, int time_dim, std::uint64_t seed);
  Tensor predict(const Tensor& xt, std::span<const double> t) const override;
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

 private:
  int time_dim_;
  ParamStore store_;
  nn::Dense in_, h1_, h2_, out_;
};

struct TrainStats {
  std::vector<float> losses;
};

/// Adam on the eps-prediction loss with uniform t; lr decays linearly to 10%.
TrainStats train(MlpDenoiser& model, const Ring& ring, const NoiseSchedule& schedule, int steps, int batch,
                 float lr, std::uint64_t seed);

}  // namespace fulora::toy2d

#include "fulora/toy2d.hpp"

#include <cmath>
#include <numbers>

#include "fulora/ops.hpp"
#include "fulora/optim.hpp"
#include "fulora/rng.hpp"

namespace fulora::toy2d {

std::array<double, 2> Ring::center(int k) const {
  const double a = 2.0 * std::numbers::pi * k / modes;
  return {radius * std::cos(a), radius * std::sin(a)};
}

Tensor Ring::sample(int n, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(2 * n));
  for (int i = 0; i < n; ++i) {
    auto c = center(static_cast<int>(rng.uniform_int(0, modes - 1)));
    v[static_cast<std::size_t>(2 * i)] = static_cast<float>(c[0] + stddev * rng.normal());
    v[static_cast<std::size_t>(2 * i + 1)] = static_cast<float>(c[1] + stddev * rng.normal());
  }
  return Tensor::from({n, 2}, std::move(v));
}

std::vector<int> Ring::assign(const Tensor& points) const {
  std::vector<int> out;
  auto d = points.data();
  for (std::int64_t i = 0; i < points.size(0); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < modes; ++k) {
      auto c = center(k);
      const double dx = d[static_cast<std::size_t>(2 * i)] - c[0], dy = d[static_cast<std::size_t>(2 * i + 1)] - c[1];
      if (dx * dx + dy * dy < best_d) {
        best_d = dx * dx + dy * dy;
        best = k;
      }
    }
    out.push_back(best);
  }
  return out;
}

MlpDenoiser::MlpDenoiser(int hidden, int time_dim, std::uint64_t seed) : time_dim_(time_dim) {
  Rng rng(seed);
  in_ = nn::Dense::make(store_, "toy.in", 2 + time_dim, hidden, rng);
  h1_ = nn::Dense::make(store_, "toy.h1", hidden, hidden, rng);
  h2_ = nn::Dense::make(store_, "toy.h2", hidden, hidden, rng);
  out_ = nn::Dense::make(store_, "toy.out", hidden, 2, rng);
}

Tensor MlpDenoiser::predict(const Tensor& xt, std::span<const double> t) const {
  const auto n = xt.size(0);
  std::vector<float> te;
  te.reserve(static_cast<std::size_t>(n * time_dim_));
  for (double ti : t) {
    auto e = time_embed(ti, time_dim_);
    te.insert(te.end(), e.begin(), e.end());
  }
  Tensor inp = concat({xt, Tensor::from({n, time_dim_}, std::move(te))}, 1);
  Tensor h = silu(in_(inp));
  h = silu(h1_(h));
  h = silu(h2_(h));
  return out_(h);
}

TrainStats train(MlpDenoiser& model, const Ring& ring, const NoiseSchedule& schedule, int steps, int batch,
                 float lr, std::uint64_t seed) {
  TrainStats stats;
  Adam adam(lr);
  Rng rng(derive_seed(seed, "toy2d.train"));
  for (int s = 0; s < steps; ++s) {
    set_step_index(s);
    Tensor x0 = ring.sample(batch, rng.next_u64());
    std::vector<int> t(static_cast<std::size_t>(batch));
    for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, schedule.steps()));
    std::vector<float> ev(static_cast<std::size_t>(2 * batch));
    for (auto& v : ev) v = static_cast<float>(rng.normal());
    Tensor eps = Tensor::from({batch, 2}, std::move(ev));
    Tensor xt = q_sample(x0, t, eps, schedule);
    std::vector<double> td(t.begin(), t.end());
    Tensor loss = diffusion_loss(eps, model.predict(xt, td));
    backward(loss);
    adam.set_lr(lr * (1.0f - 0.9f * static_cast<float>(s) / static_cast<float>(steps)));
    adam.step(model.params().trainable());
    stats.losses.push_back(loss.item());
  }
  set_step_index(-1);
  return stats;
}

}  // namespace fulora::toy2d

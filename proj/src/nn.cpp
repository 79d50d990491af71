#include "fulora/nn.hpp"

#include <cmath>

namespace fulora::nn {

Tensor uniform_init(Shape shape, float bound, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor normal_init(Shape shape, float stddev, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
  return Tensor::from(std::move(shape), std::move(v));
}

int norm_groups(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

Conv2d Conv2d::make(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                    int padding, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_ch * kernel * kernel));
  Conv2d c;
  c.weight = &store.add(name + ".weight", uniform_init({out_ch, in_ch, kernel, kernel}, bound, rng));
  c.bias = &store.add(name + ".bias", uniform_init({out_ch}, bound, rng));
  c.stride = stride;
  c.padding = padding;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return conv2d(x, weight->value(), bias ? bias->value() : Tensor(), stride, padding);
}

Dense Dense::make(ParamStore& store, const std::string& name, int in_dim, int out_dim, Rng& rng, bool with_bias) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_dim));
  Dense d;
  d.weight = &store.add(name + ".weight", uniform_init({out_dim, in_dim}, bound, rng));
  if (with_bias) d.bias = &store.add(name + ".bias", uniform_init({out_dim}, bound, rng));
  return d;
}

Tensor Dense::operator()(const Tensor& x) const {
  return linear(x, weight->value(), bias ? bias->value() : Tensor());
}

GroupNorm GroupNorm::make(ParamStore& store, const std::string& name, int channels) {
  GroupNorm n;
  n.gamma = &store.add(name + ".gamma", Tensor::full({channels}, 1.0f));
  n.beta = &store.add(name + ".beta", Tensor::zeros({channels}));
  n.groups = norm_groups(channels);
  return n;
}

Tensor GroupNorm::operator()(const Tensor& x) const {
  return group_norm(x, groups, gamma->value(), beta->value());
}

LayerNorm LayerNorm::make(ParamStore& store, const std::string& name, int dim) {
  LayerNorm n;
  n.gamma = &store.add(name + ".gamma", Tensor::full({dim}, 1.0f));
  n.beta = &store.add(name + ".beta", Tensor::zeros({dim}));
  return n;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma->value(), beta->value()); }

}  // namespace fulora::nn

#pragma once

#include <string>

#include "fulora/ops.hpp"
#include "fulora/param.hpp"
#include "fulora/rng.hpp"

namespace fulora::nn {

Tensor uniform_init(Shape shape, float bound, Rng& rng);
Tensor normal_init(Shape shape, float stddev, Rng& rng);

/// Largest group count <= 8 that divides channels.
int norm_groups(int channels);

struct Conv2d {
  Param* weight = nullptr;
  Param* bias = nullptr;
  int stride = 1;
  int padding = 0;

  static Conv2d make(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                     int padding, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct Dense {
  Param* weight = nullptr;  // (out, in)
  Param* bias = nullptr;

  static Dense make(ParamStore& store, const std::string& name, int in_dim, int out_dim, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct GroupNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  int groups = 1;

  static GroupNorm make(ParamStore& store, const std::string& name, int channels);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  static LayerNorm make(ParamStore& store, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace fulora::nn

#include "fulora/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fulora/ops.hpp"
#include "fulora/rng.hpp"

namespace fulora {

namespace {

double snap_eps(double eps) {
  if (!(eps > 1e-6 && eps < 1e-1)) throw std::invalid_argument("grad_check: eps must lie in (1e-6, 1e-1)");
  return std::exp2(std::round(std::log2(eps)));
}

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

struct Accum {
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  void add(double a, double n) {
    diff2 += (a - n) * (a - n);
    a2 += a * a;
    n2 += n * n;
  }
  double rel() const { return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8}); }
};

double weighted_sum(const Tensor& y, const std::vector<float>& w) {
  auto d = y.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(w[i]) * d[i];
  return acc;
}

}  // namespace

GradCheckReport grad_check_inputs(const OpFn& op, std::vector<Tensor> inputs, double eps, std::uint64_t seed) {
  const double h = snap_eps(eps);
  for (auto& in : inputs) {
    if (!in.is_leaf()) throw std::invalid_argument("grad_check: inputs must be leaves");
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor y = op(inputs);
  Rng rng(seed ^ 0x5EEDULL);
  std::vector<float> w(static_cast<std::size_t>(y.numel()), 1.0f);
  if (y.numel() > 1) {
    for (auto& v : w) {
      v = static_cast<float>(rng.uniform_int(1, 16)) / 16.0f;
      if (rng.bernoulli(0.5)) v = -v;
    }
  }
  Tensor loss = y.numel() > 1 ? sum(mul(y, Tensor::from(y.shape(), w))) : reshape(y, {});
  backward(loss);

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto analytic = inputs[k].grad().to_vector();
    auto data = inputs[k].mutable_data();
    Accum acc;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float orig = data[i];
      const float up = static_cast<float>(orig + h);
      const float down = static_cast<float>(orig - h);
      data[i] = up;
      const double f_up = weighted_sum(op(inputs), w);
      data[i] = down;
      const double f_down = weighted_sum(op(inputs), w);
      data[i] = orig;
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      acc.add(analytic[i], numeric);
      report.max_entry_error = std::max(report.max_entry_error, rel_error(analytic[i], numeric));
      ++report.entries_checked;
    }
    if (acc.rel() >= report.max_rel_error) {
      report.max_rel_error = acc.rel();
      report.worst = "input[" + std::to_string(k) + "]";
    }
  }
  return report;
}

GradCheckReport grad_check(const OpFn& op, const std::vector<Shape>& shapes, double eps, std::uint64_t seed,
                           float input_scale) {
  Rng rng(seed);
  std::vector<Tensor> inputs;
  for (const auto& s : shapes) {
    std::vector<float> v(static_cast<std::size_t>(numel_of(s)));
    for (auto& x : v) x = input_scale * (static_cast<float>(rng.uniform_int(-256, 255)) + 0.5f) / 256.0f;
    inputs.push_back(Tensor::from(s, std::move(v), true));
  }
  return grad_check_inputs(op, std::move(inputs), eps, seed);
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn, const std::vector<Param*>& params,
                                  double eps, std::size_t samples, std::uint64_t seed) {
  const double h = snap_eps(eps);
  for (auto* p : params) p->zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<std::vector<float>> analytic;
  std::size_t total = 0;
  for (auto* p : params) {
    analytic.push_back(p->grad().to_vector());
    total += static_cast<std::size_t>(p->value().numel());
  }
  if (total == 0) throw std::invalid_argument("grad_check_params: no parameters");
  Rng rng(seed);
  GradCheckReport report;
  Accum acc;
  double worst_entry = -1.0;
  NoGradGuard no_grad;
  for (std::size_t s = 0; s < samples; ++s) {
    auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
    std::size_t k = 0;
    while (flat >= static_cast<std::size_t>(params[k]->value().numel())) {
      flat -= static_cast<std::size_t>(params[k]->value().numel());
      ++k;
    }
    auto data = params[k]->value().mutable_data();
    const float orig = data[flat];
    const float up = static_cast<float>(orig + h);
    const float down = static_cast<float>(orig - h);
    data[flat] = up;
    const double f_up = loss_fn().item();
    data[flat] = down;
    const double f_down = loss_fn().item();
    data[flat] = orig;
    const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double err = rel_error(analytic[k][flat], numeric);
    acc.add(analytic[k][flat], numeric);
    ++report.entries_checked;
    if (err > worst_entry) {
      worst_entry = err;
      report.max_entry_error = err;
      report.worst = params[k]->name() + "[" + std::to_string(flat) + "]";
    }
  }
  report.max_rel_error = acc.rel();
  for (auto* p : params) p->zero_grad();
  return report;
}

}  // namespace fulora

#include "fulora/samplers.hpp"

#include <array>
#include <cmath>
#include <deque>
#include <stdexcept>

#include "fulora/error.hpp"
#include "fulora/ops.hpp"
#include "fulora/rng.hpp"

namespace fulora {

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::Ancestral: return "ancestral";
    case SamplerKind::Euler: return "euler";
    case SamplerKind::UniPC: return "unipc";
  }
  return "?";
}

SamplerKind sampler_from_string(const std::string& name) {
  if (name == "ancestral") return SamplerKind::Ancestral;
  if (name == "euler") return SamplerKind::Euler;
  if (name == "unipc") return SamplerKind::UniPC;
  throw ConfigError("unknown sampler '" + name + "' (expected ancestral, euler or unipc)");
}

void SamplerConfig::validate(int T) const {
  if (steps < 1 || steps > T)
    throw ConfigError("sampler steps " + std::to_string(steps) + " outside [1, " + std::to_string(T) + "]");
  if (unipc_order < 1 || unipc_order > 3) throw ConfigError("unipc_order must be 1, 2 or 3");
  if (kind == SamplerKind::UniPC && unipc_order > steps)
    throw ConfigError("unipc_order " + std::to_string(unipc_order) + " exceeds steps " + std::to_string(steps));
}

std::vector<double> karras_sigmas(const NoiseSchedule& schedule, int steps, double rho) {
  if (steps < 1) throw ConfigError("karras_sigmas: steps must be >= 1");
  const double smax = schedule.sigma(schedule.steps());
  const double smin = schedule.sigma(1);
  std::vector<double> out;
  if (steps == 1) {
    out = {smax, 0.0};
    return out;
  }
  const double a = std::pow(smax, 1.0 / rho), b = std::pow(smin, 1.0 / rho);
  for (int i = 0; i < steps; ++i) out.push_back(std::pow(a + (b - a) * i / (steps - 1), rho));
  out.push_back(0.0);
  for (std::size_t i = 1; i < out.size(); ++i)
    if (!(out[i] < out[i - 1])) throw ConfigError("karras_sigmas: grid not strictly decreasing (schedule too flat)");
  return out;
}

namespace {

void check_grid(const std::vector<double>& sig) {
  if (sig.size() < 2 || sig.back() != 0.0) throw ConfigError("sigma grid must end in an exact 0");
  for (std::size_t i = 1; i < sig.size(); ++i)
    if (!(sig[i] < sig[i - 1])) throw ConfigError("sigma grid not strictly decreasing (schedule too flat)");
}

}  // namespace

std::vector<double> uniform_time_sigmas(const NoiseSchedule& schedule, int steps) {
  if (steps < 1) throw ConfigError("uniform_time_sigmas: steps must be >= 1");
  const double T = schedule.steps();
  std::vector<double> out;
  for (int i = 0; i < steps; ++i) out.push_back(schedule.sigma_at(steps == 1 ? T : T - (T - 1.0) * i / (steps - 1)));
  out.push_back(0.0);
  check_grid(out);
  return out;
}

std::vector<double> log_sigmas(const NoiseSchedule& schedule, int steps) {
  if (steps < 1) throw ConfigError("log_sigmas: steps must be >= 1");
  const double a = std::log(schedule.sigma(schedule.steps())), b = std::log(schedule.sigma(1));
  std::vector<double> out;
  for (int i = 0; i < steps; ++i) out.push_back(std::exp(steps == 1 ? a : a + (b - a) * i / (steps - 1)));
  out.push_back(0.0);
  check_grid(out);
  return out;
}

namespace {

Rng image_rng(std::uint64_t seed, int i) { return Rng(derive_seed(seed, static_cast<std::uint64_t>(i))); }

Shape batch_shape(const Shape& sample_shape, int n) {
  Shape s{n};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return s;
}

std::vector<float> draw(Rng& rng, std::int64_t count) {
  std::vector<float> v(static_cast<std::size_t>(count));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Model evaluation at a VE noise level: returns eps for x_ve.
Tensor eps_at(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_ve, double sigma) {
  const double t = schedule.timestep_for_sigma(sigma);
  std::vector<double> ts(static_cast<std::size_t>(x_ve.size(0)), t);
  const float c_in = static_cast<float>(1.0 / std::sqrt(sigma * sigma + 1.0));
  return model.predict(scale(x_ve, c_in), ts);
}

// x + a * y elementwise, detached arithmetic in double.
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  auto xd = x.data();
  auto yd = y.data();
  std::vector<float> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    out[i] = static_cast<float>(a * static_cast<double>(xd[i]) + b * static_cast<double>(yd[i]));
    if (!std::isfinite(out[i])) throw NumericalError("non-finite value in sampler update");
  }
  return Tensor::from(x.shape(), std::move(out));
}

void check_x_T(const Tensor& x_T) {
  if (!x_T.defined() || x_T.dim() < 2) throw ShapeError("sampler: x_T must be a batch (n, ...)");
}

}  // namespace

Tensor initial_noise(const Shape& sample_shape, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("sampler: n must be >= 1");
  const auto per = numel_of(sample_shape);
  std::vector<float> all;
  all.reserve(static_cast<std::size_t>(per * n));
  for (int i = 0; i < n; ++i) {
    Rng rng = image_rng(seed, i);
    auto v = draw(rng, per);
    all.insert(all.end(), v.begin(), v.end());
  }
  return Tensor::from(batch_shape(sample_shape, n), std::move(all));
}

Tensor sample_ancestral(const NoisePredictor& model, const NoiseSchedule& schedule, const Shape& sample_shape, int n,
                        std::uint64_t seed, ReverseNoise noise) {
  if (n < 1) throw ConfigError("sampler: n must be >= 1");
  NoGradGuard no_grad;
  const auto per = numel_of(sample_shape);
  std::vector<Rng> rngs;
  std::vector<float> x0;
  for (int i = 0; i < n; ++i) {
    rngs.push_back(image_rng(seed, i));
    auto v = draw(rngs.back(), per);
    x0.insert(x0.end(), v.begin(), v.end());
  }
  const Shape shape = batch_shape(sample_shape, n);
  Tensor x = Tensor::from(shape, std::move(x0));
  for (int t = schedule.steps(); t >= 1; --t) {
    std::vector<double> ts(static_cast<std::size_t>(n), t);
    Tensor eps = model.predict(x, ts);
    Tensor z;
    if (t > 1) {
      std::vector<float> zv;
      zv.reserve(static_cast<std::size_t>(per * n));
      for (auto& r : rngs) {
        auto v = draw(r, per);
        zv.insert(zv.end(), v.begin(), v.end());
      }
      z = Tensor::from(shape, std::move(zv));
    } else {
      z = Tensor::zeros(shape);
    }
    x = ancestral_step(x, t, eps, z, schedule, noise);
  }
  return x;
}

Tensor sample_euler(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps) {
  check_x_T(x_T);
  NoGradGuard no_grad;
  auto sig = karras_sigmas(schedule, steps);
  // VE frame: x_ve = x_vp * sqrt(sigma^2 + 1).
  Tensor x = scale(x_T, static_cast<float>(std::sqrt(sig[0] * sig[0] + 1.0)));
  for (int i = 0; i < steps; ++i) {
    Tensor eps = eps_at(model, schedule, x, sig[static_cast<std::size_t>(i)]);
    // dx/dsigma = (x - x0_hat) / sigma = eps
    x = axpby(1.0, x, sig[static_cast<std::size_t>(i) + 1] - sig[static_cast<std::size_t>(i)], eps);
  }
  return x;
}

namespace {

struct VpPoint {
  double alpha, sigma, lambda;
};

VpPoint vp_point(double sigma_ve) {
  const double alpha = 1.0 / std::sqrt(sigma_ve * sigma_ve + 1.0);
  return {alpha, sigma_ve * alpha, -std::log(sigma_ve)};
}

// Data prediction from a VP-frame sample.
Tensor x0_from(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_vp, double sigma_ve) {
  const VpPoint p = vp_point(sigma_ve);
  const double t = schedule.timestep_for_sigma(sigma_ve);
  std::vector<double> ts(static_cast<std::size_t>(x_vp.size(0)), t);
  Tensor eps = model.predict(x_vp, ts);
  return axpby(1.0 / p.alpha, x_vp, -p.sigma / p.alpha, eps);
}

std::vector<double> solve(std::vector<std::vector<double>> A, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::fabs(A[r][c]) > std::fabs(A[piv][c])) piv = r;
    std::swap(A[c], A[piv]);
    std::swap(b[c], b[piv]);
    if (A[c][c] == 0.0) throw NumericalError("unipc: singular coefficient system");
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = A[r][c] / A[c][c];
      for (std::size_t k = c; k < n; ++k) A[r][k] -= f * A[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= A[i][k] * x[k];
    x[i] = s / A[i][i];
  }
  return x;
}

// Shared pieces of the predictor and corrector: rk ratios, differences D1,
// and the (R, b) system for B(h) = h in the data-prediction frame.
struct UniCoeffs {
  double h, h_phi_1, B_h;
  std::vector<double> rks;
  std::vector<std::vector<double>> R;
  std::vector<double> b;
};

UniCoeffs uni_coeffs(double lambda_t, double lambda_s0, const std::vector<double>& lambda_prev, int order) {
  UniCoeffs c;
  c.h = lambda_t - lambda_s0;
  for (int i = 1; i < order; ++i) c.rks.push_back((lambda_prev[static_cast<std::size_t>(i - 1)] - lambda_s0) / c.h);
  c.rks.push_back(1.0);
  const double hh = -c.h;
  c.h_phi_1 = std::expm1(hh);
  double h_phi_k = c.h_phi_1 / hh - 1.0;
  double factorial = 1.0;
  c.B_h = hh;
  for (int i = 1; i <= order; ++i) {
    std::vector<double> row;
    for (double rk : c.rks) row.push_back(std::pow(rk, i - 1));
    c.R.push_back(row);
    c.b.push_back(h_phi_k * factorial / c.B_h);
    factorial *= (i + 1);
    h_phi_k = h_phi_k / hh - 1.0 / factorial;
  }
  return c;
}

}  // namespace

Tensor sample_unipc(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps,
                    int order) {
  return sample_unipc_on(model, schedule, x_T, log_sigmas(schedule, steps), order);
}

Tensor sample_unipc_on(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                       const std::vector<double>& sig, int order) {
  check_x_T(x_T);
  check_grid(sig);
  const int steps = static_cast<int>(sig.size()) - 1;
  if (order < 1 || order > 3) throw ConfigError("unipc_order must be 1, 2 or 3");
  if (order > steps) throw ConfigError("unipc_order " + std::to_string(order) + " exceeds steps " + std::to_string(steps));
  NoGradGuard no_grad;
  const bool corrector = order >= 2;

  std::deque<Tensor> m;         // recent x0 predictions, newest last
  std::deque<double> lambdas;   // their log-SNR half values
  Tensor x = x_T;               // VP frame
  Tensor last_sample;
  int lower_order_nums = 0;
  int this_order = 1;

  for (int i = 0; i < steps; ++i) {
    const double s_cur = sig[static_cast<std::size_t>(i)];
    const VpPoint cur = vp_point(s_cur);
    Tensor m_new = x0_from(model, schedule, x, s_cur);

    if (corrector && i > 0) {
      // Corrector for the step that produced x, reusing this evaluation.
      const VpPoint prev = vp_point(sig[static_cast<std::size_t>(i) - 1]);
      std::vector<double> lam_prev;
      for (int k = 1; k < this_order; ++k) lam_prev.push_back(lambdas[lambdas.size() - 1 - static_cast<std::size_t>(k)]);
      UniCoeffs c = uni_coeffs(cur.lambda, prev.lambda, lam_prev, this_order);
      std::vector<double> rhos = this_order == 1 ? std::vector<double>{0.5} : solve(c.R, c.b);
      const Tensor& m0 = m.back();
      Tensor xc = axpby(cur.sigma / prev.sigma, last_sample, -cur.alpha * c.h_phi_1, m0);
      for (int k = 1; k < this_order; ++k) {
        const Tensor& mk = m[m.size() - 1 - static_cast<std::size_t>(k)];
        const double w = -cur.alpha * c.B_h * rhos[static_cast<std::size_t>(k - 1)] / c.rks[static_cast<std::size_t>(k - 1)];
        xc = axpby(1.0, xc, w, axpby(1.0, mk, -1.0, m0));
      }
      xc = axpby(1.0, xc, -cur.alpha * c.B_h * rhos.back(), axpby(1.0, m_new, -1.0, m0));
      x = xc;
    }

    m.push_back(m_new);
    lambdas.push_back(cur.lambda);
    while (static_cast<int>(m.size()) > order) {
      m.pop_front();
      lambdas.pop_front();
    }

    this_order = std::min(order, steps - i);       // lower order near the end
    this_order = std::min(this_order, lower_order_nums + 1);  // warm-up
    last_sample = x;

    const double s_next = sig[static_cast<std::size_t>(i) + 1];
    if (s_next == 0.0) {
      x = m_new;  // alpha = 1, sigma = 0: the order-1 update lands on x0
    } else {
      const VpPoint nxt = vp_point(s_next);
      std::vector<double> lam_prev;
      for (int k = 1; k < this_order; ++k) lam_prev.push_back(lambdas[lambdas.size() - 1 - static_cast<std::size_t>(k)]);
      UniCoeffs c = uni_coeffs(nxt.lambda, cur.lambda, lam_prev, this_order);
      Tensor xp = axpby(nxt.sigma / cur.sigma, x, -nxt.alpha * c.h_phi_1, m_new);
      if (this_order >= 2) {
        std::vector<double> rhos;
        if (this_order == 2) {
          rhos = {0.5};
        } else {
          std::vector<std::vector<double>> R(c.R.begin(), c.R.end() - 1);
          for (auto& row : R) row.pop_back();
          rhos = solve(R, std::vector<double>(c.b.begin(), c.b.end() - 1));
        }
        for (int k = 1; k < this_order; ++k) {
          const Tensor& mk = m[m.size() - 1 - static_cast<std::size_t>(k)];
          const double w = -nxt.alpha * c.B_h * rhos[static_cast<std::size_t>(k - 1)] / c.rks[static_cast<std::size_t>(k - 1)];
          xp = axpby(1.0, xp, w, axpby(1.0, mk, -1.0, m_new));
        }
      }
      x = xp;
    }
    if (lower_order_nums < order) ++lower_order_nums;
  }
  return x;
}

Tensor sample_ddim(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T, int steps) {
  return sample_ddim_on(model, schedule, x_T, log_sigmas(schedule, steps));
}

Tensor sample_ddim_on(const NoisePredictor& model, const NoiseSchedule& schedule, const Tensor& x_T,
                      const std::vector<double>& sig) {
  check_x_T(x_T);
  check_grid(sig);
  const int steps = static_cast<int>(sig.size()) - 1;
  NoGradGuard no_grad;
  Tensor x = x_T;
  for (int i = 0; i < steps; ++i) {
    const VpPoint cur = vp_point(sig[static_cast<std::size_t>(i)]);
    Tensor x0 = x0_from(model, schedule, x, sig[static_cast<std::size_t>(i)]);
    Tensor eps = axpby(1.0 / cur.sigma, x, -cur.alpha / cur.sigma, x0);
    const double s_next = sig[static_cast<std::size_t>(i) + 1];
    if (s_next == 0.0) {
      x = x0;
    } else {
      const VpPoint nxt = vp_point(s_next);
      x = axpby(nxt.alpha, x0, nxt.sigma, eps);
    }
  }
  return x;
}

Tensor sample(const NoisePredictor& model, const NoiseSchedule& schedule, const Shape& sample_shape, int n,
              const SamplerConfig& cfg) {
  cfg.validate(schedule.steps());
  switch (cfg.kind) {
    case SamplerKind::Ancestral:
      return sample_ancestral(model, schedule, sample_shape, n, cfg.seed, cfg.reverse_noise);
    case SamplerKind::Euler:
      return sample_euler(model, schedule, initial_noise(sample_shape, n, cfg.seed), cfg.steps);
    case SamplerKind::UniPC:
      return sample_unipc(model, schedule, initial_noise(sample_shape, n, cfg.seed), cfg.steps, cfg.unipc_order);
  }
  throw std::logic_error("unreachable sampler kind");
}

UNet with_lora(const UNet& base, const LoraSet& set, float weight) {
  LoraSet weighted = set.with_weight(weight);
  if (weight == 1.0f) return merged_model(base, weighted);
  UNet out = base.clone();
  attach(out, weighted);
  return out;
}

std::string sample_filename(const std::string& plane, SamplerKind kind, std::uint64_t seed) {
  return plane + "_" + to_string(kind) + "_" + std::to_string(seed) + ".png";
}

}  // namespace fulora

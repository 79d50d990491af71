#include <cmath>

#include "doctest.h"
#include "fulora/ops.hpp"
#include "fulora/rng.hpp"
#include "fulora/schedule.hpp"
#include "support.hpp"

using namespace fulora;

TEST_CASE("schedule construction") {
  NoiseSchedule one(1, 1e-3, 1e-3);
  CHECK(one.beta(1) == doctest::Approx(1e-3));
  CHECK(one.alpha_bar(1) == doctest::Approx(1 - 1e-3));

  NoiseSchedule s(1000, 1e-4, 0.02);
  CHECK(s.beta(500) == doctest::Approx(0.0100404).epsilon(1e-6));
  CHECK(s.alpha_bar(0) == 1.0);
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(std::fabs(s.alpha_bar(t) - s.alpha_bar(t - 1) * (1 - s.beta(t))) < 1e-7);
  }
  CHECK_THROWS(NoiseSchedule(0, 1e-4, 0.02));
  CHECK_THROWS(NoiseSchedule(10, 0.0, 0.02));
  CHECK_THROWS(NoiseSchedule(10, 0.03, 0.02));
  CHECK_THROWS(NoiseSchedule(10, 1e-4, 1.0));
}

TEST_CASE("q_sample limits and recombination") {
  NoiseSchedule s(200, 5e-4, 0.1);
  Rng rng(3);
  std::vector<float> xv(32), ev(32);
  for (auto& v : xv) v = static_cast<float>(rng.normal());
  for (auto& v : ev) v = static_cast<float>(rng.normal());
  Tensor x0 = Tensor::from({2, 16}, xv);
  Tensor eps = Tensor::from({2, 16}, ev);
  for (int t : {1, 50, 199, 200}) {
    Tensor xt = q_sample(x0, t, eps, s);
    const double a = s.alpha_bar(t);
    for (int i = 0; i < 32; ++i) {
      double rec = (xt.at(i) - std::sqrt(a) * xv[i]) / std::sqrt(1 - a);
      CHECK(std::fabs(rec - ev[i]) < 1e-6 * std::max(1.0, 1.0 / std::sqrt(1 - a)));
    }
  }
  Tensor zero = Tensor::zeros({2, 16});
  Tensor xt = q_sample(zero, 10, eps, s);
  for (int i = 0; i < 32; ++i) CHECK(xt.at(i) == doctest::Approx(std::sqrt(1 - s.alpha_bar(10)) * ev[i]));
  CHECK_THROWS(q_sample(x0, 0, eps, s));
  CHECK_THROWS(q_sample(x0, 201, eps, s));
  std::vector<int> ts = {1, 200};
  Tensor mixed = q_sample(x0, ts, eps, s);
  CHECK(mixed.at(0) == doctest::Approx(q_sample(x0, 1, eps, s).at(0)));
  CHECK(mixed.at(16) == doctest::Approx(q_sample(x0, 200, eps, s).at(16)));
}

TEST_CASE("reverse mean examples") {
  CHECK(predict_mu_scalar(1.0, 0.19, 0.5, 0.2) == doctest::Approx(1.05140).epsilon(1e-5));
  CHECK(predict_mu_scalar(0.7, 0.0, 0.5, 0.3) == doctest::Approx(0.7));
  CHECK(predict_mu_scalar(0.7, 0.19, 0.5, 0.0) == doctest::Approx(0.7 / 0.9));
  CHECK_THROWS(predict_mu_scalar(1.0, 0.1, 1.0, 0.2));
}

TEST_CASE("predicted mean approaches x0 as alpha_bar grows") {
  NoiseSchedule s(1000, 1e-4, 0.02);
  Tensor x0 = Tensor::from({4}, {0.5f, -0.3f, 0.9f, 0.0f});
  Tensor eps = Tensor::from({4}, {1.0f, -0.4f, 0.2f, 0.8f});
  double prev = 1e9;
  for (int t = 1000; t >= 1; t -= 37) {
    Tensor mu = predict_mu(q_sample(x0, t, eps, s), t, eps, s);
    double d = 0;
    for (int i = 0; i < 4; ++i) d += std::pow(mu.at(i) - x0.at(i), 2);
    CHECK(std::sqrt(d) < prev);
    prev = std::sqrt(d);
  }
}

TEST_CASE("diffusion loss examples") {
  Tensor e = Tensor::from({2}, {1, -1});
  CHECK(diffusion_loss(e, e).item() == 0.0f);
  CHECK(diffusion_loss(Tensor::full({3, 5}, 1.0f), Tensor::zeros({3, 5})).item() == doctest::Approx(1.0));
  CHECK(diffusion_loss(e, Tensor::zeros({2})).item() == doctest::Approx(1.0));
  CHECK_THROWS(diffusion_loss(e, Tensor::zeros({3})));
}

TEST_CASE("ancestral step noise and terminal convention") {
  NoiseSchedule s(100, 1e-3, 0.05);
  Tensor xt = Tensor::from({3}, {0.2f, -1.0f, 0.4f});
  Tensor eh = Tensor::from({3}, {0.1f, 0.0f, -0.3f});
  Tensor z = Tensor::from({3}, {1.0f, 2.0f, -1.0f});
  CHECK(ancestral_step(xt, 1, eh, z, s).to_vector() == predict_mu(xt, 1, eh, s).to_vector());
  CHECK(ancestral_step(xt, 40, eh, Tensor::zeros({3}), s).to_vector() == predict_mu(xt, 40, eh, s).to_vector());
  CHECK_THROWS(ancestral_step(xt, 0, eh, z, s));
  CHECK_THROWS(ancestral_step(xt, 101, eh, z, s));

  const int t = 60;
  const int n = 100000;
  Rng rng(11);
  std::vector<float> zv(n);
  for (auto& v : zv) v = static_cast<float>(rng.normal());
  Tensor big = Tensor::zeros({n});
  Tensor out = ancestral_step(big, t, big, Tensor::from({n}, zv), s);
  Tensor mu = predict_mu(big, t, big, s);
  double m = 0, v = 0;
  for (int i = 0; i < n; ++i) m += out.at(i) - mu.at(i);
  m /= n;
  for (int i = 0; i < n; ++i) v += std::pow(out.at(i) - mu.at(i) - m, 2);
  v /= (n - 1);
  CHECK(std::fabs(v / s.beta(t) - 1.0) < 0.05);
}

TEST_CASE("single-step kernels compose to the closed-form marginal") {
  NoiseSchedule s(200, 5e-4, 0.1);
  const double x0 = 3.0;
  const int n = 10000;
  Rng rng(21);
  for (int k : {1, 5, 40, 120}) {
    std::vector<double> x(n, x0);
    for (int t = 1; t <= k; ++t) {
      auto z = testing::stratified_normals(n, rng);
      for (int i = 0; i < n; ++i) x[i] = std::sqrt(1 - s.beta(t)) * x[i] + std::sqrt(s.beta(t)) * z[i];
    }
    double mean = 0, m2 = 0;
    for (double v : x) {
      mean += v;
      m2 += v * v;
    }
    mean /= n;
    const double var = m2 / n - mean * mean;
    const double a = s.alpha_bar(k);
    CHECK(std::fabs(mean - std::sqrt(a) * x0) / (std::sqrt(a) * x0) < 0.02);
    CHECK(std::fabs(var - (1 - a)) / (1 - a) < 0.02);
  }
}

#pragma once

#include <unistd.h>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "fulora/rng.hpp"
#include "fulora/tensor.hpp"

namespace fulora::testing {

/// Inverse standard normal CDF (Acklam's rational approximation, refined by
/// one Halley step; accurate to ~1e-15).
/// Standard normal tensor.
inline Tensor randn_tensor(Shape s, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(numel_of(s)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from(std::move(s), std::move(v));
}

inline double inverse_normal_cdf(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double lo = 0.02425;
  double x;
  if (p < lo) {
    double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - lo) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

/// n unit-normal draws stratified over n equal-probability bins, in random
/// order (one Latin-hypercube column).
inline std::vector<double> stratified_normals(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i)
    z[i] = inverse_normal_cdf((static_cast<double>(perm[i]) + rng.uniform()) / static_cast<double>(n));
  return z;
}

}  // namespace fulora::testing

namespace fulora::testing {

/// Minimum-cost perfect matching on a dense n x n cost matrix (shortest
/// augmenting path, O(n^3)). Returns the assignment row -> column.
inline std::vector<int> min_cost_assignment(const std::vector<double>& cost, int n) {
  const double inf = 1e300;
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      const double* row = &cost[static_cast<std::size_t>(i0 - 1) * n];
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> match(n);
  for (int j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

/// Exact 2-Wasserstein distance between two equal-size point sets (rows of
/// dimension d, flattened).
inline double wasserstein2(const std::vector<float>& a, const std::vector<float>& b, int d) {
  const int n = static_cast<int>(a.size()) / d;
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double diff = a[static_cast<std::size_t>(i * d + k)] - b[static_cast<std::size_t>(j * d + k)];
        s += diff * diff;
      }
      cost[static_cast<std::size_t>(i) * n + j] = s;
    }
  auto m = min_cost_assignment(cost, n);
  double total = 0;
  for (int i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i) * n + m[i]];
  return std::sqrt(total / n);
}

}  // namespace fulora::testing

namespace fulora::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() / ("fulora_" + tag + "_" + std::to_string(::getpid()) + "_" +
                                                      std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace fulora::testing

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fulora/tensor.hpp"

namespace fulora {

// Elementwise arithmetic with trailing-dimension broadcasting: shapes align
// from the right and size-1 dimensions stretch.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
Tensor square(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, float s) { return scale(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return scale(a, s); }

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one dimension (dimension removed unless keepdim).
Tensor mean_dim(const Tensor& x, std::int64_t dim, bool keepdim = false);

/// (..., M, K) x (..., K, N). Batch dims must match, or b may be 2-D.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (..., d_in) times weight (d_out, d_in) transposed, plus optional bias (d_out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

/// x (B, C, H, W), weight (O, C, kh, kw), optional bias (O).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor(),
              int stride = 1, int padding = 0);
Tensor avg_pool2d(const Tensor& x, int kernel);
Tensor upsample_nearest2d(const Tensor& x, int factor);
/// (B, C, H, W) -> (B, C)
Tensor global_avg_pool(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);  // over the last dimension

/// x (B, C, ...), gamma/beta (C).
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
/// Normalizes over the last dimension; gamma/beta (D).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Rows of table (V, D) selected by ids; result (ids.size(), D).
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);

Tensor reshape(const Tensor& x, Shape shape);
/// General axis permutation.
Tensor permute(const Tensor& x, std::span<const std::int64_t> order);
Tensor permute(const Tensor& x, std::initializer_list<std::int64_t> order);
/// Swap the last two dimensions.
Tensor transpose_last(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::int64_t dim);
Tensor concat(std::initializer_list<Tensor> parts, std::int64_t dim);

/// Mean over all elements of (a - b)^2.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);
/// Mean cross-entropy of logits (N, C) against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace fulora

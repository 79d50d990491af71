#include "fulora/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fulora/error.hpp"

namespace fulora {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b,
                             const std::string& detail = {}) {
  std::ostringstream s;
  s << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  if (!detail.empty()) s << " (" << detail << ")";
  throw ShapeError(s.str());
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor input");
}

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;
};

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  }
  return st;
}

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(nd, 1);
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t ia = static_cast<std::int64_t>(a.size()) - static_cast<std::int64_t>(nd) + static_cast<std::int64_t>(i);
    const std::int64_t ib = static_cast<std::int64_t>(b.size()) - static_cast<std::int64_t>(nd) + static_cast<std::int64_t>(i);
    const std::int64_t da = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    const std::int64_t db = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b, "cannot broadcast");
    bc.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) bc.stride_a[i] = sa[static_cast<std::size_t>(ia)];
    if (ib >= 0 && db != 1) bc.stride_b[i] = sb[static_cast<std::size_t>(ib)];
  }
  return bc;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t nd = bc.out.size();
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t inner = bc.out[nd - 1];
  const std::int64_t sa_in = bc.stride_a[nd - 1];
  const std::int64_t sb_in = bc.stride_b[nd - 1];
  const std::int64_t total = numel_of(bc.out);
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t k = 0; k < inner; ++k) f(o + k, ia + k * sa_in, ib + k * sb_in);
    for (std::int64_t d = static_cast<std::int64_t>(nd) - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ia += bc.stride_a[du];
      ib += bc.stride_b[du];
      if (idx[du] < bc.out[du]) break;
      ia -= bc.stride_a[du] * bc.out[du];
      ib -= bc.stride_b[du] * bc.out[du];
      idx[du] = 0;
    }
  }
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  require_defined(op, a);
  require_defined(op, b);
  const ImplPtr ai = a.impl(), bi = b.impl();
  const bool same = ai->shape == bi->shape;
  Broadcast bc;
  if (same) {
    bc.out = ai->shape;
  } else {
    bc = broadcast(op, ai->shape, bi->shape);
  }
  std::vector<float> out(static_cast<std::size_t>(numel_of(bc.out)));
  const float* pa = ai->data.data();
  const float* pb = bi->data.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t x, std::int64_t y) { out[static_cast<std::size_t>(o)] = fwd(pa[x], pb[y]); });
  }
  auto backward = [ai, bi, bc, same, da, db](const TensorImpl& res) {
    const float* g = res.grad.data();
    const float* pa = ai->data.data();
    const float* pb = bi->data.data();
    const float* po = res.data.data();
    float* ga = ai->requires_grad ? ai->ensure_grad().data() : nullptr;
    float* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
    if (same) {
      const std::size_t n = res.data.size();
      if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(pa[i], pb[i], po[i]);
      if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * db(pa[i], pb[i], po[i]);
    } else {
      for_each_broadcast(bc, [&](std::int64_t o, std::int64_t x, std::int64_t y) {
        if (ga) ga[x] += g[o] * da(pa[x], pb[y], po[o]);
        if (gb) gb[y] += g[o] * db(pa[x], pb[y], po[o]);
      });
    }
  };
  return detail::make_result(op, bc.out, std::move(out), {ai, bi}, std::move(backward));
}

template <class Fwd, class Deriv>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  require_defined(op, x);
  const ImplPtr xi = x.impl();
  std::vector<float> out(xi->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xi->data[i]);
  auto backward = [xi, deriv](const TensorImpl& res) {
    auto& gx = xi->ensure_grad();
    const std::size_t n = res.data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += res.grad[i] * deriv(xi->data[i], res.data[i]);
  };
  return detail::make_result(op, xi->shape, std::move(out), {xi}, std::move(backward));
}

void sgemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const float* a,
           std::int64_t lda, const float* b, std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float, float, float) { return 1.0f; }, [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / y; },
      [](float, float y, float) { return 1.0f / y; },
      [](float x, float y, float) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, float s) {
  return unary_op(
      "scale", x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& x, float s) {
  return unary_op(
      "add_scalar", x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      "silu", x, [](float v) { return v / (1.0f + std::exp(-v)); },
      [](float v, float) {
        const float s = 1.0f / (1.0f + std::exp(-v));
        return s * (1.0f + v * (1.0f - s));
      });
}

Tensor gelu(const Tensor& x) {
  constexpr float inv_sqrt2 = 0.70710678118654752f;
  constexpr float inv_sqrt_2pi = 0.39894228040143268f;
  return unary_op(
      "gelu", x, [](float v) { return 0.5f * v * (1.0f + std::erf(v * inv_sqrt2)); },
      [](float v, float) {
        return 0.5f * (1.0f + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5f * v * v);
      });
}

Tensor sum(const Tensor& x) {
  require_defined("sum", x);
  const ImplPtr xi = x.impl();
  double acc = 0.0;
  for (float v : xi->data) acc += v;
  auto backward = [xi](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    const float go = res.grad[0];
    for (auto& v : g) v += go;
  };
  return detail::make_result("sum", {}, {static_cast<float>(acc)}, {xi}, std::move(backward));
}

Tensor mean(const Tensor& x) {
  require_defined("mean", x);
  const ImplPtr xi = x.impl();
  double acc = 0.0;
  for (float v : xi->data) acc += v;
  const auto n = static_cast<double>(xi->data.size());
  auto backward = [xi, n](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    const float go = static_cast<float>(res.grad[0] / n);
    for (auto& v : g) v += go;
  };
  return detail::make_result("mean", {}, {static_cast<float>(acc / n)}, {xi}, std::move(backward));
}

Tensor mean_dim(const Tensor& x, std::int64_t dim, bool keepdim) {
  require_defined("mean_dim", x);
  const ImplPtr xi = x.impl();
  const auto nd = static_cast<std::int64_t>(xi->shape.size());
  if (dim < 0) dim += nd;
  if (dim < 0 || dim >= nd) throw ShapeError("mean_dim: dimension out of range for " + shape_str(xi->shape));
  const auto du = static_cast<std::size_t>(dim);
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < du; ++i) outer *= xi->shape[i];
  for (std::size_t i = du + 1; i < xi->shape.size(); ++i) inner *= xi->shape[i];
  const std::int64_t len = xi->shape[du];
  Shape out_shape = xi->shape;
  if (keepdim) {
    out_shape[du] = 1;
  } else {
    out_shape.erase(out_shape.begin() + dim);
  }
  std::vector<float> out(static_cast<std::size_t>(outer * inner), 0.0f);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::int64_t l = 0; l < len; ++l) acc += xi->data[static_cast<std::size_t>((o * len + l) * inner + i)];
      out[static_cast<std::size_t>(o * inner + i)] = static_cast<float>(acc / static_cast<double>(len));
    }
  }
  auto backward = [xi, outer, inner, len](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    const float inv = 1.0f / static_cast<float>(len);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t l = 0; l < len; ++l)
        for (std::int64_t i = 0; i < inner; ++i)
          g[static_cast<std::size_t>((o * len + l) * inner + i)] += res.grad[static_cast<std::size_t>(o * inner + i)] * inv;
  };
  return detail::make_result("mean_dim", std::move(out_shape), std::move(out), {xi}, std::move(backward));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  const ImplPtr ai = a.impl(), bi = b.impl();
  const Shape& sa = ai->shape;
  const Shape& sb = bi->shape;
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", sa, sb, "operands must be at least 2-D");
  const std::int64_t m = sa[sa.size() - 2], k = sa.back();
  const std::int64_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) shape_fail("matmul", sa, sb, "inner dimensions differ");
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const bool b_shared = sb.size() == 2;
  const bool a_shared = sa.size() == 2 && !b_shared;
  if (!b_shared && !a_shared && batch_a != batch_b) shape_fail("matmul", sa, sb, "batch dimensions differ");
  const Shape& batch = a_shared ? batch_b : batch_a;
  const std::int64_t nb = numel_of(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(static_cast<std::size_t>(nb * m * n));
  for (std::int64_t i = 0; i < nb; ++i) {
    const float* pa = ai->data.data() + (a_shared ? 0 : i * m * k);
    const float* pb = bi->data.data() + (b_shared ? 0 : i * k * n);
    sgemm(false, false, m, n, k, pa, k, pb, n, 0.0f, out.data() + i * m * n, n);
  }
  auto backward = [ai, bi, nb, m, n, k, a_shared, b_shared](const TensorImpl& res) {
    for (std::int64_t i = 0; i < nb; ++i) {
      const float* g = res.grad.data() + i * m * n;
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data() + (a_shared ? 0 : i * m * k);
        const float* pb = bi->data.data() + (b_shared ? 0 : i * k * n);
        sgemm(false, true, m, k, n, g, n, pb, n, 1.0f, ga, k);
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data() + (b_shared ? 0 : i * k * n);
        const float* pa = ai->data.data() + (a_shared ? 0 : i * m * k);
        sgemm(true, false, k, n, m, pa, k, g, n, 1.0f, gb, n);
      }
    }
  };
  return detail::make_result("matmul", std::move(out_shape), std::move(out), {ai, bi}, std::move(backward));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined("linear", x);
  require_defined("linear", weight);
  const ImplPtr xi = x.impl(), wi = weight.impl();
  const ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  if (wi->shape.size() != 2 || xi->shape.empty() || xi->shape.back() != wi->shape[1]) {
    shape_fail("linear", xi->shape, wi->shape, "expected x (..., d_in) and weight (d_out, d_in)");
  }
  const std::int64_t din = wi->shape[1], dout = wi->shape[0];
  if (bi && (bi->shape.size() != 1 || bi->shape[0] != dout)) shape_fail("linear", wi->shape, bi->shape, "bias must be (d_out)");
  const std::int64_t rows = numel_of(xi->shape) / din;
  Shape out_shape = xi->shape;
  out_shape.back() = dout;
  std::vector<float> out(static_cast<std::size_t>(rows * dout));
  if (bi) {
    for (std::int64_t r = 0; r < rows; ++r) std::copy(bi->data.begin(), bi->data.end(), out.begin() + r * dout);
  }
  sgemm(false, true, rows, dout, din, xi->data.data(), din, wi->data.data(), din, bi ? 1.0f : 0.0f, out.data(), dout);
  auto backward = [xi, wi, bi, rows, din, dout](const TensorImpl& res) {
    const float* g = res.grad.data();
    if (xi->requires_grad) sgemm(false, false, rows, din, dout, g, dout, wi->data.data(), din, 1.0f, xi->ensure_grad().data(), din);
    if (wi->requires_grad) sgemm(true, false, dout, din, rows, g, dout, xi->data.data(), din, 1.0f, wi->ensure_grad().data(), din);
    if (bi && bi->requires_grad) {
      auto& gb = bi->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < dout; ++j) gb[static_cast<std::size_t>(j)] += g[r * dout + j];
    }
  };
  std::vector<ImplPtr> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return detail::make_result("linear", std::move(out_shape), std::move(out), std::move(inputs), std::move(backward));
}

namespace {

struct ConvGeom {
  std::int64_t batch, channels, height, width, out_channels, kh, kw, stride, pad, oh, ow;
  std::int64_t col_rows() const { return channels * kh * kw; }
  std::int64_t col_cols() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Valid output columns [lo, hi) for kernel offset k along an axis.
void valid_range(std::int64_t out, std::int64_t in, std::int64_t stride, std::int64_t off, std::int64_t& lo, std::int64_t& hi) {
  lo = 0;
  while (lo < out && lo * stride + off < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride + off >= in) --hi;
}

// Column matrix rows are (c, ki, kj), `ld` apart.
void im2col(const ConvGeom& g, const float* x, float* cols, std::int64_t ld) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        float* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        std::int64_t lo, hi;
        valid_range(g.ow, g.width, g.stride, kj - g.pad, lo, hi);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          float* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.ow, 0.0f);
            continue;
          }
          const float* src = x + (c * g.height + iy) * g.width + kj - g.pad;
          std::fill(dst, dst + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.ow, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& g, const float* cols, std::int64_t ld, float* dx) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const float* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        std::int64_t lo, hi;
        valid_range(g.ow, g.width, g.stride, kj - g.pad, lo, hi);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          float* dst = dx + (c * g.height + iy) * g.width + kj - g.pad;
          const float* src = row + oy * g.ow;
          for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_defined("conv2d", x);
  require_defined("conv2d", weight);
  const ImplPtr xi = x.impl(), wi = weight.impl();
  const ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  const Shape& sx = xi->shape;
  const Shape& sw = wi->shape;
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
    shape_fail("conv2d", sx, sw, "expected x (B, C, H, W) and weight (O, C, kh, kw)");
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeom g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding, 0, 0};
  if (g.kh > g.height + 2 * g.pad || g.kw > g.width + 2 * g.pad) shape_fail("conv2d", sx, sw, "kernel larger than padded input");
  g.oh = (g.height + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.width + 2 * g.pad - g.kw) / g.stride + 1;
  if (bi && (bi->shape.size() != 1 || bi->shape[0] != g.out_channels)) shape_fail("conv2d", sw, bi->shape, "bias must be (O)");

  const std::int64_t rows = g.col_rows(), ncol = g.col_cols();
  const std::int64_t in_sz = g.channels * g.height * g.width;
  const std::int64_t out_sz = g.out_channels * ncol;
  auto cols = std::make_shared<std::vector<float>>();
  if (!g.pointwise()) {
    cols->resize(static_cast<std::size_t>(g.batch * rows * ncol));
    for (std::int64_t b = 0; b < g.batch; ++b) im2col(g, xi->data.data() + b * in_sz, cols->data() + b * rows * ncol, ncol);
  }
  std::vector<float> out(static_cast<std::size_t>(g.batch * out_sz));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    float* ob = out.data() + b * out_sz;
    if (bi) {
      for (std::int64_t o = 0; o < g.out_channels; ++o) std::fill(ob + o * ncol, ob + (o + 1) * ncol, bi->data[static_cast<std::size_t>(o)]);
    }
    const float* cb = g.pointwise() ? xi->data.data() + b * in_sz : cols->data() + b * rows * ncol;
    sgemm(false, false, g.out_channels, ncol, rows, wi->data.data(), rows, cb, ncol, bi ? 1.0f : 0.0f, ob, ncol);
  }
  auto backward = [xi, wi, bi, g, cols, rows, ncol, in_sz, out_sz](const TensorImpl& res) {
    std::vector<float> dcols;
    if (xi->requires_grad && !g.pointwise()) dcols.resize(static_cast<std::size_t>(rows * ncol));
    for (std::int64_t b = 0; b < g.batch; ++b) {
      const float* gb = res.grad.data() + b * out_sz;
      const float* cb = g.pointwise() ? xi->data.data() + b * in_sz : cols->data() + b * rows * ncol;
      if (wi->requires_grad) sgemm(false, true, g.out_channels, rows, ncol, gb, ncol, cb, ncol, 1.0f, wi->ensure_grad().data(), rows);
      if (bi && bi->requires_grad) {
        auto& gbias = bi->ensure_grad();
        for (std::int64_t o = 0; o < g.out_channels; ++o) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < ncol; ++j) acc += gb[o * ncol + j];
          gbias[static_cast<std::size_t>(o)] += static_cast<float>(acc);
        }
      }
      if (xi->requires_grad) {
        float* gx = xi->ensure_grad().data() + b * in_sz;
        if (g.pointwise()) {
          sgemm(true, false, rows, ncol, g.out_channels, wi->data.data(), rows, gb, ncol, 1.0f, gx, ncol);
        } else {
          sgemm(true, false, rows, ncol, g.out_channels, wi->data.data(), rows, gb, ncol, 0.0f, dcols.data(), ncol);
          col2im_add(g, dcols.data(), ncol, gx);
        }
      }
    }
  };
  std::vector<ImplPtr> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return detail::make_result("conv2d", {g.batch, g.out_channels, g.oh, g.ow}, std::move(out), std::move(inputs), std::move(backward));
}

Tensor avg_pool2d(const Tensor& x, int kernel) {
  require_defined("avg_pool2d", x);
  const ImplPtr xi = x.impl();
  const Shape& s = xi->shape;
  if (s.size() != 4) throw ShapeError("avg_pool2d: expected (B, C, H, W), got " + shape_str(s));
  if (kernel < 1 || s[2] % kernel != 0 || s[3] % kernel != 0) {
    throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " does not divide " + shape_str(s));
  }
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / kernel, ow = w / kernel;
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  std::vector<float> out(static_cast<std::size_t>(planes * oh * ow), 0.0f);
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx)
        out[static_cast<std::size_t>((p * oh + y / kernel) * ow + xx / kernel)] += xi->data[static_cast<std::size_t>((p * h + y) * w + xx)] * inv;
  auto backward = [xi, planes, h, w, oh, ow, kernel, inv](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx)
          g[static_cast<std::size_t>((p * h + y) * w + xx)] += res.grad[static_cast<std::size_t>((p * oh + y / kernel) * ow + xx / kernel)] * inv;
  };
  return detail::make_result("avg_pool2d", {s[0], s[1], oh, ow}, std::move(out), {xi}, std::move(backward));
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
  require_defined("upsample_nearest2d", x);
  const ImplPtr xi = x.impl();
  const Shape& s = xi->shape;
  if (s.size() != 4) throw ShapeError("upsample_nearest2d: expected (B, C, H, W), got " + shape_str(s));
  if (factor < 1) throw std::invalid_argument("upsample_nearest2d: factor must be >= 1");
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h * factor, ow = w * factor;
  std::vector<float> out(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        out[static_cast<std::size_t>((p * oh + y) * ow + xx)] = xi->data[static_cast<std::size_t>((p * h + y / factor) * w + xx / factor)];
  auto backward = [xi, planes, h, w, oh, ow, factor](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx)
          g[static_cast<std::size_t>((p * h + y / factor) * w + xx / factor)] += res.grad[static_cast<std::size_t>((p * oh + y) * ow + xx)];
  };
  return detail::make_result("upsample_nearest2d", {s[0], s[1], oh, ow}, std::move(out), {xi}, std::move(backward));
}

Tensor global_avg_pool(const Tensor& x) {
  require_defined("global_avg_pool", x);
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool: expected (B, C, H, W), got " + shape_str(s));
  return mean_dim(reshape(x, {s[0], s[1], s[2] * s[3]}), 2);
}

Tensor softmax(const Tensor& x) {
  require_defined("softmax", x);
  const ImplPtr xi = x.impl();
  if (xi->shape.empty()) throw ShapeError("softmax: scalar input");
  const std::int64_t d = xi->shape.back();
  const std::int64_t rows = numel_of(xi->shape) / d;
  std::vector<float> out(xi->data.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* in = xi->data.data() + r * d;
    float* o = out.data() + r * d;
    const float mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (std::int64_t j = 0; j < d; ++j) o[j] *= inv;
  }
  auto backward = [xi, rows, d](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* y = res.data.data() + r * d;
      const float* gy = res.grad.data() + r * d;
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
      for (std::int64_t j = 0; j < d; ++j) g[static_cast<std::size_t>(r * d + j)] += y[j] * (gy[j] - static_cast<float>(dot));
    }
  };
  return detail::make_result("softmax", xi->shape, std::move(out), {xi}, std::move(backward));
}

namespace {

// Shared normalization kernel: `groups` independent slices of `count`
// elements. Element i of slice g uses affine parameter poff(g) + i / run.
template <class ParamOffset>
Tensor normalize_impl(const char* op, const ImplPtr& xi, const ImplPtr& gi, const ImplPtr& bi,
                      std::int64_t groups, std::int64_t count, std::int64_t run, float eps, ParamOffset poff) {
  auto xhat = std::make_shared<std::vector<float>>(xi->data.size());
  auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(groups));
  std::vector<float> out(xi->data.size());
  const std::int64_t runs = count / run;
  for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
    const float* in = xi->data.data() + gidx * count;
    double m = 0.0;
    for (std::int64_t i = 0; i < count; ++i) m += in[i];
    m /= static_cast<double>(count);
    double v = 0.0;
    for (std::int64_t i = 0; i < count; ++i) v += (in[i] - m) * (in[i] - m);
    v /= static_cast<double>(count);
    const float rs = static_cast<float>(1.0 / std::sqrt(v + eps));
    (*rstd)[static_cast<std::size_t>(gidx)] = rs;
    const float mf = static_cast<float>(m);
    float* xh = xhat->data() + gidx * count;
    float* o = out.data() + gidx * count;
    const std::size_t p0 = poff(gidx);
    for (std::int64_t r = 0; r < runs; ++r) {
      const float ga = gi->data[p0 + static_cast<std::size_t>(r)], be = bi->data[p0 + static_cast<std::size_t>(r)];
      for (std::int64_t i = r * run; i < (r + 1) * run; ++i) {
        xh[i] = (in[i] - mf) * rs;
        o[i] = xh[i] * ga + be;
      }
    }
  }
  auto backward = [xi, gi, bi, xhat, rstd, groups, count, run, runs, poff](const TensorImpl& res) {
    float* gg = gi->requires_grad ? gi->ensure_grad().data() : nullptr;
    float* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
    float* gx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
    for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
      const float* gy = res.grad.data() + gidx * count;
      const float* xh = xhat->data() + gidx * count;
      const std::size_t p0 = poff(gidx);
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::int64_t r = 0; r < runs; ++r) {
        const std::size_t p = p0 + static_cast<std::size_t>(r);
        double sg = 0.0, sgx = 0.0;
        for (std::int64_t i = r * run; i < (r + 1) * run; ++i) {
          sg += gy[i];
          sgx += static_cast<double>(gy[i]) * xh[i];
        }
        if (gg) gg[p] += static_cast<float>(sgx);
        if (gb) gb[p] += static_cast<float>(sg);
        sum_d += sg * gi->data[p];
        sum_dx += sgx * gi->data[p];
      }
      if (!gx) continue;
      const double rs = (*rstd)[static_cast<std::size_t>(gidx)];
      const double n = static_cast<double>(count);
      const float a = static_cast<float>(rs / n * sum_d), c = static_cast<float>(rs / n * sum_dx);
      float* dx = gx + gidx * count;
      for (std::int64_t r = 0; r < runs; ++r) {
        const float k = static_cast<float>(rs) * gi->data[p0 + static_cast<std::size_t>(r)];
        for (std::int64_t i = r * run; i < (r + 1) * run; ++i) dx[i] += k * gy[i] - a - xh[i] * c;
      }
    }
  };
  return detail::make_result(op, xi->shape, std::move(out), {xi, gi, bi}, std::move(backward));
}

}  // namespace

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
  require_defined("group_norm", x);
  const ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  const Shape& s = xi->shape;
  if (s.size() < 2) throw ShapeError("group_norm: expected (B, C, ...), got " + shape_str(s));
  const std::int64_t c = s[1];
  if (groups < 1 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
  }
  if (gi->shape != Shape{c} || bi->shape != Shape{c}) shape_fail("group_norm", s, gi->shape, "gamma/beta must be (C)");
  const std::int64_t spatial = numel_of(s) / (s[0] * c);
  const std::int64_t per_group = (c / groups) * spatial;
  const std::int64_t n_groups = s[0] * groups;
  const std::int64_t cpg = c / groups;
  auto poff = [groups, cpg](std::int64_t gidx) { return static_cast<std::size_t>((gidx % groups) * cpg); };
  return normalize_impl("group_norm", xi, gi, bi, n_groups, per_group, spatial, eps, poff);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_defined("layer_norm", x);
  const ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  const Shape& s = xi->shape;
  if (s.empty()) throw ShapeError("layer_norm: scalar input");
  const std::int64_t d = s.back();
  if (gi->shape != Shape{d} || bi->shape != Shape{d}) shape_fail("layer_norm", s, gi->shape, "gamma/beta must be (D)");
  auto poff = [](std::int64_t) { return std::size_t{0}; };
  return normalize_impl("layer_norm", xi, gi, bi, numel_of(s) / d, d, 1, eps, poff);
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_defined("embedding", table);
  const ImplPtr ti = table.impl();
  if (ti->shape.size() != 2) throw ShapeError("embedding: table must be (V, D), got " + shape_str(ti->shape));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::int64_t v = ti->shape[0], d = ti->shape[1];
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  std::vector<float> out(static_cast<std::size_t>(static_cast<std::int64_t>(idv.size()) * d));
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || idv[r] >= v) throw std::out_of_range("embedding: id " + std::to_string(idv[r]) + " outside vocabulary of " + std::to_string(v));
    std::copy_n(ti->data.begin() + idv[r] * d, d, out.begin() + static_cast<std::int64_t>(r) * d);
  }
  auto backward = [ti, idv, d](const TensorImpl& res) {
    auto& g = ti->ensure_grad();
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::int64_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[r] * d + j)] += res.grad[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
  };
  return detail::make_result("embedding", {static_cast<std::int64_t>(idv.size()), d}, std::move(out), {ti}, std::move(backward));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  const ImplPtr xi = x.impl();
  std::int64_t infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<std::int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  const std::int64_t total = numel_of(xi->shape);
  if (infer >= 0 && known > 0 && total % known == 0) shape[static_cast<std::size_t>(infer)] = total / known;
  if (numel_of(shape) != total) shape_fail("reshape", xi->shape, shape, "element counts differ");
  auto backward = [xi](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += res.grad[i];
  };
  return detail::make_result("reshape", std::move(shape), xi->data, {xi}, std::move(backward));
}

Tensor permute(const Tensor& x, std::span<const std::int64_t> order) {
  require_defined("permute", x);
  const ImplPtr xi = x.impl();
  const Shape& s = xi->shape;
  const std::size_t nd = s.size();
  if (order.size() != nd) throw ShapeError("permute: order length differs from rank of " + shape_str(s));
  std::vector<bool> used(nd, false);
  Shape out_shape(nd);
  const auto in_strides = contiguous_strides(s);
  Broadcast bc;  // reuse the strided iterator: stride_a walks the input
  bc.stride_a.resize(nd);
  bc.stride_b.assign(nd, 0);
  for (std::size_t i = 0; i < nd; ++i) {
    const auto o = order[i];
    if (o < 0 || o >= static_cast<std::int64_t>(nd) || used[static_cast<std::size_t>(o)]) throw ShapeError("permute: invalid axis order");
    used[static_cast<std::size_t>(o)] = true;
    out_shape[i] = s[static_cast<std::size_t>(o)];
    bc.stride_a[i] = in_strides[static_cast<std::size_t>(o)];
  }
  bc.out = out_shape;
  std::vector<float> out(xi->data.size());
  for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t) { out[static_cast<std::size_t>(o)] = xi->data[static_cast<std::size_t>(i)]; });
  auto backward = [xi, bc](const TensorImpl& res) {
    auto& g = xi->ensure_grad();
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t) { g[static_cast<std::size_t>(i)] += res.grad[static_cast<std::size_t>(o)]; });
  };
  return detail::make_result("permute", std::move(out_shape), std::move(out), {xi}, std::move(backward));
}

Tensor permute(const Tensor& x, std::initializer_list<std::int64_t> order) {
  return permute(x, std::span<const std::int64_t>(order.begin(), order.size()));
}

Tensor transpose_last(const Tensor& x) {
  const auto nd = static_cast<std::int64_t>(x.shape().size());
  if (nd < 2) throw ShapeError("transpose_last: rank < 2");
  std::vector<std::int64_t> order(static_cast<std::size_t>(nd));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(nd - 1)], order[static_cast<std::size_t>(nd - 2)]);
  return permute(x, order);
}

Tensor concat(std::span<const Tensor> parts, std::int64_t dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& s0 = parts[0].shape();
  const auto nd = static_cast<std::int64_t>(s0.size());
  if (dim < 0) dim += nd;
  if (dim < 0 || dim >= nd) throw ShapeError("concat: dimension out of range for " + shape_str(s0));
  const auto du = static_cast<std::size_t>(dim);
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < du; ++i) outer *= s0[i];
  for (std::size_t i = du + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<ImplPtr> inputs;
  std::vector<std::int64_t> lens;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == du) || s[i] == s0[i];
    if (!ok) shape_fail("concat", s0, s, "non-concat dimensions must match");
    inputs.push_back(p.impl());
    lens.push_back(s[du]);
    total += s[du];
  }
  Shape out_shape = s0;
  out_shape[du] = total;
  std::vector<float> out(static_cast<std::size_t>(outer * total * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const std::int64_t block = lens[k] * inner;
      std::copy_n(inputs[k]->data.begin() + o * block, block, out.begin() + (o * total + off) * inner);
      off += lens[k];
    }
  }
  auto backward = [inputs, lens, outer, inner, total](const TensorImpl& res) {
    for (std::int64_t o = 0; o < outer; ++o) {
      std::int64_t off = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::int64_t block = lens[k] * inner;
        if (inputs[k]->requires_grad) {
          auto& g = inputs[k]->ensure_grad();
          const float* src = res.grad.data() + (o * total + off) * inner;
          for (std::int64_t i = 0; i < block; ++i) g[static_cast<std::size_t>(o * block + i)] += src[i];
        }
        off += lens[k];
      }
    }
  };
  return detail::make_result("concat", std::move(out_shape), std::move(out), std::move(inputs), std::move(backward));
}

Tensor concat(std::initializer_list<Tensor> parts, std::int64_t dim) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), dim);
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require_defined("mse_loss", prediction);
  require_defined("mse_loss", target);
  const ImplPtr pi = prediction.impl(), ti = target.impl();
  if (pi->shape != ti->shape) shape_fail("mse_loss", pi->shape, ti->shape);
  double acc = 0.0;
  for (std::size_t i = 0; i < pi->data.size(); ++i) {
    const double d = static_cast<double>(pi->data[i]) - ti->data[i];
    acc += d * d;
  }
  const double n = static_cast<double>(pi->data.size());
  auto backward = [pi, ti, n](const TensorImpl& res) {
    const float k = static_cast<float>(2.0 * res.grad[0] / n);
    float* gp = pi->requires_grad ? pi->ensure_grad().data() : nullptr;
    float* gt = ti->requires_grad ? ti->ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < pi->data.size(); ++i) {
      const float d = pi->data[i] - ti->data[i];
      if (gp) gp[i] += k * d;
      if (gt) gt[i] -= k * d;
    }
  };
  return detail::make_result("mse_loss", {}, {static_cast<float>(acc / n)}, {pi, ti}, std::move(backward));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined("cross_entropy", logits);
  const ImplPtr li = logits.impl();
  if (li->shape.size() != 2) throw ShapeError("cross_entropy: logits must be (N, C), got " + shape_str(li->shape));
  const std::int64_t n = li->shape[0], c = li->shape[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  std::vector<int> lab(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<float>>(li->data.size());
  double loss = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    if (lab[static_cast<std::size_t>(r)] < 0 || lab[static_cast<std::size_t>(r)] >= c) throw std::out_of_range("cross_entropy: label out of range");
    const float* row = li->data.data() + r * c;
    const float mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double logz = std::log(z) + mx;
    for (std::int64_t j = 0; j < c; ++j) (*probs)[static_cast<std::size_t>(r * c + j)] = static_cast<float>(std::exp(row[j] - logz));
    loss += logz - row[lab[static_cast<std::size_t>(r)]];
  }
  auto backward = [li, lab, probs, n, c](const TensorImpl& res) {
    auto& g = li->ensure_grad();
    const float k = res.grad[0] / static_cast<float>(n);
    for (std::int64_t r = 0; r < n; ++r)
      for (std::int64_t j = 0; j < c; ++j) {
        const std::size_t f = static_cast<std::size_t>(r * c + j);
        g[f] += k * ((*probs)[f] - (j == lab[static_cast<std::size_t>(r)] ? 1.0f : 0.0f));
      }
  };
  return detail::make_result("cross_entropy", {}, {static_cast<float>(loss / static_cast<double>(n))}, {li}, std::move(backward));
}

}  // namespace fulora

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "edlseg/tensor.hpp"

namespace testutil {

inline std::vector<double> vec(const edlseg::Tensor& t) {
  auto v = t.values();
  return {v.begin(), v.end()};
}

// Reference convolution: direct quadruple loop, no layout tricks. Slow on
// purpose; exists only to cross-check the production kernel.
inline std::vector<double> conv2d_naive(
    const std::vector<double>& in, std::size_t N, std::size_t C,
    std::size_t H, std::size_t W, const std::vector<double>& k, std::size_t O,
    std::size_t KH, std::size_t KW, std::size_t stride, std::size_t padding) {
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
  std::vector<double> out(N * O * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kh = 0; kh < KH; ++kh)
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const long iy = static_cast<long>(oh * stride + kh) -
                                static_cast<long>(padding);
                const long ix = static_cast<long>(ow * stride + kw) -
                                static_cast<long>(padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                    ix >= static_cast<long>(W))
                  continue;
                acc += in[((n * C + c) * H + iy) * W + ix] *
                       k[((o * C + c) * KH + kh) * KW + kw];
              }
          out[((n * O + o) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

// Reference upsampling: evaluates the half-pixel interpolation formula per
// output pixel with explicit edge clamping.
inline std::vector<double> bilinear_naive(const std::vector<double>& in,
                                          std::size_t N, std::size_t C,
                                          std::size_t H, std::size_t W,
                                          std::size_t OH, std::size_t OW) {
  std::vector<double> out(N * C * OH * OW);
  for (std::size_t i = 0; i < N * C; ++i) {
    const double* src = in.data() + i * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        // Source coordinate is clamped into the grid before splitting into
        // integer cell and fractional blend weight.
        double sy = (oy + 0.5) * static_cast<double>(H) / OH - 0.5;
        double sx = (ox + 0.5) * static_cast<double>(W) / OW - 0.5;
        sy = std::max(0.0, std::min(sy, static_cast<double>(H) - 1.0));
        sx = std::max(0.0, std::min(sx, static_cast<double>(W) - 1.0));
        const long y0 = static_cast<long>(std::floor(sy));
        const long x0 = static_cast<long>(std::floor(sx));
        const long y1 = std::min<long>(y0 + 1, static_cast<long>(H) - 1);
        const long x1 = std::min<long>(x0 + 1, static_cast<long>(W) - 1);
        const double ty = sy - static_cast<double>(y0);
        const double tx = sx - static_cast<double>(x0);
        const double a = src[y0 * W + x0], b = src[y0 * W + x1];
        const double c = src[y1 * W + x0], d = src[y1 * W + x1];
        out[i * OH * OW + oy * OW + ox] = (a * (1 - tx) + b * tx) * (1 - ty) +
                                          (c * (1 - tx) + d * tx) * ty;
      }
  }
  return out;
}

inline bool grad_close(double analytic, double numeric) {
  const double m = std::max(std::fabs(analytic), std::fabs(numeric));
  if (m < 1e-6) return true;
  return std::fabs(analytic - numeric) / m < 1e-4;
}

// Checks the reverse-mode gradient of `f` against central differences at
// every coordinate of every leaf in `leaves`. The callable must rebuild its
// expression from the leaves on each invocation.
inline bool check_gradients(
    const std::function<edlseg::Tensor()>& f,
    std::vector<edlseg::Tensor>& leaves, double h = 1e-5,
    double* worst = nullptr) {
  for (auto& leaf : leaves) leaf.zero_grad();
  edlseg::Tensor out = f();
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  bool ok = true;
  if (worst) *worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      const double fp = f().item();
      vals[i] = saved - h;
      const double fm = f().item();
      vals[i] = saved;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[li].empty() ? 0.0 : analytic[li][i];
      if (!grad_close(ana, num)) ok = false;
      if (worst) {
        const double m = std::max(std::fabs(ana), std::fabs(num));
        if (m >= 1e-6) *worst = std::max(*worst, std::fabs(ana - num) / m);
      }
    }
  }
  return ok;
}

}  // namespace testutil

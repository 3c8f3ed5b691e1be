#include <cmath>
#include <string>

#include "fens/errors.hpp"
#include "fens/kernels.hpp"

namespace fens::kernels {

std::int64_t window_output(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                           std::int64_t padding, bool ceil_mode) {
  if (stride < 1 || kernel < 1 || padding < 0) {
    throw GeometryError("invalid window: kernel " + std::to_string(kernel) + ", stride " +
                        std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) {
    throw GeometryError("window " + std::to_string(kernel) + " larger than padded input " +
                        std::to_string(in + 2 * padding));
  }
  std::int64_t out = span / stride + 1;
  if (ceil_mode && span % stride != 0) {
    // The last window must start inside the input (not in the right padding).
    if ((out) * stride < in + padding) ++out;
  }
  return out;
}

ConvGeometry make_conv_geometry(std::int64_t batch, std::int64_t in_channels, std::int64_t in_h,
                                std::int64_t in_w, std::int64_t out_channels,
                                std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                                std::int64_t groups) {
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw DimensionError("channels " + std::to_string(in_channels) + "->" +
                         std::to_string(out_channels) + " not divisible by groups " +
                         std::to_string(groups));
  }
  ConvGeometry g;
  g.batch = batch;
  g.in_channels = in_channels;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_channels = out_channels;
  g.kernel = kernel;
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  g.out_h = window_output(in_h, kernel, stride, padding);
  g.out_w = window_output(in_w, kernel, stride, padding);
  return g;
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  const auto cin_g = g.in_per_group();
  const auto cout_g = g.out_per_group();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          Real acc = bias.empty() ? Real(0) : bias[co];
          for (std::int64_t ci = 0; ci < cin_g; ++ci) {
            const std::int64_t c = grp * cin_g + ci;
            for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
              const std::int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const std::int64_t iw = ow * g.stride - g.padding + kw;
                if (iw < 0 || iw >= g.in_w) continue;
                acc += x[((n * g.in_channels + c) * g.in_h + ih) * g.in_w + iw] *
                       w[((co * cin_g + ci) * g.kernel + kh) * g.kernel + kw];
              }
            }
          }
          y[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] = acc;
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias) {
  const auto cin_g = g.in_per_group();
  const auto cout_g = g.out_per_group();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t co = 0; co < g.out_channels; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          const Real d = dy[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow];
          if (!dbias.empty()) dbias[co] += d;
          for (std::int64_t ci = 0; ci < cin_g; ++ci) {
            const std::int64_t c = grp * cin_g + ci;
            for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
              const std::int64_t ih = oh * g.stride - g.padding + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const std::int64_t iw = ow * g.stride - g.padding + kw;
                if (iw < 0 || iw >= g.in_w) continue;
                const auto xi = ((n * g.in_channels + c) * g.in_h + ih) * g.in_w + iw;
                const auto wi = ((co * cin_g + ci) * g.kernel + kh) * g.kernel + kw;
                if (!dx.empty()) dx[xi] += d * w[wi];
                if (!dw.empty()) dw[wi] += d * x[xi];
              }
            }
          }
        }
      }
    }
  }
}

void linear_forward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t o = 0; o < g.out_features; ++o) {
      Real acc = bias.empty() ? Real(0) : bias[o];
      for (std::int64_t f = 0; f < g.in_features; ++f) {
        acc += x[n * g.in_features + f] * w[o * g.in_features + f];
      }
      y[n * g.out_features + o] = acc;
    }
  }
}

void linear_backward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias) {
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t o = 0; o < g.out_features; ++o) {
      const Real d = dy[n * g.out_features + o];
      if (!dbias.empty()) dbias[o] += d;
      for (std::int64_t f = 0; f < g.in_features; ++f) {
        if (!dx.empty()) dx[n * g.in_features + f] += d * w[o * g.in_features + f];
        if (!dw.empty()) dw[o * g.in_features + f] += d * x[n * g.in_features + f];
      }
    }
  }
}

}  // namespace reference
}  // namespace fens::kernels

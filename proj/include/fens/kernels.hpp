#pragma once

#include <cstdint>
#include <span>

#include "fens/tensor.hpp"

// Compute kernels behind the autograd ops. Two implementations share one
// signature set:
//   fens::kernels::reference  direct serial loops, kept as the test oracle
//   fens::kernels::parallel   im2col + GEMM, OpenMP over the batch
// The ops layer always calls `parallel`; tests and bench_kernels compare both.
// Backward kernels accumulate into their outputs; an empty span skips that
// gradient.
namespace fens::kernels {

struct ConvGeometry {
  std::int64_t batch = 0;
  std::int64_t in_channels = 0;
  std::int64_t in_h = 0;
  std::int64_t in_w = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
  std::int64_t out_h = 0;
  std::int64_t out_w = 0;

  std::int64_t in_per_group() const { return in_channels / groups; }
  std::int64_t out_per_group() const { return out_channels / groups; }
  std::int64_t weight_size() const { return out_channels * in_per_group() * kernel * kernel; }
  std::int64_t input_size() const { return batch * in_channels * in_h * in_w; }
  std::int64_t output_size() const { return batch * out_channels * out_h * out_w; }
};

// Output extent of a sliding window, floor semantics. Throws GeometryError
// when the padded input is smaller than the window or stride < 1.
std::int64_t window_output(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                           std::int64_t padding, bool ceil_mode = false);

// Validates channel divisibility and fills out_h/out_w.
ConvGeometry make_conv_geometry(std::int64_t batch, std::int64_t in_channels, std::int64_t in_h,
                                std::int64_t in_w, std::int64_t out_channels,
                                std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                                std::int64_t groups);

struct LinearGeometry {
  std::int64_t batch = 0;
  std::int64_t in_features = 0;
  std::int64_t out_features = 0;
};

namespace reference {
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y);
void conv2d_backward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias);
void linear_forward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y);
void linear_backward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias);
}  // namespace reference

namespace parallel {
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y);
void conv2d_backward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias);
void linear_forward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y);
void linear_backward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias);
}  // namespace parallel

}  // namespace fens::kernels

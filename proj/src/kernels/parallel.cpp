#include <algorithm>
#include <vector>

#include <Eigen/Core>

#include "fens/kernels.hpp"

namespace fens::kernels::parallel {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// Unfolds the channels [c0, c0 + cin) of one image into a
// (cin*k*k) x (out_h*out_w) matrix.
void im2col(const ConvGeometry& g, const Real* img, std::int64_t c0, std::int64_t cin,
            Real* col) {
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < cin; ++c) {
    const Real* src = img + (c0 + c) * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
      for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
        Real* dst = col + ((c * g.kernel + kh) * g.kernel + kw) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          Real* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(row, row + g.out_w, Real(0));
            continue;
          }
          const Real* srow = src + ih * g.in_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            row[ow] = (iw < 0 || iw >= g.in_w) ? Real(0) : srow[iw];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const Real* col, std::int64_t c0, std::int64_t cin,
            Real* img) {
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < cin; ++c) {
    Real* dst = img + (c0 + c) * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
      for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
        const Real* src = col + ((c * g.kernel + kh) * g.kernel + kw) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          Real* drow = dst + ih * g.in_w;
          const Real* srow = src + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            if (iw >= 0 && iw < g.in_w) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

bool is_depthwise(const ConvGeometry& g) {
  return g.in_per_group() == 1 && g.out_per_group() == 1;
}

void depthwise_forward_image(const ConvGeometry& g, const Real* x, const Real* w,
                             std::span<const Real> bias, Real* y) {
  const auto k = g.kernel;
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    const Real* src = x + c * g.in_h * g.in_w;
    const Real* wk = w + c * k * k;
    Real* dst = y + c * g.out_h * g.out_w;
    const Real b = bias.empty() ? Real(0) : bias[c];
    for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
      for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
        Real acc = b;
        for (std::int64_t kh = 0; kh < k; ++kh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          for (std::int64_t kw = 0; kw < k; ++kw) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            if (iw < 0 || iw >= g.in_w) continue;
            acc += src[ih * g.in_w + iw] * wk[kh * k + kw];
          }
        }
        dst[oh * g.out_w + ow] = acc;
      }
    }
  }
}

void depthwise_backward_image(const ConvGeometry& g, const Real* x, const Real* w,
                              const Real* dy, Real* dx, Real* dw) {
  const auto k = g.kernel;
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    const Real* src = x + c * g.in_h * g.in_w;
    const Real* wk = w + c * k * k;
    const Real* d = dy + c * g.out_h * g.out_w;
    Real* dsrc = dx ? dx + c * g.in_h * g.in_w : nullptr;
    Real* dwk = dw ? dw + c * k * k : nullptr;
    for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
      for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
        const Real gy = d[oh * g.out_w + ow];
        for (std::int64_t kh = 0; kh < k; ++kh) {
          const std::int64_t ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          for (std::int64_t kw = 0; kw < k; ++kw) {
            const std::int64_t iw = ow * g.stride - g.padding + kw;
            if (iw < 0 || iw >= g.in_w) continue;
            if (dsrc) dsrc[ih * g.in_w + iw] += gy * wk[kh * k + kw];
            if (dwk) dwk[kh * k + kw] += gy * src[ih * g.in_w + iw];
          }
        }
      }
    }
  }
}

// Sums per-image partial buffers into `out` in image order, so the result
// does not depend on the thread count.
void reduce_partials(const std::vector<Real>& partials, std::int64_t images, std::span<Real> out) {
  const auto n = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    Real acc = out[i];
    for (std::int64_t b = 0; b < images; ++b) acc += partials[b * n + i];
    out[i] = acc;
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  const std::int64_t in_img = g.in_channels * g.in_h * g.in_w;
  const std::int64_t out_img = g.out_channels * g.out_h * g.out_w;
  const std::int64_t plane = g.out_h * g.out_w;
  const auto cin_g = g.in_per_group();
  const auto cout_g = g.out_per_group();
  const std::int64_t rows = cin_g * g.kernel * g.kernel;
  const bool pointwise = is_pointwise(g);
  const bool depthwise = is_depthwise(g);

#pragma omp parallel
  {
    std::vector<Real> col(pointwise || depthwise ? 0 : static_cast<std::size_t>(rows * plane));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const Real* xi = x.data() + n * in_img;
      Real* yi = y.data() + n * out_img;
      if (depthwise) {
        depthwise_forward_image(g, xi, w.data(), bias, yi);
        continue;
      }
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const Real* colp = xi + grp * cin_g * g.in_h * g.in_w;
        if (!pointwise) {
          im2col(g, xi, grp * cin_g, cin_g, col.data());
          colp = col.data();
        }
        CMapR wm(w.data() + grp * cout_g * rows, cout_g, rows);
        CMapR cm(colp, rows, plane);
        MapR ym(yi + grp * cout_g * plane, cout_g, plane);
        ym.noalias() = wm * cm;
        if (!bias.empty()) {
          for (std::int64_t o = 0; o < cout_g; ++o) ym.row(o).array() += bias[grp * cout_g + o];
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias) {
  const std::int64_t in_img = g.in_channels * g.in_h * g.in_w;
  const std::int64_t out_img = g.out_channels * g.out_h * g.out_w;
  const std::int64_t plane = g.out_h * g.out_w;
  const auto cin_g = g.in_per_group();
  const auto cout_g = g.out_per_group();
  const std::int64_t rows = cin_g * g.kernel * g.kernel;
  const bool pointwise = is_pointwise(g);
  const bool depthwise = is_depthwise(g);
  const std::int64_t wsize = g.weight_size();

  if (!dbias.empty()) {
    for (std::int64_t n = 0; n < g.batch; ++n) {
      for (std::int64_t o = 0; o < g.out_channels; ++o) {
        const Real* d = dy.data() + n * out_img + o * plane;
        Real acc = 0;
        for (std::int64_t p = 0; p < plane; ++p) acc += d[p];
        dbias[o] += acc;
      }
    }
  }

  std::vector<Real> dw_partial(dw.empty() ? 0 : static_cast<std::size_t>(g.batch * wsize), Real(0));

#pragma omp parallel
  {
    const bool need_col = !(pointwise || depthwise);
    std::vector<Real> col(need_col ? static_cast<std::size_t>(rows * plane) : 0);
    std::vector<Real> dcol(need_col && !dx.empty() ? static_cast<std::size_t>(rows * plane) : 0);
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const Real* xi = x.data() + n * in_img;
      const Real* dyi = dy.data() + n * out_img;
      Real* dxi = dx.empty() ? nullptr : dx.data() + n * in_img;
      Real* dwi = dw.empty() ? nullptr : dw_partial.data() + n * wsize;
      if (depthwise) {
        depthwise_backward_image(g, xi, w.data(), dyi, dxi, dwi);
        continue;
      }
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        CMapR dym(dyi + grp * cout_g * plane, cout_g, plane);
        CMapR wm(w.data() + grp * cout_g * rows, cout_g, rows);
        if (dwi) {
          const Real* colp = xi + grp * cin_g * g.in_h * g.in_w;
          if (need_col) {
            im2col(g, xi, grp * cin_g, cin_g, col.data());
            colp = col.data();
          }
          CMapR cm(colp, rows, plane);
          MapR dwm(dwi + grp * cout_g * rows, cout_g, rows);
          dwm.noalias() += dym * cm.transpose();
        }
        if (dxi) {
          if (pointwise) {
            MapR dxm(dxi + grp * cin_g * g.in_h * g.in_w, rows, plane);
            dxm.noalias() += wm.transpose() * dym;
          } else {
            MapR dcm(dcol.data(), rows, plane);
            dcm.noalias() = wm.transpose() * dym;
            col2im(g, dcol.data(), grp * cin_g, cin_g, dxi);
          }
        }
      }
    }
  }
  if (!dw.empty()) reduce_partials(dw_partial, g.batch, dw);
}

void linear_forward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  CMapR xm(x.data(), g.batch, g.in_features);
  CMapR wm(w.data(), g.out_features, g.in_features);
  MapR ym(y.data(), g.batch, g.out_features);
  ym.noalias() = xm * wm.transpose();
  if (!bias.empty()) {
    Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> b(bias.data(), g.out_features);
    ym.rowwise() += b;
  }
}

void linear_backward(const LinearGeometry& g, std::span<const Real> x, std::span<const Real> w,
                     std::span<const Real> dy, std::span<Real> dx, std::span<Real> dw,
                     std::span<Real> dbias) {
  CMapR dym(dy.data(), g.batch, g.out_features);
  if (!dx.empty()) {
    CMapR wm(w.data(), g.out_features, g.in_features);
    MapR dxm(dx.data(), g.batch, g.in_features);
    dxm.noalias() += dym * wm;
  }
  if (!dw.empty()) {
    CMapR xm(x.data(), g.batch, g.in_features);
    MapR dwm(dw.data(), g.out_features, g.in_features);
    dwm.noalias() += dym.transpose() * xm;
  }
  if (!dbias.empty()) {
    for (std::int64_t o = 0; o < g.out_features; ++o) {
      Real acc = 0;
      for (std::int64_t n = 0; n < g.batch; ++n) acc += dy[n * g.out_features + o];
      dbias[o] += acc;
    }
  }
}

}  // namespace fens::kernels::parallel

#pragma once

#include <string>
#include <vector>

#include "icegan/tensor.hpp"

namespace icegan {

/// Square-kernel 2-D convolution geometry.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// floor((in + 2p - k)/s) + 1; throws when the window does not fit.
  std::size_t out_extent(std::size_t in) const {
    if (stride == 0) throw ShapeError("conv stride must be positive");
    if (in + 2 * padding < kernel) {
      throw ShapeError("conv kernel " + std::to_string(kernel) + " does not fit extent " + std::to_string(in) +
                       " with padding " + std::to_string(padding));
    }
    return (in + 2 * padding - kernel) / stride + 1;
  }

  /// (in - 1)s - 2p + k, the transposed-convolution extent.
  std::size_t deconv_extent(std::size_t in) const {
    const long long e = static_cast<long long>(in - 1) * static_cast<long long>(stride) -
                        2 * static_cast<long long>(padding) + static_cast<long long>(kernel);
    if (e < 1) throw ShapeError("deconv output extent would be " + std::to_string(e));
    return static_cast<std::size_t>(e);
  }
};

namespace detail {

struct Im2ColGeometry {
  std::size_t channels, height, width;  // image
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;             // window grid

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

inline void im2col(const double* img, const Im2ColGeometry& g, double* col) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.padding);
          if (iy < 0 || iy >= static_cast<long long>(g.height)) {
            std::fill_n(dst + oy * g.out_w, g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.padding);
            dst[oy * g.out_w + ox] = (ix < 0 || ix >= static_cast<long long>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adds the columns back into the image (adjoint of im2col).
inline void col2im(const double* col, const Im2ColGeometry& g, double* img) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = col + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.padding);
          if (iy < 0 || iy >= static_cast<long long>(g.height)) continue;
          double* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.padding);
            if (ix >= 0 && ix < static_cast<long long>(g.width)) dst[ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline void check_conv_input(const char* what, const Tensor& x, const Tensor& w, const Tensor& bias,
                             const ConvSpec& spec, bool transposed) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + ": input must be [B, C, H, W], got " + shape_str(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape expected = transposed ? Shape{spec.in_channels, spec.out_channels, spec.kernel, spec.kernel}
                                    : Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
  if (w.shape() != expected) {
    throw ShapeError(std::string(what) + ": weight " + shape_str(w.shape()) + ", expected " + shape_str(expected));
  }
  if (bias.defined() && bias.numel() != spec.out_channels) {
    throw ShapeError(std::string(what) + ": bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(spec.out_channels) + " output channels");
  }
}

}  // namespace detail

/// x [B, Cin, H, W], w [Cout, Cin, k, k], optional bias [Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvSpec& spec) {
  detail::check_conv_input("conv2d", x, w, bias, spec, false);
  const std::size_t batch = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const detail::Im2ColGeometry geo{spec.in_channels, h, wd, spec.kernel, spec.stride, spec.padding,
                                   spec.out_extent(h), spec.out_extent(wd)};
  const std::size_t cout = spec.out_channels, krows = geo.rows(), ncols = geo.cols();
  const std::size_t in_plane = spec.in_channels * h * wd, out_plane = cout * ncols;
  Buffer out(batch * out_plane);
  Buffer col(krows * ncols);
  detail::ConstMatMap wm(w.data().data(), cout, krows);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col(x.data().data() + b * in_plane, geo, col.data());
    detail::MatMap y(out.data() + b * out_plane, cout, ncols);
    y.noalias() = wm * detail::ConstMatMap(col.data(), krows, ncols);
    if (bias.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op({batch, cout, geo.out_h, geo.out_w}, std::move(out), "conv2d", inputs, [=](detail::Node& self) {
    const bool gx = detail::wants_grad(self, 0);
    const bool gw = detail::wants_grad(self, 1);
    const bool gb = has_bias && detail::wants_grad(self, 2);
    const double* xv = self.inputs[0]->value.data();
    detail::ConstMatMap wm(self.inputs[1]->value.data(), cout, krows);
    double* gxp = gx ? detail::input_grad(self, 0).data() : nullptr;
    double* gwp = gw ? detail::input_grad(self, 1).data() : nullptr;
    double* gbp = gb ? detail::input_grad(self, 2).data() : nullptr;
    Buffer col(krows * ncols);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::ConstMatMap g(self.grad.data() + b * out_plane, cout, ncols);
      if (gw) {
        detail::im2col(xv + b * in_plane, geo, col.data());
        detail::MatMap(gwp, cout, krows).noalias() += g * detail::ConstMatMap(col.data(), krows, ncols).transpose();
      }
      if (gx) {
        detail::MatMap(col.data(), krows, ncols).noalias() = wm.transpose() * g;
        detail::col2im(col.data(), geo, gxp + b * in_plane);
      }
      if (gb) Eigen::Map<Eigen::VectorXd>(gbp, cout) += g.rowwise().sum();
    }
  });
}

/// Transposed convolution: x [B, Cin, H, W], w [Cin, Cout, k, k]. Forward is
/// the data-gradient of conv2d with the same kernel.
inline Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvSpec& spec) {
  detail::check_conv_input("deconv2d", x, w, bias, spec, true);
  const std::size_t batch = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const std::size_t oh = spec.deconv_extent(h), ow = spec.deconv_extent(wd);
  const detail::Im2ColGeometry geo{spec.out_channels, oh, ow, spec.kernel, spec.stride, spec.padding, h, wd};
  if (spec.out_extent(oh) != h || spec.out_extent(ow) != wd) throw ShapeError("deconv2d: inconsistent geometry");
  const std::size_t cin = spec.in_channels, cout = spec.out_channels, krows = geo.rows(), ncols = geo.cols();
  const std::size_t in_plane = cin * ncols, out_plane = cout * oh * ow;
  Buffer out(batch * out_plane, 0.0);
  Buffer col(krows * ncols);
  detail::ConstMatMap wm(w.data().data(), cin, krows);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::MatMap(col.data(), krows, ncols).noalias() =
        wm.transpose() * detail::ConstMatMap(x.data().data() + b * in_plane, cin, ncols);
    detail::col2im(col.data(), geo, out.data() + b * out_plane);
    if (bias.defined()) {
      detail::MatMap(out.data() + b * out_plane, cout, oh * ow).colwise() +=
          Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op({batch, cout, oh, ow}, std::move(out), "deconv2d", inputs, [=](detail::Node& self) {
    const bool gx = detail::wants_grad(self, 0);
    const bool gw = detail::wants_grad(self, 1);
    const bool gb = has_bias && detail::wants_grad(self, 2);
    const double* xv = self.inputs[0]->value.data();
    detail::ConstMatMap wm(self.inputs[1]->value.data(), cin, krows);
    double* gxp = gx ? detail::input_grad(self, 0).data() : nullptr;
    double* gwp = gw ? detail::input_grad(self, 1).data() : nullptr;
    double* gbp = gb ? detail::input_grad(self, 2).data() : nullptr;
    Buffer col(krows * ncols);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* g = self.grad.data() + b * out_plane;
      if (gx || gw) {
        detail::im2col(g, geo, col.data());
        detail::ConstMatMap gc(col.data(), krows, ncols);
        if (gx) detail::MatMap(gxp + b * in_plane, cin, ncols).noalias() += wm * gc;
        if (gw) detail::MatMap(gwp, cin, krows).noalias() += detail::ConstMatMap(xv + b * in_plane, cin, ncols) * gc.transpose();
      }
      if (gb) Eigen::Map<Eigen::VectorXd>(gbp, cout) += detail::ConstMatMap(g, cout, oh * ow).rowwise().sum();
    }
  });
}

/// Mean over the spatial axes: [B, C, H, W] -> [B, C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [B, C, H, W], got " + shape_str(x.shape()));
  return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

}  // namespace icegan

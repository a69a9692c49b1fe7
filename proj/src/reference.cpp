// Serial textbook loops. Kept deliberately naive: they are the oracles the
// parallel kernels are checked against.

#include <algorithm>
#include <cmath>

#include "fovea/kernels.hpp"

namespace fovea::reference {

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, ConvGeometry g) {
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = kernels.dim(0), KH = kernels.dim(2), KW = kernels.dim(3);
  if (kernels.dim(1) != C) throw ShapeError("reference::conv2d: channel mismatch");
  const int OH = conv_output_size(H, KH, g), OW = conv_output_size(W, KW, g);
  Tensor out({F, OH, OW});
  for (int f = 0; f < F; ++f)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        double acc = bias[f];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx) {
              const int iy = oy * g.stride + ky - g.pad;
              const int ix = ox * g.stride + kx - g.pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += static_cast<double>(input.at(c, iy, ix)) *
                     kernels[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx];
            }
        out.at(f, oy, ox) = static_cast<float>(acc);
      }
  return out;
}

Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernels, const Shape& input_shape,
                             ConvGeometry g) {
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const int F = kernels.dim(0), KH = kernels.dim(2), KW = kernels.dim(3);
  const int OH = upstream.dim(1), OW = upstream.dim(2);
  std::vector<double> acc(shape_size(input_shape), 0.0);
  for (int f = 0; f < F; ++f)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox)
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx) {
              const int iy = oy * g.stride + ky - g.pad;
              const int ix = ox * g.stride + kx - g.pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc[(static_cast<std::size_t>(c) * H + iy) * W + ix] +=
                  static_cast<double>(upstream.at(f, oy, ox)) *
                  kernels[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx];
            }
  return Tensor(input_shape, std::vector<float>(acc.begin(), acc.end()));
}

WeightGradients conv2d_backward_weights(const Tensor& input, const Tensor& upstream,
                                        const Shape& kernel_shape, ConvGeometry g) {
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = kernel_shape[0], KH = kernel_shape[2], KW = kernel_shape[3];
  const int OH = upstream.dim(1), OW = upstream.dim(2);
  WeightGradients out{Tensor(kernel_shape), Tensor({F})};
  for (int f = 0; f < F; ++f) {
    double b = 0.0;
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) b += upstream.at(f, oy, ox);
    out.bias[f] = static_cast<float>(b);
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < KH; ++ky)
        for (int kx = 0; kx < KW; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              const int iy = oy * g.stride + ky - g.pad;
              const int ix = ox * g.stride + kx - g.pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += static_cast<double>(upstream.at(f, oy, ox)) * input.at(c, iy, ix);
            }
          out.weights[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx] =
              static_cast<float>(acc);
        }
  }
  return out;
}

Tensor maxpool2(const Tensor& input) {
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H % 2 || W % 2) throw ShapeError("reference::maxpool2: odd spatial dims");
  Tensor out({C, H / 2, W / 2});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < H / 2; ++oy)
      for (int ox = 0; ox < W / 2; ++ox) {
        const float window[4] = {input.at(c, 2 * oy, 2 * ox), input.at(c, 2 * oy, 2 * ox + 1),
                                 input.at(c, 2 * oy + 1, 2 * ox), input.at(c, 2 * oy + 1, 2 * ox + 1)};
        out.at(c, oy, ox) = *std::max_element(window, window + 4);
      }
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  const int M = weights.dim(0), N = weights.dim(1);
  if (input.size() != static_cast<std::size_t>(N)) throw ShapeError("reference::dense: length mismatch");
  Tensor out({M});
  for (int i = 0; i < M; ++i) {
    double acc = bias[i];
    for (int j = 0; j < N; ++j) acc += static_cast<double>(weights[static_cast<std::size_t>(i) * N + j]) * input[j];
    out[i] = static_cast<float>(acc);
  }
  return out;
}

namespace {

double sample_pixel(const Tensor& input, int c, double sy, double sx) {
  const int H = input.dim(1), W = input.dim(2);
  sy = std::min(std::max(sy, 0.0), H - 1.0);
  sx = std::min(std::max(sx, 0.0), W - 1.0);
  const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
  const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double wy = sy - y0, wx = sx - x0;
  return (1 - wy) * ((1 - wx) * input.at(c, y0, x0) + wx * input.at(c, y0, x1)) +
         wy * ((1 - wx) * input.at(c, y1, x0) + wx * input.at(c, y1, x1));
}

}  // namespace

Tensor resample(const Tensor& input, const SampleWindow& window, int out_h, int out_w) {
  const int C = input.dim(0);
  Tensor out({C, out_h, out_w});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const int col = window.flip ? out_w - 1 - ox : ox;
        const double sy = window.y0 + (oy + 0.5) * window.h / out_h - 0.5;
        const double sx = window.x0 + (col + 0.5) * window.w / out_w - 0.5;
        out.at(c, oy, ox) = static_cast<float>(sample_pixel(input, c, sy, sx));
      }
  return out;
}

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
  return resample(input, SampleWindow{0.0, 0.0, static_cast<double>(input.dim(2)),
                                      static_cast<double>(input.dim(1)), false},
                  out_h, out_w);
}

}  // namespace fovea::reference

#include "fovea/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace fovea {

int conv_output_size(int in, int kernel, ConvGeometry g) {
  if (g.stride < 1 || g.pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  if (kernel > in + 2 * g.pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * g.pad));
  }
  return (in + 2 * g.pad - kernel) / g.stride + 1;
}

namespace {

void check_conv_operands(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_string(input.shape()));
  if (kernels.rank() != 4) {
    throw ShapeError("conv2d: kernels must be [F,C,kh,kw], got " + shape_string(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                     " != input channels " + std::to_string(input.dim(0)));
  }
  if (bias.size() != static_cast<std::size_t>(kernels.dim(0))) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != filters " +
                     std::to_string(kernels.dim(0)));
  }
}

// Range of output columns [lo, hi) whose tap `k` lands inside [0, in).
void valid_range(int out, int in, int k, ConvGeometry g, int& lo, int& hi) {
  // need 0 <= o*stride + k - pad < in
  const int a = g.pad - k;
  lo = a <= 0 ? 0 : (a + g.stride - 1) / g.stride;
  const int b = in - 1 + g.pad - k;
  hi = b < 0 ? 0 : std::min(out, b / g.stride + 1);
  if (hi < lo) hi = lo;
}

struct AxisTaps {
  std::vector<int> i0;
  std::vector<int> i1;
  std::vector<float> frac;
};

AxisTaps axis_taps(double origin, double extent, int in, int out, bool flip) {
  AxisTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double scale = extent / out;
  for (int j = 0; j < out; ++j) {
    const int src_j = flip ? out - 1 - j : j;
    double s = origin + (src_j + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(s));
    t.i0[j] = lo;
    t.i1[j] = std::min(lo + 1, in - 1);
    t.frac[j] = static_cast<float>(s - lo);
  }
  return t;
}

void check_window(const Tensor& input, const SampleWindow& w, int out_h, int out_w) {
  if (input.rank() != 3) throw ShapeError("resample: input must be [C,H,W], got " + shape_string(input.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("resample: output size must be >= 1");
  if (!(w.w > 0.0) || !(w.h > 0.0)) throw ShapeError("resample: empty window");
}

}  // namespace

namespace kernels {

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, ConvGeometry g) {
  check_conv_operands(input, kernels, bias);
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = kernels.dim(0), KH = kernels.dim(2), KW = kernels.dim(3);
  const int OH = conv_output_size(H, KH, g), OW = conv_output_size(W, KW, g);
  Tensor out({F, OH, OW});
  const float* in = input.data();
  const float* k = kernels.data();
  float* o = out.data();

#pragma omp parallel for schedule(static)
  for (int f = 0; f < F; ++f) {
    float* plane = o + static_cast<std::size_t>(f) * OH * OW;
    std::fill(plane, plane + static_cast<std::size_t>(OH) * OW, bias[f]);
    for (int c = 0; c < C; ++c) {
      const float* src = in + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < KH; ++ky) {
        int oy_lo, oy_hi;
        valid_range(OH, H, ky, g, oy_lo, oy_hi);
        for (int kx = 0; kx < KW; ++kx) {
          int ox_lo, ox_hi;
          valid_range(OW, W, kx, g, ox_lo, ox_hi);
          const float w = k[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx];
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const float* row = src + static_cast<std::size_t>(oy * g.stride + ky - g.pad) * W;
            float* dst = plane + static_cast<std::size_t>(oy) * OW;
            if (g.stride == 1) {
              const float* r = row + (kx - g.pad);
              for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += w * r[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] += w * row[ox * g.stride + kx - g.pad];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernels, const Shape& input_shape,
                             ConvGeometry g) {
  if (input_shape.size() != 3 || kernels.rank() != 4 || upstream.rank() != 3) {
    throw ShapeError("conv2d_backward_input: rank mismatch");
  }
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const int F = kernels.dim(0), KH = kernels.dim(2), KW = kernels.dim(3);
  const int OH = conv_output_size(H, KH, g), OW = conv_output_size(W, KW, g);
  if (upstream.shape() != Shape{F, OH, OW} || kernels.dim(1) != C) {
    throw ShapeError("conv2d_backward_input: upstream " + shape_string(upstream.shape()) +
                     " does not match layer output " + shape_string({F, OH, OW}));
  }
  Tensor grad(input_shape);
  const float* up = upstream.data();
  const float* k = kernels.data();
  float* gi = grad.data();

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    float* plane = gi + static_cast<std::size_t>(c) * H * W;
    for (int f = 0; f < F; ++f) {
      const float* src = up + static_cast<std::size_t>(f) * OH * OW;
      for (int ky = 0; ky < KH; ++ky) {
        int oy_lo, oy_hi;
        valid_range(OH, H, ky, g, oy_lo, oy_hi);
        for (int kx = 0; kx < KW; ++kx) {
          int ox_lo, ox_hi;
          valid_range(OW, W, kx, g, ox_lo, ox_hi);
          const float w = k[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx];
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            float* row = plane + static_cast<std::size_t>(oy * g.stride + ky - g.pad) * W;
            const float* u = src + static_cast<std::size_t>(oy) * OW;
            if (g.stride == 1) {
              float* r = row + (kx - g.pad);
              for (int ox = ox_lo; ox < ox_hi; ++ox) r[ox] += w * u[ox];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) row[ox * g.stride + kx - g.pad] += w * u[ox];
            }
          }
        }
      }
    }
  }
  return grad;
}

WeightGradients conv2d_backward_weights(const Tensor& input, const Tensor& upstream,
                                        const Shape& kernel_shape, ConvGeometry g) {
  if (kernel_shape.size() != 4 || input.rank() != 3 || upstream.rank() != 3) {
    throw ShapeError("conv2d_backward_weights: rank mismatch");
  }
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = kernel_shape[0], KH = kernel_shape[2], KW = kernel_shape[3];
  const int OH = conv_output_size(H, KH, g), OW = conv_output_size(W, KW, g);
  if (upstream.shape() != Shape{F, OH, OW} || kernel_shape[1] != C) {
    throw ShapeError("conv2d_backward_weights: upstream " + shape_string(upstream.shape()) +
                     " does not match layer output");
  }
  WeightGradients out{Tensor(kernel_shape), Tensor({F})};
  const float* in = input.data();
  const float* up = upstream.data();

#pragma omp parallel for schedule(static)
  for (int f = 0; f < F; ++f) {
    const float* u = up + static_cast<std::size_t>(f) * OH * OW;
    float b = 0.0f;
    for (int i = 0; i < OH * OW; ++i) b += u[i];
    out.bias[f] = b;
    for (int c = 0; c < C; ++c) {
      const float* src = in + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < KH; ++ky) {
        int oy_lo, oy_hi;
        valid_range(OH, H, ky, g, oy_lo, oy_hi);
        for (int kx = 0; kx < KW; ++kx) {
          int ox_lo, ox_hi;
          valid_range(OW, W, kx, g, ox_lo, ox_hi);
          float acc = 0.0f;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const float* row = src + static_cast<std::size_t>(oy * g.stride + ky - g.pad) * W;
            const float* ur = u + static_cast<std::size_t>(oy) * OW;
            for (int ox = ox_lo; ox < ox_hi; ++ox) acc += ur[ox] * row[ox * g.stride + kx - g.pad];
          }
          out.weights[((static_cast<std::size_t>(f) * C + c) * KH + ky) * KW + kx] = acc;
        }
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
  require_same_shape(input, upstream, "relu_backward");
  Tensor grad = upstream;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(input[i] > 0.0f)) grad[i] = 0.0f;
  }
  return grad;
}

Tensor maxpool2(const Tensor& input, std::vector<int>* argmax) {
  if (input.rank() != 3) throw ShapeError("maxpool2: input must be [C,H,W], got " + shape_string(input.shape()));
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_string(input.shape()));
  }
  const int OH = H / 2, OW = W / 2;
  Tensor out({C, OH, OW});
  if (argmax) argmax->assign(out.size(), 0);
  const float* in = input.data();

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        int best = (c * H + 2 * oy) * W + 2 * ox;
        float best_v = in[best];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (c * H + 2 * oy + dy) * W + 2 * ox + dx;
            if (in[idx] > best_v) {
              best_v = in[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(c) * OH + oy) * OW + ox;
        out[o] = best_v;
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

Tensor maxpool2_backward(const Tensor& upstream, const std::vector<int>& argmax,
                         const Shape& input_shape) {
  if (upstream.size() != argmax.size()) throw ShapeError("maxpool2_backward: argmax length mismatch");
  Tensor grad(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[static_cast<std::size_t>(argmax[i])] += upstream[i];
  return grad;
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) throw ShapeError("dense: weights must be [m,n], got " + shape_string(weights.shape()));
  const int M = weights.dim(0), N = weights.dim(1);
  if (input.size() != static_cast<std::size_t>(N)) {
    throw ShapeError("dense: input length " + std::to_string(input.size()) + " != weight columns " +
                     std::to_string(N));
  }
  if (bias.size() != static_cast<std::size_t>(M)) {
    throw ShapeError("dense: bias length " + std::to_string(bias.size()) + " != weight rows " +
                     std::to_string(M));
  }
  Tensor out({M});
  const float* x = input.data();
  const float* w = weights.data();

#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const float* row = w + static_cast<std::size_t>(i) * N;
    // four interleaved partial sums give the compiler independent chains
    float acc[4] = {0.0f, 0.0f, 0.0f, 0.0f};
    int j = 0;
    for (; j + 4 <= N; j += 4) {
      acc[0] += row[j] * x[j];
      acc[1] += row[j + 1] * x[j + 1];
      acc[2] += row[j + 2] * x[j + 2];
      acc[3] += row[j + 3] * x[j + 3];
    }
    for (; j < N; ++j) acc[0] += row[j] * x[j];
    out[i] = bias[i] + ((acc[0] + acc[1]) + (acc[2] + acc[3]));
  }
  return out;
}

Tensor dense_backward_input(const Tensor& upstream, const Tensor& weights, const Shape& input_shape) {
  const int M = weights.dim(0), N = weights.dim(1);
  if (upstream.size() != static_cast<std::size_t>(M) || shape_size(input_shape) != static_cast<std::size_t>(N)) {
    throw ShapeError("dense_backward_input: upstream/weights mismatch");
  }
  Tensor grad(input_shape);
  const float* w = weights.data();
  float* g = grad.data();
  constexpr int kBlock = 512;
  const int blocks = (N + kBlock - 1) / kBlock;

#pragma omp parallel for schedule(static)
  for (int b = 0; b < blocks; ++b) {
    const int lo = b * kBlock, hi = std::min(N, lo + kBlock);
    for (int i = 0; i < M; ++i) {
      const float u = upstream[i];
      if (u == 0.0f) continue;
      const float* row = w + static_cast<std::size_t>(i) * N;
      for (int j = lo; j < hi; ++j) g[j] += u * row[j];
    }
  }
  return grad;
}

WeightGradients dense_backward_weights(const Tensor& input, const Tensor& upstream) {
  const int M = static_cast<int>(upstream.size()), N = static_cast<int>(input.size());
  WeightGradients out{Tensor({M, N}), Tensor({M})};
  const float* x = input.data();
  float* w = out.weights.data();

#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const float u = upstream[i];
    float* row = w + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) row[j] = u * x[j];
    out.bias[i] = u;
  }
  return out;
}

Tensor resample(const Tensor& input, const SampleWindow& window, int out_h, int out_w) {
  check_window(input, window, out_h, out_w);
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const AxisTaps ty = axis_taps(window.y0, window.h, H, out_h, false);
  const AxisTaps tx = axis_taps(window.x0, window.w, W, out_w, window.flip);
  Tensor out({C, out_h, out_w});

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const float fy = ty.frac[oy];
      const float* r0 = input.data() + (static_cast<std::size_t>(c) * H + ty.i0[oy]) * W;
      const float* r1 = input.data() + (static_cast<std::size_t>(c) * H + ty.i1[oy]) * W;
      float* dst = out.data() + (static_cast<std::size_t>(c) * out_h + oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const float fx = tx.frac[ox];
        const int a = tx.i0[ox], b = tx.i1[ox];
        const float top = r0[a] * (1.0f - fx) + r0[b] * fx;
        const float bot = r1[a] * (1.0f - fx) + r1[b] * fx;
        dst[ox] = top * (1.0f - fy) + bot * fy;
      }
    }
  }
  return out;
}

Tensor resample_adjoint(const Tensor& upstream, const SampleWindow& window, const Shape& input_shape) {
  if (input_shape.size() != 3 || upstream.rank() != 3 || upstream.dim(0) != input_shape[0]) {
    throw ShapeError("resample_adjoint: shape mismatch");
  }
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const int out_h = upstream.dim(1), out_w = upstream.dim(2);
  const AxisTaps ty = axis_taps(window.y0, window.h, H, out_h, false);
  const AxisTaps tx = axis_taps(window.x0, window.w, W, out_w, window.flip);
  Tensor grad(input_shape);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const float fy = ty.frac[oy];
      float* r0 = grad.data() + (static_cast<std::size_t>(c) * H + ty.i0[oy]) * W;
      float* r1 = grad.data() + (static_cast<std::size_t>(c) * H + ty.i1[oy]) * W;
      const float* u = upstream.data() + (static_cast<std::size_t>(c) * out_h + oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const float fx = tx.frac[ox];
        const int a = tx.i0[ox], b = tx.i1[ox];
        const float top = u[ox] * (1.0f - fy);
        const float bot = u[ox] * fy;
        r0[a] += top * (1.0f - fx);
        r0[b] += top * fx;
        r1[a] += bot * (1.0f - fx);
        r1[b] += bot * fx;
      }
    }
  }
  return grad;
}

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
  if (input.rank() != 3) throw ShapeError("bilinear_resize: input must be [C,H,W]");
  const SampleWindow full{0.0, 0.0, static_cast<double>(input.dim(2)),
                          static_cast<double>(input.dim(1)), false};
  return resample(input, full, out_h, out_w);
}

}  // namespace kernels

}  // namespace fovea

#pragma once

// Forward and backward kernels of the desk CNN. The versions in `kernels`
// parallelize their outer loop with OpenMP; every output element is produced
// by exactly one thread in a fixed summation order, so results do not depend
// on the thread count. `reference` holds straightforward serial loops with
// double accumulation, used as oracles in tests and as the benchmark baseline.

#include <vector>

#include "fovea/tensor.hpp"

namespace fovea {

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
};

/// Sub-pixel source window in continuous pixel coordinates (pixel i spans
/// [i, i+1)). `flip` mirrors the sampled output horizontally.
struct SampleWindow {
  double x0 = 0.0;
  double y0 = 0.0;
  double w = 0.0;
  double h = 0.0;
  bool flip = false;

  friend bool operator==(const SampleWindow&, const SampleWindow&) = default;
};

struct WeightGradients {
  Tensor weights;
  Tensor bias;
};

int conv_output_size(int in, int kernel, ConvGeometry g);

namespace kernels {

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, ConvGeometry g);
Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernels, const Shape& input_shape,
                             ConvGeometry g);
WeightGradients conv2d_backward_weights(const Tensor& input, const Tensor& upstream,
                                        const Shape& kernel_shape, ConvGeometry g);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

/// 2x2/stride-2 max pooling. `argmax` receives the flat input index of each
/// output's winner (first occurrence in row-major window order on ties).
Tensor maxpool2(const Tensor& input, std::vector<int>* argmax = nullptr);
Tensor maxpool2_backward(const Tensor& upstream, const std::vector<int>& argmax,
                         const Shape& input_shape);

/// weights [m,n] times the flattened input, plus bias [m].
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
Tensor dense_backward_input(const Tensor& upstream, const Tensor& weights, const Shape& input_shape);
WeightGradients dense_backward_weights(const Tensor& input, const Tensor& upstream);

/// Bilinear sampling of `window` into an [C,outH,outW] grid; sample centers
/// at (i+0.5)*scale-0.5, clamped to the edge.
Tensor resample(const Tensor& input, const SampleWindow& window, int out_h, int out_w);
/// Adjoint of `resample` with respect to its input.
Tensor resample_adjoint(const Tensor& upstream, const SampleWindow& window, const Shape& input_shape);
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);

}  // namespace kernels

namespace reference {

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, ConvGeometry g);
Tensor conv2d_backward_input(const Tensor& upstream, const Tensor& kernels, const Shape& input_shape,
                             ConvGeometry g);
WeightGradients conv2d_backward_weights(const Tensor& input, const Tensor& upstream,
                                        const Shape& kernel_shape, ConvGeometry g);
Tensor maxpool2(const Tensor& input);
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);
Tensor resample(const Tensor& input, const SampleWindow& window, int out_h, int out_w);

}  // namespace reference

}  // namespace fovea

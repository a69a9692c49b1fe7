#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "fovea/kernels.hpp"
#include "fovea/tensor.hpp"

namespace fovea {

struct ConvLayer {
  int filters = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};
struct ReluLayer {
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};
struct MaxPoolLayer {
  friend bool operator==(const MaxPoolLayer&, const MaxPoolLayer&) = default;
};
/// Flattens its input.
struct DenseLayer {
  int units = 1;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using LayerSpec = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, DenseLayer>;

/// Architecture description. Inputs are affinely normalized
/// (x * input_scale + input_offset) before the first layer.
struct ModelSpec {
  std::array<int, 3> input{3, 32, 32};
  float input_scale = 1.0f;
  float input_offset = 0.0f;
  std::vector<LayerSpec> layers;

  /// conv(16,3x3)-relu-pool-conv(32,3x3)-relu-pool-dense(128)-relu-dense(k).
  static ModelSpec desk(int num_classes = 10);

  Shape input_shape() const { return {input[0], input[1], input[2]}; }
  /// Output shape of every layer; throws ShapeError when layers do not compose.
  std::vector<Shape> layer_shapes() const;
  int num_classes() const;

  /// One-line text form, e.g. "input 3x32x32 scale 0.0078125 offset -1; conv 16 3 1 1; relu; ...".
  std::string describe() const;
  static ModelSpec parse(const std::string& text);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct LayerParams {
  Tensor weights;
  Tensor bias;
};

/// Cached activations of one forward pass, one entry per layer.
struct ForwardTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
  std::vector<std::vector<int>> argmax;

  std::size_t size() const { return outputs.size(); }
};

struct NetworkGradients {
  Tensor input;
  std::vector<LayerParams> params;
};

class Network {
 public:
  Network() = default;
  /// Zero-initialized parameters.
  explicit Network(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  std::vector<LayerParams>& params() { return params_; }
  const std::vector<LayerParams>& params() const { return params_; }
  std::size_t parameter_count() const;

  /// He-normal weights, zero biases.
  void initialize(std::uint64_t seed);

  Tensor forward(const Tensor& image) const;
  Tensor forward(const Tensor& image, ForwardTrace& trace) const;

  /// Reverse traversal of `trace`. Returns d(objective)/d(image) where
  /// `upstream` is d(objective)/d(output); weight gradients are filled when
  /// requested.
  NetworkGradients backward(const ForwardTrace& trace, const Tensor& upstream, bool with_weights) const;
  Tensor input_gradient(const ForwardTrace& trace, const Tensor& upstream) const;

  friend bool operator==(const Network& a, const Network& b);

 private:
  void check_input(const Tensor& image) const;

  ModelSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams> params_;
};

}  // namespace fovea

#include "fovea/network.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace fovea {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace

ModelSpec ModelSpec::desk(int num_classes) {
  ModelSpec s;
  s.input = {3, 32, 32};
  s.input_scale = 1.0f / 64.0f;
  s.input_offset = -127.5f / 64.0f;
  s.layers = {ConvLayer{16, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{},
              ConvLayer{32, 3, 1, 1}, ReluLayer{}, MaxPoolLayer{},
              DenseLayer{128},        ReluLayer{}, DenseLayer{num_classes}};
  return s;
}

std::vector<Shape> ModelSpec::layer_shapes() const {
  std::vector<Shape> shapes;
  Shape cur = input_shape();
  shape_size(cur);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto where = "layer " + std::to_string(i) + ": ";
    cur = std::visit(
        overloaded{
            [&](const ConvLayer& c) -> Shape {
              if (cur.size() != 3) throw ShapeError(where + "conv needs a [C,H,W] input");
              if (c.filters < 1 || c.kernel < 1) throw ShapeError(where + "bad conv hyperparameters");
              const ConvGeometry g{c.stride, c.pad};
              return {c.filters, conv_output_size(cur[1], c.kernel, g), conv_output_size(cur[2], c.kernel, g)};
            },
            [&](const ReluLayer&) -> Shape { return cur; },
            [&](const MaxPoolLayer&) -> Shape {
              if (cur.size() != 3 || cur[1] % 2 || cur[2] % 2) {
                throw ShapeError(where + "maxpool2 needs even spatial dims, got " + shape_string(cur));
              }
              return {cur[0], cur[1] / 2, cur[2] / 2};
            },
            [&](const DenseLayer& d) -> Shape {
              if (d.units < 1) throw ShapeError(where + "dense needs >= 1 unit");
              return {d.units};
            },
        },
        layers[i]);
    shapes.push_back(cur);
  }
  return shapes;
}

int ModelSpec::num_classes() const {
  const auto shapes = layer_shapes();
  if (shapes.empty() || shapes.back().size() != 1) {
    throw ShapeError("model must end in a vector of class scores");
  }
  return shapes.back()[0];
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  os << "input " << input[0] << 'x' << input[1] << 'x' << input[2] << " scale "
     << format_float(input_scale) << " offset " << format_float(input_offset);
  for (const auto& layer : layers) {
    os << "; ";
    std::visit(overloaded{
                   [&](const ConvLayer& c) {
                     os << "conv " << c.filters << ' ' << c.kernel << ' ' << c.stride << ' ' << c.pad;
                   },
                   [&](const ReluLayer&) { os << "relu"; },
                   [&](const MaxPoolLayer&) { os << "maxpool2"; },
                   [&](const DenseLayer& d) { os << "dense " << d.units; },
               },
               layer);
  }
  return os.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
  const auto parts = split(text, ';');
  if (parts.empty()) throw ParseError("empty model description");
  ModelSpec spec;
  {
    std::istringstream is(parts[0]);
    std::string kw, dims, kw_scale, kw_offset;
    if (!(is >> kw >> dims >> kw_scale >> spec.input_scale >> kw_offset >> spec.input_offset) ||
        kw != "input" || kw_scale != "scale" || kw_offset != "offset") {
      throw ParseError("bad model input clause: '" + parts[0] + "'");
    }
    const auto d = split(dims, 'x');
    if (d.size() != 3) throw ParseError("bad input dims '" + dims + "'");
    for (int i = 0; i < 3; ++i) spec.input[i] = std::stoi(d[i]);
  }
  for (std::size_t i = 1; i < parts.size(); ++i) {
    std::istringstream is(parts[i]);
    std::string kind;
    is >> kind;
    if (kind == "conv") {
      ConvLayer c;
      if (!(is >> c.filters >> c.kernel >> c.stride >> c.pad)) throw ParseError("bad conv clause: '" + parts[i] + "'");
      spec.layers.emplace_back(c);
    } else if (kind == "relu") {
      spec.layers.emplace_back(ReluLayer{});
    } else if (kind == "maxpool2") {
      spec.layers.emplace_back(MaxPoolLayer{});
    } else if (kind == "dense") {
      DenseLayer d;
      if (!(is >> d.units)) throw ParseError("bad dense clause: '" + parts[i] + "'");
      spec.layers.emplace_back(d);
    } else {
      throw ParseError("unknown layer kind '" + kind + "'");
    }
  }
  spec.layer_shapes();
  return spec;
}

Network::Network(ModelSpec spec) : spec_(std::move(spec)) {
  shapes_ = spec_.layer_shapes();
  Shape cur = spec_.input_shape();
  params_.resize(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (const auto* c = std::get_if<ConvLayer>(&spec_.layers[i])) {
      params_[i].weights = Tensor({c->filters, cur[0], c->kernel, c->kernel});
      params_[i].bias = Tensor({c->filters});
    } else if (const auto* d = std::get_if<DenseLayer>(&spec_.layers[i])) {
      params_[i].weights = Tensor({d->units, static_cast<int>(shape_size(cur))});
      params_[i].bias = Tensor({d->units});
    }
    cur = shapes_[i];
  }
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weights.size() + p.bias.size();
  return n;
}

void Network::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    if (p.weights.empty()) continue;
    const std::size_t fan_in = p.weights.size() / static_cast<std::size_t>(p.weights.dim(0));
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (float& w : p.weights.values()) w = dist(rng);
    for (float& b : p.bias.values()) b = 0.0f;
  }
}

void Network::check_input(const Tensor& image) const {
  if (image.shape() != spec_.input_shape()) {
    throw ShapeError("model expects input " + shape_string(spec_.input_shape()) + ", got " +
                     shape_string(image.shape()));
  }
}

Tensor Network::forward(const Tensor& image) const {
  check_input(image);
  Tensor cur = image;
  for (float& v : cur.values()) v = v * spec_.input_scale + spec_.input_offset;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& p = params_[i];
    cur = std::visit(overloaded{
                         [&](const ConvLayer& c) {
                           return kernels::conv2d(cur, p.weights, p.bias, {c.stride, c.pad});
                         },
                         [&](const ReluLayer&) { return kernels::relu(cur); },
                         [&](const MaxPoolLayer&) { return kernels::maxpool2(cur); },
                         [&](const DenseLayer&) { return kernels::dense(cur, p.weights, p.bias); },
                     },
                     spec_.layers[i]);
  }
  return cur;
}

Tensor Network::forward(const Tensor& image, ForwardTrace& trace) const {
  check_input(image);
  trace = ForwardTrace{};
  trace.inputs.reserve(spec_.layers.size());
  trace.outputs.reserve(spec_.layers.size());
  trace.argmax.resize(spec_.layers.size());
  Tensor cur = image;
  for (float& v : cur.values()) v = v * spec_.input_scale + spec_.input_offset;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& p = params_[i];
    Tensor next = std::visit(overloaded{
                                 [&](const ConvLayer& c) {
                                   return kernels::conv2d(cur, p.weights, p.bias, {c.stride, c.pad});
                                 },
                                 [&](const ReluLayer&) { return kernels::relu(cur); },
                                 [&](const MaxPoolLayer&) { return kernels::maxpool2(cur, &trace.argmax[i]); },
                                 [&](const DenseLayer&) { return kernels::dense(cur, p.weights, p.bias); },
                             },
                             spec_.layers[i]);
    trace.inputs.push_back(std::move(cur));
    trace.outputs.push_back(next);
    cur = std::move(next);
  }
  return cur;
}

NetworkGradients Network::backward(const ForwardTrace& trace, const Tensor& upstream,
                                   bool with_weights) const {
  if (trace.size() != spec_.layers.size()) {
    throw ShapeError("trace has " + std::to_string(trace.size()) + " layers, model has " +
                     std::to_string(spec_.layers.size()));
  }
  if (trace.outputs.empty()) {
    Tensor g = upstream;
    for (float& v : g.values()) v *= spec_.input_scale;
    return {std::move(g), {}};
  }
  if (upstream.shape() != trace.outputs.back().shape()) {
    throw ShapeError("upstream shape " + shape_string(upstream.shape()) + " != output shape " +
                     shape_string(trace.outputs.back().shape()));
  }
  NetworkGradients out;
  if (with_weights) out.params.resize(params_.size());
  Tensor grad = upstream;
  for (std::size_t k = spec_.layers.size(); k-- > 0;) {
    const Tensor& in = trace.inputs[k];
    const auto& p = params_[k];
    std::visit(overloaded{
                   [&](const ConvLayer& c) {
                     const ConvGeometry g{c.stride, c.pad};
                     if (with_weights) {
                       auto wg = kernels::conv2d_backward_weights(in, grad, p.weights.shape(), g);
                       out.params[k] = {std::move(wg.weights), std::move(wg.bias)};
                     }
                     grad = kernels::conv2d_backward_input(grad, p.weights, in.shape(), g);
                   },
                   [&](const ReluLayer&) { grad = kernels::relu_backward(in, grad); },
                   [&](const MaxPoolLayer&) { grad = kernels::maxpool2_backward(grad, trace.argmax[k], in.shape()); },
                   [&](const DenseLayer&) {
                     if (with_weights) {
                       auto wg = kernels::dense_backward_weights(in, grad);
                       out.params[k] = {std::move(wg.weights), std::move(wg.bias)};
                     }
                     grad = kernels::dense_backward_input(grad, p.weights, in.shape());
                   },
               },
               spec_.layers[k]);
  }
  for (float& v : grad.values()) v *= spec_.input_scale;
  out.input = std::move(grad);
  return out;
}

Tensor Network::input_gradient(const ForwardTrace& trace, const Tensor& upstream) const {
  return backward(trace, upstream, false).input;
}

bool operator==(const Network& a, const Network& b) {
  if (!(a.spec_ == b.spec_) || a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    if (!(a.params_[i].weights == b.params_[i].weights) || !(a.params_[i].bias == b.params_[i].bias)) {
      return false;
    }
  }
  return true;
}

}  // namespace fovea

#include "fovea/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fovea {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " needs " +
                     std::to_string(shape_size(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0f); }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor scaled(const Tensor& t, float factor) {
  Tensor out = t;
  for (float& v : out.values()) v *= factor;
  return out;
}

void axpy(float a, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

Tensor clamped(const Tensor& t, float lo, float hi) {
  Tensor out = t;
  for (float& v : out.values()) v = std::clamp(v, lo, hi);
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_difference");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](float v) { return std::isfinite(v); });
}

Norms norms(const Tensor& t) {
  Norms n;
  if (t.empty()) return n;
  double sum = 0.0;
  for (float v : t.values()) {
    const double a = std::abs(static_cast<double>(v));
    sum += a;
    n.linf = std::max(n.linf, a);
  }
  n.l1_per_pixel = sum / static_cast<double>(t.size());
  return n;
}

namespace binary {

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

void read_exact(std::istream& in, char* dst, std::size_t n, std::size_t& offset) {
  in.read(dst, static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != n) {
    throw ParseError("truncated input at offset " + std::to_string(offset + got) + " (wanted " +
                     std::to_string(n) + " bytes)");
  }
  offset += n;
}

std::uint32_t read_u32(std::istream& in, std::size_t& offset) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4, offset);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace binary

namespace {
constexpr char kTensorMagic[4] = {'F', 'V', 'T', '1'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  binary::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) binary::write_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.values()) binary::write_u32(out, std::bit_cast<std::uint32_t>(v));
}

Tensor read_tensor(std::istream& in, std::size_t& offset) {
  const std::size_t start = offset;
  char magic[4];
  binary::read_exact(in, magic, 4, offset);
  if (std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw ParseError("bad tensor magic at offset " + std::to_string(start));
  }
  const std::uint32_t rank = binary::read_u32(in, offset);
  if (rank == 0 || rank > kMaxRank) {
    throw ParseError("unsupported tensor rank " + std::to_string(rank) + " at offset " +
                     std::to_string(offset - 4));
  }
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint32_t v = binary::read_u32(in, offset);
    if (v == 0 || v > (1u << 28)) {
      throw ParseError("bad tensor dimension at offset " + std::to_string(offset - 4));
    }
    d = static_cast<int>(v);
  }
  const std::size_t n = shape_size(shape);
  std::vector<unsigned char> raw(n * 4);
  binary::read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), offset);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* b = &raw[i * 4];
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                               (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_tensor(out, t);
  if (!out) throw Error("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::size_t offset = 0;
  try {
    return read_tensor(in, offset);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace fovea

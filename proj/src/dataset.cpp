#include "fovea/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>
#include <png.h>

#include "fovea/rng.hpp"

namespace fs = std::filesystem;

namespace fovea {

void SyntheticSpec::validate() const {
  if (num_images < 1) throw Error("synthetic: num_images must be >= 1");
  if (height < 8 || width < 8) throw Error("synthetic: image must be at least 8x8");
  if (num_classes < 2 || num_classes > 10) throw Error("synthetic: num_classes must lie in [2,10]");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw Error("synthetic: scale range must satisfy 0 < min <= max <= 1");
  }
  if (clutter_density < 0.0) throw Error("synthetic: clutter_density must be >= 0");
}

namespace {

// u, v in [-1,1] across the object frame, v growing downwards.
bool inside_shape(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(au, av) <= 0.92;
    case 2: return v <= 0.95 && au <= (v + 1.0) / 2.0;
    case 3: return au + av <= 1.0;
    case 4: return std::max(au, av) <= 1.0 && std::min(au, av) <= 0.33;
    case 5: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 6: return u * u + (v / 0.5) * (v / 0.5) <= 1.0;
    case 7: return std::max(au, av) <= 1.0 && std::min(std::abs(u - v), std::abs(u + v)) <= 0.45;
    case 8: return std::max(au, av) <= 0.95 && (u <= -0.25 || v >= 0.25);
    case 9: return v >= -0.95 && au <= (1.0 - v) / 2.0;
  }
  return false;
}

constexpr std::array<std::array<float, 3>, 10> kClassColor = {{
    {220, 60, 50},
    {60, 170, 70},
    {50, 90, 220},
    {230, 200, 40},
    {200, 60, 200},
    {40, 200, 210},
    {240, 140, 40},
    {140, 80, 220},
    {120, 200, 40},
    {230, 100, 150},
}};

// Stripe direction per class, in radians.
constexpr std::array<double, 10> kStripeAngle = {0.0, 0.8, 1.6, 2.4, 0.4, 1.2, 2.0, 2.8, 0.2, 1.0};

LabeledImage make_image(const SyntheticSpec& spec, int index) {
  std::mt19937_64 rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int H = spec.height, W = spec.width;
  const int cls = index % spec.num_classes;

  LabeledImage img;
  char id[32];
  std::snprintf(id, sizeof id, "img_%05d", index);
  img.id = id;
  img.label = cls;
  img.image = Tensor({3, H, W});

  // background: smooth colour gradient plus pixel noise
  std::array<double, 3> base{}, grad_x{}, grad_y{};
  for (int c = 0; c < 3; ++c) {
    base[static_cast<std::size_t>(c)] = 70.0 + 80.0 * unit(rng);
    grad_x[static_cast<std::size_t>(c)] = (unit(rng) - 0.5) * 60.0;
    grad_y[static_cast<std::size_t>(c)] = (unit(rng) - 0.5) * 60.0;
  }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double noise = (unit(rng) - 0.5) * 16.0;
      for (int c = 0; c < 3; ++c) {
        const auto k = static_cast<std::size_t>(c);
        img.image.at(c, y, x) = static_cast<float>(base[k] + grad_x[k] * (x / double(W) - 0.5) +
                                                   grad_y[k] * (y / double(H) - 0.5) + noise);
      }
    }

  // clutter: short strokes and specks in arbitrary colours
  std::poisson_distribution<int> count(spec.clutter_density * H * W / 100.0);
  const int items = count(rng);
  for (int i = 0; i < items; ++i) {
    std::array<float, 3> col{};
    for (auto& v : col) v = static_cast<float>(255.0 * unit(rng));
    const int x0 = static_cast<int>(unit(rng) * W), y0 = static_cast<int>(unit(rng) * H);
    const bool horizontal = unit(rng) < 0.5;
    const int len = 1 + static_cast<int>(unit(rng) * 4);
    for (int t = 0; t < len; ++t) {
      const int x = horizontal ? x0 + t : x0, y = horizontal ? y0 : y0 + t;
      if (x >= W || y >= H) break;
      for (int c = 0; c < 3; ++c) img.image.at(c, y, x) = col[static_cast<std::size_t>(c)];
    }
  }

  // object
  const double side = std::min(H, W) * (spec.scale_min + (spec.scale_max - spec.scale_min) * unit(rng));
  const double aspect = 0.85 + 0.3 * unit(rng);
  const double ow = std::min<double>(W, side * aspect), oh = std::min<double>(H, side / aspect);
  const double ox = unit(rng) * (W - ow), oy = unit(rng) * (H - oh);
  const auto& colour = kClassColor[static_cast<std::size_t>(cls)];
  std::array<double, 3> jitter{};
  for (auto& j : jitter) j = (unit(rng) - 0.5) * 40.0;
  const double angle = kStripeAngle[static_cast<std::size_t>(cls)];
  const double period = 3.0 + 1.5 * (cls % 3);
  const double phase = unit(rng) * 6.283185307179586;

  Tensor mask({1, H, W});
  int minx = W, miny = H, maxx = -1, maxy = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double u = 2.0 * (x + 0.5 - ox) / ow - 1.0, v = 2.0 * (y + 0.5 - oy) / oh - 1.0;
      if (!inside_shape(cls, u, v)) continue;
      mask.at(0, y, x) = 1.0f;
      minx = std::min(minx, x);
      maxx = std::max(maxx, x);
      miny = std::min(miny, y);
      maxy = std::max(maxy, y);
      const double s = std::sin(6.283185307179586 * (x * std::cos(angle) + y * std::sin(angle)) / period + phase);
      for (int c = 0; c < 3; ++c) {
        const auto k = static_cast<std::size_t>(c);
        img.image.at(c, y, x) = static_cast<float>(colour[k] * (0.8 + 0.2 * s) + jitter[k]);
      }
    }
  if (maxx < 0) {
    // degenerate draw: fall back to a single centred pixel block
    minx = maxx = W / 2;
    miny = maxy = H / 2;
    mask.at(0, miny, minx) = 1.0f;
  }
  for (float& v : img.image.values()) v = std::round(std::clamp(v, 0.0f, 255.0f));
  img.boxes.push_back({minx, miny, std::max(2, maxx - minx + 1), std::max(2, maxy - miny + 1)});
  auto& b = img.boxes.back();
  b.x0 = std::min(b.x0, W - b.w);
  b.y0 = std::min(b.y0, H - b.h);
  img.object_mask = std::move(mask);
  return img;
}

}  // namespace

std::vector<LabeledImage> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<LabeledImage> out(static_cast<std::size_t>(spec.num_images));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < spec.num_images; ++i) out[static_cast<std::size_t>(i)] = make_image(spec, i);
  return out;
}

void write_png(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw ShapeError("write_png: expected [3,H,W] or [1,H,W]");
  }
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::vector<png_byte> bytes(static_cast<std::size_t>(C) * H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const float v = std::clamp(std::round(image.at(c, y, x)), 0.0f, 255.0f);
        bytes[(static_cast<std::size_t>(y) * W + x) * C + c] = static_cast<png_byte>(v);
      }
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(W);
  pi.height = static_cast<png_uint_32>(H);
  pi.format = C == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw Error("write_png " + path + ": " + msg);
  }
}

Tensor read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str())) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw ParseError(path + ": " + msg);
  }
  pi.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw ParseError(path + ": " + msg);
  }
  const int H = static_cast<int>(pi.height), W = static_cast<int>(pi.width);
  Tensor t({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = bytes[(static_cast<std::size_t>(y) * W + x) * 3 + c];
  return t;
}

void write_dataset(const std::vector<LabeledImage>& data, const SyntheticSpec& spec, const std::string& dir) {
  std::error_code ec;
  for (const char* sub : {"images", "previews", "masks"}) {
    fs::create_directories(fs::path(dir) / sub, ec);
    if (ec) throw Error("cannot create " + (fs::path(dir) / sub).string() + ": " + ec.message());
  }
  std::ofstream labels(fs::path(dir) / "labels.csv", std::ios::binary);
  std::ofstream boxes(fs::path(dir) / "bboxes.csv", std::ios::binary);
  if (!labels || !boxes) throw Error("cannot write CSV files in " + dir);
  labels << "id,label\n";
  boxes << "id,x0,y0,w,h\n";
  for (const auto& img : data) {
    save_tensor((fs::path(dir) / "images" / (img.id + ".fvt")).string(), img.image);
    write_png(img.image, (fs::path(dir) / "previews" / (img.id + ".png")).string());
    if (img.object_mask) save_tensor((fs::path(dir) / "masks" / (img.id + ".fvt")).string(), *img.object_mask);
    labels << img.id << ',' << img.label << '\n';
    for (const auto& b : img.boxes) boxes << img.id << ',' << b.x0 << ',' << b.y0 << ',' << b.w << ',' << b.h << '\n';
  }
  const nlohmann::json meta = {
      {"num_images", spec.num_images}, {"height", spec.height},       {"width", spec.width},
      {"num_classes", spec.num_classes}, {"scale_min", spec.scale_min}, {"scale_max", spec.scale_max},
      {"clutter_density", spec.clutter_density}, {"seed", spec.seed},
  };
  std::ofstream(fs::path(dir) / "dataset.json", std::ios::binary) << meta.dump(2) << '\n';
}

std::vector<LabeledImage> generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
  auto data = generate_synthetic(spec);
  write_dataset(data, spec, dir);
  return data;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

int parse_int(const std::string& s, const std::string& file, int line) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw ParseError(file + ":" + std::to_string(line) + ": expected an integer, got '" + s + "'");
  }
  return v;
}

// Rows of a CSV with the given header; '\r' and blank lines are ignored.
template <typename RowFn>
void read_csv(const fs::path& path, const std::string& header, std::size_t columns, RowFn fn) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  int number = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      seen_header = true;
      if (line == header) continue;
    }
    const auto fields = split_csv(line);
    if (fields.size() != columns) {
      throw ParseError(path.string() + ":" + std::to_string(number) + ": expected " + std::to_string(columns) +
                       " fields, got " + std::to_string(fields.size()));
    }
    fn(fields, number);
  }
}

}  // namespace

IngestResult ingest_dataset(const std::string& dir, int num_classes) {
  const fs::path root(dir);
  IngestResult res;
  res.num_classes = num_classes;
  if (res.num_classes <= 0 && fs::exists(root / "dataset.json")) {
    std::ifstream in(root / "dataset.json");
    const auto meta = nlohmann::json::parse(in, nullptr, false);
    if (!meta.is_discarded() && meta.is_object()) res.num_classes = meta.value("num_classes", 0);
  }
  if (res.num_classes <= 0) res.num_classes = 10;

  std::vector<std::pair<std::string, int>> labels;
  const std::string labels_file = (root / "labels.csv").string();
  read_csv(root / "labels.csv", "id,label", 2, [&](const std::vector<std::string>& f, int line) {
    if (f[0].empty()) throw ParseError(labels_file + ":" + std::to_string(line) + ": empty id");
    const int label = parse_int(f[1], labels_file, line);
    if (label < 0 || label >= res.num_classes) {
      throw ParseError(labels_file + ":" + std::to_string(line) + ": label " + std::to_string(label) +
                       " outside [0," + std::to_string(res.num_classes) + ")");
    }
    labels.emplace_back(f[0], label);
  });

  std::map<std::string, std::vector<BoundingBox>> boxes;
  if (fs::exists(root / "bboxes.csv")) {
    const std::string boxes_file = (root / "bboxes.csv").string();
    read_csv(root / "bboxes.csv", "id,x0,y0,w,h", 5, [&](const std::vector<std::string>& f, int line) {
      BoundingBox b{parse_int(f[1], boxes_file, line), parse_int(f[2], boxes_file, line),
                    parse_int(f[3], boxes_file, line), parse_int(f[4], boxes_file, line)};
      if (b.x0 < 0 || b.y0 < 0 || b.w < 1 || b.h < 1) {
        throw ParseError(boxes_file + ":" + std::to_string(line) + ": invalid box");
      }
      boxes[f[0]].push_back(b);
    });
  }

  for (const auto& [id, label] : labels) {
    LabeledImage img;
    img.id = id;
    img.label = label;
    try {
      if (fs::exists(root / "images" / (id + ".fvt"))) {
        img.image = load_tensor((root / "images" / (id + ".fvt")).string());
      } else if (fs::exists(root / "images" / (id + ".png"))) {
        img.image = read_png((root / "images" / (id + ".png")).string());
      } else if (fs::exists(root / "previews" / (id + ".png"))) {
        img.image = read_png((root / "previews" / (id + ".png")).string());
      } else {
        throw Error("no image file for '" + id + "'");
      }
      if (img.image.rank() != 3) throw ShapeError("image '" + id + "' is not [C,H,W]");
      if (auto it = boxes.find(id); it != boxes.end()) {
        for (const auto& b : it->second) {
          if (!b.inside(img.width(), img.height())) throw Error("box outside image '" + id + "'");
        }
        img.boxes = it->second;
      }
      if (fs::exists(root / "masks" / (id + ".fvt"))) img.object_mask = load_tensor((root / "masks" / (id + ".fvt")).string());
      res.images.push_back(std::move(img));
    } catch (const Error& e) {
      res.errors.push_back({id, e.what()});
    }
  }
  return res;
}

Split split_dataset(const std::vector<LabeledImage>& data, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("split: fraction must lie in (0,1)");
  const auto n = static_cast<std::size_t>(std::round(train_fraction * static_cast<double>(data.size())));
  Split s;
  s.train.assign(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
  s.heldout.assign(data.begin() + static_cast<std::ptrdiff_t>(n), data.end());
  return s;
}

}  // namespace fovea

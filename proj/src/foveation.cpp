#include "fovea/foveation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <yaml-cpp/yaml.h>

namespace fovea {

std::string to_string(FoveationKind kind) {
  switch (kind) {
    case FoveationKind::Identity: return "identity";
    case FoveationKind::ObjectCrop: return "object_crop";
    case FoveationKind::TenCrop: return "ten_crop";
    case FoveationKind::RandomCrops: return "random_crops";
    case FoveationKind::ShiftCrops: return "shift_crops";
    case FoveationKind::SaliencyCrops: return "saliency_crops";
    case FoveationKind::Embed: return "embed";
  }
  return "?";
}

FoveationKind parse_foveation_kind(const std::string& s) {
  for (auto k : {FoveationKind::Identity, FoveationKind::ObjectCrop, FoveationKind::TenCrop,
                 FoveationKind::RandomCrops, FoveationKind::ShiftCrops, FoveationKind::SaliencyCrops,
                 FoveationKind::Embed}) {
    if (to_string(k) == s) return k;
  }
  throw ParseError("unknown foveation variant '" + s + "'");
}

void FoveationSpec::validate() const {
  if (n < 1) throw Error("foveation: n must be >= 1");
  if ((variant == FoveationKind::RandomCrops || variant == FoveationKind::ShiftCrops) && n > 10) {
    throw Error("foveation: n must be <= 10 for " + to_string(variant));
  }
  if (!(background_fraction >= 0.0 && background_fraction < 1.0)) {
    throw Error("foveation: background_fraction must lie in [0,1)");
  }
  if (out_h < 1 || out_w < 1) throw Error("foveation: output size must be positive");
}

std::string FoveationSpec::condition_name() const {
  switch (variant) {
    case FoveationKind::Identity: return "Identity MP";
    case FoveationKind::ObjectCrop: return "Object Crop MP";
    case FoveationKind::TenCrop: return "10 Crop MP";
    case FoveationKind::RandomCrops: return std::to_string(n) + " Crop MP";
    case FoveationKind::SaliencyCrops: return "Saliency Crop MP";
    case FoveationKind::ShiftCrops: return std::to_string(n) + " Shift MP-Object";
    case FoveationKind::Embed: return "Embedded MP-Object";
  }
  return "?";
}

bool FoveationSpec::uses_object_perturbation() const {
  return variant == FoveationKind::ShiftCrops || variant == FoveationKind::Embed;
}

bool FoveationSpec::needs_box() const {
  return variant == FoveationKind::ObjectCrop || variant == FoveationKind::ShiftCrops ||
         variant == FoveationKind::Embed;
}

FoveationSpec identity_spec(int out_h, int out_w) {
  FoveationSpec s;
  s.variant = FoveationKind::Identity;
  s.out_h = out_h;
  s.out_w = out_w;
  return s;
}

FoveationSpec object_crop_spec(int out_h, int out_w) {
  FoveationSpec s = identity_spec(out_h, out_w);
  s.variant = FoveationKind::ObjectCrop;
  return s;
}

std::string foveation_specs_to_text(const std::vector<FoveationSpec>& specs) {
  YAML::Emitter out;
  out << YAML::BeginSeq;
  for (const auto& s : specs) {
    out << YAML::BeginMap << YAML::Key << to_string(s.variant) << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "out" << YAML::Value << YAML::Flow << YAML::BeginSeq << s.out_h << s.out_w << YAML::EndSeq;
    if (s.variant == FoveationKind::RandomCrops || s.variant == FoveationKind::ShiftCrops ||
        s.variant == FoveationKind::SaliencyCrops) {
      out << YAML::Key << "n" << YAML::Value << s.n;
      out << YAML::Key << "seed" << YAML::Value << s.seed;
    }
    if (s.variant == FoveationKind::ShiftCrops) {
      out << YAML::Key << "background_fraction" << YAML::Value << s.background_fraction;
    }
    out << YAML::EndMap << YAML::EndMap;
  }
  out << YAML::EndSeq;
  return std::string(out.c_str()) + "\n";
}

namespace {

FoveationSpec spec_from_node(const YAML::Node& entry) {
  if (!entry.IsMap() || entry.size() != 1) {
    throw ParseError("foveation entry must be a single-key map naming the variant");
  }
  const auto it = entry.begin();
  FoveationSpec s;
  s.variant = parse_foveation_kind(it->first.as<std::string>());
  const YAML::Node& p = it->second;
  if (p && p.IsMap()) {
    for (const auto& kv : p) {
      const auto key = kv.first.as<std::string>();
      if (key == "out") {
        if (!kv.second.IsSequence() || kv.second.size() != 2) throw ParseError("foveation 'out' must be [H, W]");
        s.out_h = kv.second[0].as<int>();
        s.out_w = kv.second[1].as<int>();
      } else if (key == "n") {
        s.n = kv.second.as<int>();
      } else if (key == "seed") {
        s.seed = kv.second.as<std::uint64_t>();
      } else if (key == "background_fraction") {
        s.background_fraction = kv.second.as<double>();
      } else {
        throw ParseError("unknown foveation key '" + key + "' for " + to_string(s.variant));
      }
    }
  } else if (p && !p.IsNull()) {
    throw ParseError("parameters of " + to_string(s.variant) + " must be a map");
  }
  if (s.variant == FoveationKind::ShiftCrops && !(p && p["n"])) s.n = 10;
  if (s.variant == FoveationKind::RandomCrops && !(p && p["n"])) s.n = 3;
  if (s.variant == FoveationKind::SaliencyCrops && !(p && p["n"])) s.n = 3;
  s.validate();
  return s;
}

}  // namespace

std::vector<FoveationSpec> foveation_specs_from_text(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("foveation config: ") + e.what());
  }
  std::vector<FoveationSpec> out;
  if (!root || root.IsNull()) return out;
  try {
    if (root.IsSequence()) {
      for (const auto& e : root) out.push_back(spec_from_node(e));
    } else {
      out.push_back(spec_from_node(root));
    }
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("foveation config: ") + e.what());
  }
  return out;
}

SampleWindow box_window(const BoundingBox& box) {
  return {static_cast<double>(box.x0), static_cast<double>(box.y0), static_cast<double>(box.w),
          static_cast<double>(box.h), false};
}

SampleWindow full_window(int height, int width) {
  return {0.0, 0.0, static_cast<double>(width), static_cast<double>(height), false};
}

Tensor crop_window(const Tensor& image, const SampleWindow& window, int out_h, int out_w) {
  return kernels::resample(image, window, out_h, out_w);
}

Tensor crop_resize(const Tensor& image, const BoundingBox& box, int out_h, int out_w) {
  if (image.rank() != 3) throw ShapeError("crop_resize: image must be [C,H,W]");
  if (box.w < 2 || box.h < 2) {
    throw Error("crop_resize: degenerate box " + std::to_string(box.w) + "x" + std::to_string(box.h));
  }
  if (!box.inside(image.dim(2), image.dim(1))) throw Error("crop_resize: box outside image");
  return crop_window(image, box_window(box), out_h, out_w);
}

std::vector<Tensor> object_crop(const LabeledImage& img, int out_h, int out_w) {
  if (img.boxes.empty()) throw Error("object_crop: image '" + img.id + "' has no bounding box");
  std::vector<Tensor> crops;
  for (const auto& b : img.boxes) crops.push_back(crop_resize(img.image, b, out_h, out_w));
  return crops;
}

Tensor box_mask(const Shape& image_shape, const BoundingBox& box, MaskMode mode) {
  if (image_shape.size() != 3) throw ShapeError("box_mask: image shape must be [C,H,W]");
  const float inside = mode == MaskMode::Object ? 1.0f : 0.0f;
  Tensor m(image_shape, 1.0f - inside);
  for (int c = 0; c < image_shape[0]; ++c)
    for (int y = std::max(0, box.y0); y < std::min(image_shape[1], box.y0 + box.h); ++y)
      for (int x = std::max(0, box.x0); x < std::min(image_shape[2], box.x0 + box.w); ++x) m.at(c, y, x) = inside;
  return m;
}

Tensor mask_perturbation(const Tensor& eps, const BoundingBox& box, MaskMode mode) {
  const Tensor m = box_mask(eps.shape(), box, mode);
  Tensor out = eps;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return out;
}

std::vector<SampleWindow> ten_crop_windows(int height, int width) {
  const double w = kTenCropSide * width, h = kTenCropSide * height;
  const double right = width - w, bottom = height - h;
  std::vector<SampleWindow> out = {
      {0.0, 0.0, w, h, false},    {right, 0.0, w, h, false},           {0.0, bottom, w, h, false},
      {right, bottom, w, h, false}, {right / 2, bottom / 2, w, h, false},
  };
  for (int i = 0; i < 5; ++i) {
    SampleWindow f = out[static_cast<std::size_t>(i)];
    f.flip = true;
    out.push_back(f);
  }
  return out;
}

std::vector<Tensor> ten_crop(const Tensor& image, int out_h, int out_w) {
  std::vector<Tensor> crops;
  for (const auto& w : ten_crop_windows(image.dim(1), image.dim(2))) crops.push_back(crop_window(image, w, out_h, out_w));
  return crops;
}

namespace {

// Partial Fisher-Yates with explicit modulo-free draws so the selection only
// depends on the mt19937_64 stream.
std::vector<int> sample_without_replacement(int population, int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(population));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t span = static_cast<std::uint64_t>(population - i);
    const std::uint64_t limit = (~std::uint64_t{0} / span) * span;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i) + r % span]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

}  // namespace

std::vector<int> random_crop_indices(int n, std::uint64_t seed) {
  if (n < 1 || n > 10) throw Error("random_crops: n must lie in [1,10], got " + std::to_string(n));
  return sample_without_replacement(10, n, seed);
}

std::vector<SampleWindow> random_crop_windows(int height, int width, int n, std::uint64_t seed) {
  const auto all = ten_crop_windows(height, width);
  std::vector<SampleWindow> out;
  for (int i : random_crop_indices(n, seed)) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<Tensor> random_crops(const Tensor& image, int n, int out_h, int out_w, std::uint64_t seed) {
  std::vector<Tensor> crops;
  for (const auto& w : random_crop_windows(image.dim(1), image.dim(2), n, seed)) {
    crops.push_back(crop_window(image, w, out_h, out_w));
  }
  return crops;
}

double window_overlap_fraction(const SampleWindow& window, const BoundingBox& box) {
  const double ix = std::max(0.0, std::min(window.x0 + window.w, static_cast<double>(box.x0 + box.w)) -
                                      std::max(window.x0, static_cast<double>(box.x0)));
  const double iy = std::max(0.0, std::min(window.y0 + window.h, static_cast<double>(box.y0 + box.h)) -
                                      std::max(window.y0, static_cast<double>(box.y0)));
  return ix * iy / (window.w * window.h);
}

namespace {

// Offsets in box-relative units: the eight compass directions plus two
// shallower diagonals.
constexpr double kShiftDirections[10][2] = {{1, 0},  {-1, 0}, {0, 1},  {0, -1},  {1, 1},
                                            {1, -1}, {-1, 1}, {-1, -1}, {1, 0.5}, {-1, -0.5}};

// t with (1 - t|ux|)(1 - t|uy|) = 1 - fraction.
double shift_magnitude(double ux, double uy, double fraction) {
  if (fraction <= 0.0) return 0.0;
  double lo = 0.0, hi = 1.0 / std::max(std::abs(ux), std::abs(uy));
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double kept = (1.0 - mid * std::abs(ux)) * (1.0 - mid * std::abs(uy));
    if (kept > 1.0 - fraction) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double place_axis(double start, double shift, double size, double limit) {
  double pos = start + shift;
  if (pos < 0.0 || pos + size > limit) pos = start - shift;  // mirror
  return std::clamp(pos, 0.0, std::max(0.0, limit - size));
}

}  // namespace

std::vector<SampleWindow> shift_windows(const BoundingBox& box, int height, int width, int n,
                                        double background_fraction, std::uint64_t seed) {
  if (n < 1 || n > 10) throw Error("shift_crops: n must lie in [1,10], got " + std::to_string(n));
  if (!(background_fraction >= 0.0 && background_fraction < 1.0)) {
    throw Error("shift_crops: background_fraction must lie in [0,1)");
  }
  std::vector<int> picks(10);
  std::iota(picks.begin(), picks.end(), 0);
  if (n < 10) picks = sample_without_replacement(10, n, seed);
  std::vector<SampleWindow> out;
  for (int p : picks) {
    const double ux = kShiftDirections[p][0], uy = kShiftDirections[p][1];
    const double t = shift_magnitude(ux, uy, background_fraction);
    SampleWindow w = box_window(box);
    w.x0 = place_axis(box.x0, t * ux * box.w, box.w, width);
    w.y0 = place_axis(box.y0, t * uy * box.h, box.h, height);
    out.push_back(w);
  }
  return out;
}

std::vector<Tensor> shift_crops(const LabeledImage& img, int n, double background_fraction, int out_h,
                                int out_w, std::uint64_t seed) {
  if (img.boxes.empty()) throw Error("shift_crops: image '" + img.id + "' has no bounding box");
  std::vector<Tensor> crops;
  for (const auto& w : shift_windows(img.primary_box(), img.height(), img.width(), n, background_fraction, seed)) {
    crops.push_back(crop_window(img.image, w, out_h, out_w));
  }
  return crops;
}

Tensor embed_crop(const LabeledImage& full, const Tensor& crop) {
  if (full.boxes.empty()) throw Error("embed_crop: image '" + full.id + "' has no bounding box");
  const BoundingBox& b = full.primary_box();
  if (crop.rank() != 3 || crop.dim(0) != full.image.dim(0)) throw ShapeError("embed_crop: channel mismatch");
  const Tensor patch = kernels::bilinear_resize(crop, b.h, b.w);
  Tensor out = full.image;
  for (int c = 0; c < out.dim(0); ++c)
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) out.at(c, b.y0 + y, b.x0 + x) = patch.at(c, y, x);
  return out;
}

Tensor saliency_map(const Classifier& model, const Tensor& image) {
  const auto logits = model.logits(image);
  const int top = ClassScores{logits, ScoreStage::PreSoftmax}.top_class();
  Tensor grad;
  model.logits_and_gradient(image, top, grad);
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor mag({H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float m = 0.0f;
      for (int c = 0; c < C; ++c) m = std::max(m, std::abs(grad.at(c, y, x)));
      mag[static_cast<std::size_t>(y) * W + x] = m;
    }
  // 5x5 box blur over the in-image neighbourhood
  Tensor blurred({H, W});
  float peak = 0.0f;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double sum = 0.0;
      int count = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          sum += mag[static_cast<std::size_t>(yy) * W + xx];
          ++count;
        }
      const float v = static_cast<float>(sum / count);
      blurred[static_cast<std::size_t>(y) * W + x] = v;
      peak = std::max(peak, v);
    }
  if (peak > 0.0f) {
    for (float& v : blurred.values()) v /= peak;
  }
  return blurred;
}

std::vector<SampleWindow> saliency_windows(const Tensor& map, int n, std::uint64_t seed, double fraction) {
  if (n < 1) throw Error("saliency_crops: n must be >= 1");
  if (map.rank() != 2) throw ShapeError("saliency map must be [H,W]");
  const int H = map.dim(0), W = map.dim(1);
  const double ww = fraction * W, wh = fraction * H;
  auto window_at = [&](double cx, double cy) {
    SampleWindow w{cx - ww / 2, cy - wh / 2, ww, wh, false};
    w.x0 = std::clamp(w.x0, 0.0, W - ww);
    w.y0 = std::clamp(w.y0, 0.0, H - wh);
    return w;
  };

  struct Point {
    double x, y, weight;
  };
  std::vector<Point> pts;
  double total = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double s = map[static_cast<std::size_t>(y) * W + x];
      if (s > 0.0) {
        pts.push_back({x + 0.5, y + 0.5, s});
        total += s;
      }
    }
  if (pts.empty() || !(total > 0.0)) {
    return std::vector<SampleWindow>(static_cast<std::size_t>(n), window_at(W / 2.0, H / 2.0));
  }

  // k-means++ seeding, then Lloyd iterations on saliency-weighted coordinates
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](const std::vector<double>& w) {
    double sum = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(sum > 0.0)) return std::size_t{0};
    double r = unit(rng) * sum;
    for (std::size_t i = 0; i < w.size(); ++i) {
      r -= w[i];
      if (r <= 0.0) return i;
    }
    return w.size() - 1;
  };
  std::vector<std::pair<double, double>> centers;
  std::vector<double> weights(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) weights[i] = pts[i].weight;
  const std::size_t first = draw(weights);
  centers.emplace_back(pts[first].x, pts[first].y);
  while (static_cast<int>(centers.size()) < n) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = 1e300;
      for (const auto& [cx, cy] : centers) {
        best = std::min(best, (pts[i].x - cx) * (pts[i].x - cx) + (pts[i].y - cy) * (pts[i].y - cy));
      }
      weights[i] = pts[i].weight * best;
    }
    const std::size_t pick = draw(weights);
    centers.emplace_back(pts[pick].x, pts[pick].y);
  }
  for (int iter = 0; iter < 20; ++iter) {
    std::vector<double> sx(centers.size(), 0.0), sy(centers.size(), 0.0), sw(centers.size(), 0.0);
    for (const auto& p : pts) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double d = (p.x - centers[k].first) * (p.x - centers[k].first) +
                         (p.y - centers[k].second) * (p.y - centers[k].second);
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      sx[best] += p.weight * p.x;
      sy[best] += p.weight * p.y;
      sw[best] += p.weight;
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (sw[k] > 0.0) centers[k] = {sx[k] / sw[k], sy[k] / sw[k]};
    }
  }
  std::vector<SampleWindow> out;
  for (const auto& [cx, cy] : centers) out.push_back(window_at(cx, cy));
  return out;
}

std::vector<Tensor> saliency_crops(const Classifier& model, const LabeledImage& img, int n, int out_h,
                                   int out_w, std::uint64_t seed) {
  std::vector<Tensor> crops;
  for (const auto& w : saliency_windows(saliency_map(model, img.image), n, seed)) {
    crops.push_back(crop_window(img.image, w, out_h, out_w));
  }
  return crops;
}

ClassScores average_scores(const std::vector<ClassScores>& scores) {
  if (scores.empty()) throw Error("average_scores: empty list");
  const ScoreStage stage = scores.front().stage;
  const std::size_t k = scores.front().size();
  std::vector<double> acc(k, 0.0);
  for (const auto& s : scores) {
    if (s.stage != stage) throw Error("average_scores: mixed pre/post-softmax stages");
    if (s.size() != k) throw ShapeError("average_scores: length mismatch");
    for (std::size_t i = 0; i < k; ++i) acc[i] += s.scores[i];
  }
  ClassScores out{std::vector<float>(k), stage};
  for (std::size_t i = 0; i < k; ++i) out.scores[i] = static_cast<float>(acc[i] / static_cast<double>(scores.size()));
  return out;
}

std::vector<SampleWindow> foveation_windows(const FoveationSpec& spec, const LabeledImage& img,
                                            const Tensor& image, const Classifier* saliency_model) {
  spec.validate();
  const int H = image.dim(1), W = image.dim(2);
  switch (spec.variant) {
    case FoveationKind::Identity: return {full_window(H, W)};
    case FoveationKind::ObjectCrop: {
      if (img.boxes.empty()) throw Error("object_crop: image '" + img.id + "' has no bounding box");
      std::vector<SampleWindow> out;
      for (const auto& b : img.boxes) {
        if (b.w < 2 || b.h < 2) throw Error("crop_resize: degenerate box");
        out.push_back(box_window(b));
      }
      return out;
    }
    case FoveationKind::TenCrop: return ten_crop_windows(H, W);
    case FoveationKind::RandomCrops: return random_crop_windows(H, W, spec.n, spec.seed);
    case FoveationKind::ShiftCrops:
      if (img.boxes.empty()) throw Error("shift_crops: image '" + img.id + "' has no bounding box");
      return shift_windows(img.primary_box(), H, W, spec.n, spec.background_fraction, spec.seed);
    case FoveationKind::SaliencyCrops:
      if (!saliency_model) throw Error("saliency_crops: no model for the saliency map");
      return saliency_windows(saliency_map(*saliency_model, image), spec.n, spec.seed);
    case FoveationKind::Embed: break;
  }
  throw Error("embed is not a crop-window foveation");
}

FoveatedClassifier::FoveatedClassifier(const Classifier& base, std::vector<SampleWindow> windows,
                                       Shape image_shape)
    : base_(&base), windows_(std::move(windows)), image_shape_(std::move(image_shape)) {
  if (windows_.empty()) throw Error("FoveatedClassifier: no windows");
  const Shape in = base.input_shape();
  out_h_ = in.at(1);
  out_w_ = in.at(2);
}

std::vector<float> FoveatedClassifier::logits(const Tensor& image) const {
  std::vector<ClassScores> per;
  for (const auto& w : windows_) per.push_back({base_->logits(crop_window(image, w, out_h_, out_w_)), ScoreStage::PreSoftmax});
  return average_scores(per).scores;
}

std::vector<float> FoveatedClassifier::logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const {
  std::vector<ClassScores> per;
  grad = Tensor(image.shape());
  const float inv = 1.0f / static_cast<float>(windows_.size());
  for (const auto& w : windows_) {
    Tensor g;
    per.push_back({base_->logits_and_gradient(crop_window(image, w, out_h_, out_w_), cls, g), ScoreStage::PreSoftmax});
    axpy(inv, kernels::resample_adjoint(g, w, image.shape()), grad);
  }
  return average_scores(per).scores;
}

}  // namespace fovea

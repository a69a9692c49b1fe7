#include <gtest/gtest.h>

#include <cmath>

#include "checks.hpp"
#include "fovea/dataset.hpp"
#include "fovea/foveation.hpp"
#include "fovea/kernels.hpp"
#include "fovea/rng.hpp"

using namespace fovea;
using checks::random_image;
using checks::random_tensor;

namespace {

// Smooth content: low-frequency sinusoids, so resize round trips stay small.
Tensor smooth_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 6.28);
  Tensor t({3, h, w});
  for (int c = 0; c < 3; ++c) {
    const double p = u(rng), q = u(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(c, y, x) = static_cast<float>(128 + 60 * std::sin(0.15 * x + p) * std::cos(0.12 * y + q));
  }
  return t;
}

FoveationSpec make_spec(FoveationKind kind, int n = 1, std::uint64_t seed = 0) {
  FoveationSpec s;
  s.variant = kind;
  s.n = n;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(CropResize, Examples) {
  const Tensor x = random_image({3, 32, 32}, 1);
  EXPECT_LT(max_abs_difference(crop_resize(x, {0, 0, 32, 32}, 32, 32), x), 1e-4);
  const Tensor e = random_tensor({3, 32, 32}, 2, -10, 10);
  const BoundingBox b{3, 5, 17, 20};
  const Tensor r = subtract(crop_resize(add(x, e), b, 32, 32), add(crop_resize(x, b, 32, 32), crop_resize(e, b, 32, 32)));
  EXPECT_LT(norms(r).linf, 1e-4);
  EXPECT_LT(max_abs_difference(crop_resize(Tensor({3, 32, 32}, 77.0f), b, 32, 32), Tensor({3, 32, 32}, 77.0f)), 1e-4);
  EXPECT_THROW(crop_resize(x, {3, 3, 1, 10}, 32, 32), Error);
}

TEST(ObjectCrop, Examples) {
  LabeledImage img = checks::random_labeled_image(3);
  const auto one = object_crop(img, 32, 32);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], crop_resize(img.image, img.boxes[0], 32, 32));
  img.boxes.push_back(img.boxes[0]);
  const auto two = object_crop(img, 32, 32);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0], two[1]);
  img.boxes.clear();
  EXPECT_THROW(object_crop(img, 32, 32), Error);
}

TEST(ObjectCrop, BoxHoldsTheObject) {
  SyntheticSpec spec;
  spec.num_images = 100;
  for (const auto& img : generate_synthetic(spec)) {
    ASSERT_TRUE(img.object_mask.has_value());
    const auto& m = *img.object_mask;
    const BoundingBox& b = img.primary_box();
    double inside = 0.0, total = 0.0;
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        const double v = m.at(0, y, x);
        total += v;
        if (x >= b.x0 && x < b.x0 + b.w && y >= b.y0 && y < b.y0 + b.h) inside += v;
      }
    ASSERT_GT(total, 0.0);
    EXPECT_GE(inside / total, 0.99) << img.id;
  }
}

TEST(Mask, PartitionAndSupport) {
  EXPECT_TRUE(checks::mask_partition_check(100, 4).pass());
  const Tensor e = random_tensor({3, 32, 32}, 5, -5, 5);
  EXPECT_EQ(mask_perturbation(e, {0, 0, 32, 32}, MaskMode::Object), e);
  const BoundingBox b{4, 6, 10, 12};
  const double l1 = norms(e).l1_per_pixel;
  const double parts = norms(mask_perturbation(e, b, MaskMode::Object)).l1_per_pixel +
                       norms(mask_perturbation(e, b, MaskMode::Background)).l1_per_pixel;
  EXPECT_NEAR(parts, l1, 1e-6 * l1);
  const Tensor m = box_mask(e.shape(), b, MaskMode::Object);
  const Tensor c = box_mask(e.shape(), b, MaskMode::Background);
  EXPECT_EQ(add(m, c), Tensor(e.shape(), 1.0f));
}

TEST(TenCrop, FlipsAndArea) {
  const auto w = ten_crop_windows(32, 32);
  ASSERT_EQ(w.size(), 10u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_FALSE(w[i].flip);
    EXPECT_TRUE(w[i + 5].flip);
    EXPECT_EQ(w[i].x0, w[i + 5].x0);
    EXPECT_EQ(w[i].y0, w[i + 5].y0);
    const double discarded = 1.0 - w[i].w * w[i].h / (32.0 * 32.0);
    EXPECT_GE(discarded, 0.19);
    EXPECT_LE(discarded, 0.23);
  }
  const Tensor x = random_image({3, 32, 32}, 6);
  const auto crops = ten_crop(x, 32, 32);
  for (int i = 0; i < 5; ++i) {
    Tensor mirrored = crops[i];
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int xx = 0; xx < 32; ++xx) mirrored.at(c, y, xx) = crops[i].at(c, y, 31 - xx);
    EXPECT_LT(max_abs_difference(mirrored, crops[i + 5]), 1e-4);
  }
  // Corners clamp to the image edges.
  EXPECT_EQ(w[0].x0, 0.0);
  EXPECT_EQ(w[0].y0, 0.0);
  EXPECT_NEAR(w[3].x0 + w[3].w, 32.0, 1e-9);
  EXPECT_NEAR(w[3].y0 + w[3].h, 32.0, 1e-9);
}

TEST(TenCrop, SymmetricCentreEqualsItsFlip) {
  Tensor x({3, 32, 32});
  const Tensor half = random_image({3, 32, 16}, 7);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int xx = 0; xx < 16; ++xx) x.at(c, y, xx) = x.at(c, y, 31 - xx) = half.at(c, y, xx);
  const auto crops = ten_crop(x, 32, 32);
  EXPECT_LT(max_abs_difference(crops[4], crops[9]), 1e-4);
}

TEST(RandomCrops, Selection) {
  auto all = random_crop_indices(10, 3);
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(random_crop_indices(3, 42), random_crop_indices(3, 42));
  EXPECT_THROW(random_crop_indices(11, 1), Error);
  const Tensor x = random_image({3, 32, 32}, 8);
  const auto crops = random_crops(x, 3, 32, 32, 5);
  const auto ten = ten_crop(x, 32, 32);
  const auto idx = random_crop_indices(3, 5);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(crops[i], ten[idx[i]]);
}

TEST(RandomCrops, FrequenciesUniform) {
  std::vector<int> counts(10, 0);
  const int trials = 10000, n = 3;
  for (int s = 0; s < trials; ++s)
    for (int i : random_crop_indices(n, derive_seed(99, {static_cast<std::uint64_t>(s)}))) ++counts[i];
  const double p = n / 10.0, mean = trials * p, sigma = std::sqrt(trials * p * (1 - p));
  for (int c : counts) EXPECT_LT(std::abs(c - mean), 3 * sigma);
}

TEST(ShiftCrops, OverlapAndBounds) {
  for (int t = 0; t < 200; ++t) {
    const LabeledImage img = checks::random_labeled_image(1000 + t);
    const BoundingBox& b = img.primary_box();
    const auto ws = shift_windows(b, 32, 32, 10, 0.12, t);
    ASSERT_EQ(ws.size(), 10u);
    for (const auto& w : ws) {
      EXPECT_NEAR(w.w, b.w, 1e-9);
      EXPECT_NEAR(w.h, b.h, 1e-9);
      EXPECT_GE(w.x0, -1e-9);
      EXPECT_GE(w.y0, -1e-9);
      EXPECT_LE(w.x0 + w.w, 32 + 1e-9);
      EXPECT_LE(w.y0 + w.h, 32 + 1e-9);
      // Clamping can only keep the window closer to the box.
      EXPECT_GE(window_overlap_fraction(w, b), 0.86);
    }
  }
}

TEST(ShiftCrops, ExactFractionWhenUnclamped) {
  LabeledImage img;
  img.image = random_image({3, 32, 32}, 9);
  img.boxes = {{10, 10, 12, 12}};
  for (const auto& w : shift_windows(img.boxes[0], 32, 32, 10, 0.12, 0)) {
    EXPECT_NEAR(window_overlap_fraction(w, img.boxes[0]), 0.88, 0.02);
  }
}

TEST(ShiftCrops, Examples) {
  LabeledImage img = checks::random_labeled_image(10);
  const auto zero = shift_crops(img, 10, 0.0, 32, 32, 1);
  const Tensor obj = object_crop(img, 32, 32)[0];
  for (const auto& c : zero) EXPECT_EQ(c, obj);
  EXPECT_EQ(shift_crops(img, 1, 0.12, 32, 32, 4), shift_crops(img, 1, 0.12, 32, 32, 4));
  EXPECT_EQ(shift_crops(img, 1, 0.12, 32, 32, 4).size(), 1u);
  img.boxes.clear();
  EXPECT_THROW(shift_crops(img, 1, 0.12, 32, 32, 4), Error);
}

TEST(Embed, RoundTrips) {
  // Bilinear samples within half a pixel of the box edge blend in pixels
  // outside it, so the round-trip bound is checked away from that rim.
  for (int t = 0; t < 20; ++t) {
    LabeledImage img = checks::random_labeled_image(2000 + t);
    img.image = smooth_image(32, 32, 3000 + t);
    const BoundingBox& b = img.primary_box();
    const Tensor crop = object_crop(img, 32, 32)[0];
    const Tensor back = embed_crop(img, crop);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          const bool in = x >= b.x0 && x < b.x0 + b.w && y >= b.y0 && y < b.y0 + b.h;
          const bool rim = x == b.x0 || x == b.x0 + b.w - 1 || y == b.y0 || y == b.y0 + b.h - 1;
          if (!in) {
            EXPECT_EQ(back.at(c, y, x), img.image.at(c, y, x));
          } else if (!rim) {
            EXPECT_LT(std::abs(back.at(c, y, x) - img.image.at(c, y, x)), 1.0f);
          }
        }
    // Embedding a perturbed crop and cropping again recovers it.
    const Tensor pert = add(crop, scaled(smooth_image(32, 32, 4000 + t), 0.05f));
    LabeledImage embedded = img;
    embedded.image = embed_crop(img, pert);
    const Tensor again = object_crop(embedded, 32, 32)[0];
    auto interior = [](int j, int extent) {
      const double src = (j + 0.5) * extent / 32.0 - 0.5;  // box pixel-centre coordinate
      return src >= 0.0 && src <= extent - 1.0;
    };
    double worst = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          if (interior(x, b.w) && interior(y, b.h)) {
            worst = std::max(worst, static_cast<double>(std::abs(again.at(c, y, x) - pert.at(c, y, x))));
          }
        }
    EXPECT_LT(worst, 1.0);
  }
  LabeledImage nobox = checks::random_labeled_image(11);
  nobox.boxes.clear();
  EXPECT_THROW(embed_crop(nobox, Tensor({3, 32, 32})), Error);
}

TEST(Saliency, ZeroModelAndRange) {
  const Network zero(ModelSpec::desk());
  const NetworkClassifier zc(zero);
  const Tensor x = random_image({3, 32, 32}, 12);
  EXPECT_EQ(saliency_map(zc, x), Tensor({32, 32}));
  const Network net = checks::small_conv_net(3, 32, 32, 10, 13);
  const NetworkClassifier clf(net);
  const Tensor m = saliency_map(clf, x);
  ASSERT_EQ(m.shape(), (Shape{32, 32}));
  float hi = 0.0f;
  for (float v : m.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
    hi = std::max(hi, v);
  }
  EXPECT_FLOAT_EQ(hi, 1.0f);
}

TEST(Saliency, WindowsFollowBlobAndFallBack) {
  Tensor blob({32, 32});
  for (int y = 18; y < 23; ++y)
    for (int x = 6; x < 11; ++x) blob[static_cast<std::size_t>(y) * 32 + x] = 1.0f;
  // 0.6 of the side is 19.2 px; centred on (8.5, 20.5) then clamped inside.
  const auto w = saliency_windows(blob, 1, 3);
  ASSERT_EQ(w.size(), 1u);
  const double cx = std::clamp(8.5, 9.6, 32 - 9.6), cy = std::clamp(20.5, 9.6, 32 - 9.6);
  EXPECT_NEAR(w[0].x0 + w[0].w / 2, cx, 2.0);
  EXPECT_NEAR(w[0].y0 + w[0].h / 2, cy, 2.0);
  Tensor small_blob({32, 32});
  small_blob[15 * 32 + 14] = 1.0f;
  const auto c = saliency_windows(small_blob, 1, 3);
  EXPECT_NEAR(c[0].x0 + c[0].w / 2, 14.5, 2.0);
  EXPECT_NEAR(c[0].y0 + c[0].h / 2, 15.5, 2.0);

  const auto fallback = saliency_windows(Tensor({32, 32}), 2, 3);
  ASSERT_EQ(fallback.size(), 2u);
  for (const auto& f : fallback) {
    EXPECT_NEAR(f.x0 + f.w / 2, 16.0, 1e-9);
    EXPECT_NEAR(f.y0 + f.h / 2, 16.0, 1e-9);
  }
  const Tensor map = random_tensor({32, 32}, 14, 0.0, 1.0);
  EXPECT_EQ(saliency_windows(map, 3, 8), saliency_windows(map, 3, 8));
}

TEST(AverageScores, Examples) {
  const ClassScores a{{1.0f, 0.0f}, ScoreStage::PostSoftmax};
  const ClassScores b{{0.0f, 1.0f}, ScoreStage::PostSoftmax};
  EXPECT_EQ(average_scores({a}).scores, a.scores);
  EXPECT_EQ(average_scores({a, a}).scores, a.scores);
  EXPECT_EQ(average_scores({a, b}).scores, (std::vector<float>{0.5f, 0.5f}));
  EXPECT_THROW(average_scores({a, ClassScores{{0.0f, 1.0f}, ScoreStage::PreSoftmax}}), Error);
  EXPECT_THROW(average_scores({}), Error);
}

TEST(Foveation, LinearityOfEveryCropTransform) {
  for (const auto& r : checks::linearity_checks(100, 15)) {
    EXPECT_GE(r.probes, 100) << r.name;
    EXPECT_TRUE(r.pass()) << r.name << " residual " << r.worst;
  }
}

TEST(Foveation, OutputShapesAndDeterminism) {
  const Network net = checks::small_conv_net(3, 32, 32, 10, 16);
  const NetworkClassifier clf(net);
  const LabeledImage img = checks::random_labeled_image(17);
  for (auto kind : {FoveationKind::Identity, FoveationKind::ObjectCrop, FoveationKind::TenCrop,
                    FoveationKind::RandomCrops, FoveationKind::ShiftCrops, FoveationKind::SaliencyCrops}) {
    FoveationSpec s = make_spec(kind, 3, 21);
    s.out_h = 24;
    s.out_w = 20;
    const auto a = foveation_windows(s, img, img.image, &clf);
    const auto b = foveation_windows(s, img, img.image, &clf);
    EXPECT_EQ(a, b) << to_string(kind);
    for (const auto& w : a) EXPECT_EQ(crop_window(img.image, w, s.out_h, s.out_w).shape(), (Shape{3, 24, 20}));
  }
  EXPECT_THROW(foveation_windows(make_spec(FoveationKind::Embed), img, img.image, &clf), Error);
}

namespace {

// Smooth nonlinear scores: s_k = sum_i w_ki tanh(x_i / 64 - 2).
class TanhClassifier : public Classifier {
 public:
  explicit TanhClassifier(std::uint64_t seed) : w_(random_tensor({10, 3 * 32 * 32}, seed)) {}
  Shape input_shape() const override { return {3, 32, 32}; }
  int num_classes() const override { return 10; }
  std::vector<float> logits(const Tensor& image) const override {
    std::vector<float> s(10, 0.0f);
    for (int k = 0; k < 10; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < image.size(); ++i) acc += w_[k * image.size() + i] * std::tanh(image[i] / 64.0 - 2.0);
      s[k] = static_cast<float>(acc);
    }
    return s;
  }
  std::vector<float> logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const override {
    grad = Tensor(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double t = std::tanh(image[i] / 64.0 - 2.0);
      grad[i] = static_cast<float>(w_[cls * image.size() + i] * (1.0 - t * t) / 64.0);
    }
    return logits(image);
  }

 private:
  Tensor w_;
};

double foveated_fd_error(const Classifier& base, int probes) {
  double worst = 0.0;
  for (int t = 0; t < probes; ++t) {
    const LabeledImage img = checks::random_labeled_image(5000 + t);
    const auto windows = foveation_windows(make_spec(FoveationKind::TenCrop), img, img.image, nullptr);
    const FoveatedClassifier fc(base, windows, img.image.shape());
    Tensor g;
    fc.logits_and_gradient(img.image, t % 10, g);
    const Tensor d = random_tensor(img.image.shape(), 6000 + t);
    const double h = 0.5;
    const double num = (fc.logits(add(img.image, scaled(d, h)))[t % 10] -
                        fc.logits(add(img.image, scaled(d, -h)))[t % 10]) / (2 * h);
    const double ana = dot(g, d);
    double terms = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) terms += std::abs(static_cast<double>(g[i]) * d[i]);
    worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), terms, 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(FoveatedClassifier, GradientMatchesFiniteDifferences) {
  const Network lin = checks::linear_net(3, 32, 32, 10, 19);
  EXPECT_LT(foveated_fd_error(NetworkClassifier(lin), 100), 1e-3);
  EXPECT_LT(foveated_fd_error(TanhClassifier(18), 100), 1e-3);
}

TEST(FoveationSpec, TextRoundTripAndErrors) {
  std::vector<FoveationSpec> specs = {identity_spec(), object_crop_spec(), make_spec(FoveationKind::TenCrop),
                                      make_spec(FoveationKind::RandomCrops, 3, 11),
                                      make_spec(FoveationKind::SaliencyCrops, 3, 13),
                                      make_spec(FoveationKind::ShiftCrops, 1, 19), make_spec(FoveationKind::Embed)};
  specs[5].background_fraction = 0.2;
  EXPECT_EQ(foveation_specs_from_text(foveation_specs_to_text(specs)), specs);
  const auto parsed = foveation_specs_from_text("- shift_crops: {}\n- random_crops:\n- object_crop: {out: [24, 28]}\n");
  ASSERT_EQ(parsed.size(), 3u);
  EXPECT_EQ(parsed[0].n, 10);
  EXPECT_EQ(parsed[1].n, 3);
  EXPECT_EQ(parsed[2].out_h, 24);
  EXPECT_EQ(parsed[2].out_w, 28);
  EXPECT_THROW(foveation_specs_from_text("- object_crop: {colour: red}\n"), ParseError);
  EXPECT_THROW(foveation_specs_from_text("- fisheye: {}\n"), ParseError);
  EXPECT_THROW(foveation_specs_from_text("- shift_crops: {n: 11}\n"), Error);
  EXPECT_THROW(foveation_specs_from_text("- shift_crops: {background_fraction: 1.0}\n"), Error);
}

TEST(FoveationSpec, ConditionNames) {
  EXPECT_EQ(object_crop_spec().condition_name(), "Object Crop MP");
  EXPECT_EQ(make_spec(FoveationKind::ShiftCrops, 1).condition_name(), "1 Shift MP-Object");
  EXPECT_EQ(make_spec(FoveationKind::ShiftCrops, 10).condition_name(), "10 Shift MP-Object");
  EXPECT_EQ(make_spec(FoveationKind::Embed).condition_name(), "Embedded MP-Object");
  EXPECT_EQ(make_spec(FoveationKind::RandomCrops, 3).condition_name(), "3 Crop MP");
  EXPECT_EQ(make_spec(FoveationKind::SaliencyCrops, 3).condition_name(), "Saliency Crop MP");
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "checks.hpp"
#include "fovea/attack.hpp"
#include "fovea/rng.hpp"

using namespace fovea;

namespace {

// Random conv net on 3x8x8 inputs; images are labelled with its own top class.
struct Toy {
  Network net = checks::small_conv_net(3, 8, 8, 5, 31);
  NetworkClassifier clf{net};

  LabeledImage image(std::uint64_t seed) const {
    LabeledImage img;
    img.id = "toy" + std::to_string(seed);
    img.image = checks::random_tensor({3, 8, 8}, seed, 40.0, 215.0);
    img.label = predict_scores(clf, img.image, ScoreStage::PreSoftmax).top_class();
    return img;
  }
};

int wrong_label(const Classifier& clf, const Tensor& x) {
  const auto r = ranking(clf.logits(x));
  return r.back();
}

}  // namespace

TEST(Hinge, AlreadyMisclassifiedIsZero) {
  const Toy toy;
  const LabeledImage img = toy.image(1);
  AttackConfig cfg;
  const HingeResult h = hinge_loss_and_grad(toy.clf, img.image, Tensor(img.image.shape()),
                                            wrong_label(toy.clf, img.image), cfg);
  EXPECT_TRUE(h.misclassified);
  EXPECT_EQ(h.loss, 0.0);
  EXPECT_EQ(h.grad, Tensor(img.image.shape()));
}

TEST(Hinge, ZeroPerturbationGivesLabelScore) {
  const Toy toy;
  const LabeledImage img = toy.image(2);
  const HingeResult h = hinge_loss_and_grad(toy.clf, img.image, Tensor(img.image.shape()), img.label, AttackConfig{});
  EXPECT_FALSE(h.misclassified);
  EXPECT_FLOAT_EQ(static_cast<float>(h.loss), predict_scores(toy.clf, img.image, ScoreStage::PreSoftmax)[img.label]);
}

TEST(Hinge, GradientMatchesFiniteDifferences) {
  const Toy toy;
  AttackConfig cfg;
  cfg.k_top = 5;  // keep the hinge active for every probe
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const LabeledImage img = toy.image(100 + i);
    const Tensor eps = checks::random_tensor(img.image.shape(), 200 + i, -3.0, 3.0);
    const HingeResult h = hinge_loss_and_grad(toy.clf, img.image, eps, img.label, cfg);
    const Tensor d = checks::random_tensor(img.image.shape(), 300 + i);
    // largest step on which the net stays one affine map, so float rounding
    // does not swamp the small pixel-scale derivative
    double hstep = 1.0;
    Tensor ep, em;
    for (;; hstep *= 0.5) {
      ep = eps;
      em = eps;
      axpy(static_cast<float>(hstep), d, ep);
      axpy(static_cast<float>(-hstep), d, em);
      const Tensor x0 = add(img.image, eps);
      if (hstep < 1e-4 || (checks::same_activation_pattern(toy.net, x0, add(img.image, ep)) &&
                           checks::same_activation_pattern(toy.net, x0, add(img.image, em)))) {
        break;
      }
    }
    const double numeric = (hinge_loss_and_grad(toy.clf, img.image, ep, img.label, cfg).loss -
                            hinge_loss_and_grad(toy.clf, img.image, em, img.label, cfg).loss) /
                           (2 * hstep);
    const double analytic = dot(h.grad, d);
    double terms = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) terms += std::abs(static_cast<double>(h.grad[k]) * d[k]);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(analytic), std::abs(numeric), terms, 1e-6}));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Hinge, GradientZeroWhereClampActive) {
  const Toy toy;
  LabeledImage img = toy.image(3);
  img.image[0] = 255.0f;
  img.image[1] = 0.0f;
  Tensor eps(img.image.shape());
  eps[0] = 10.0f;
  eps[1] = -10.0f;
  AttackConfig cfg;
  cfg.k_top = 5;
  const HingeResult h = hinge_loss_and_grad(toy.clf, img.image, eps, img.label, cfg);
  EXPECT_EQ(h.grad[0], 0.0f);
  EXPECT_EQ(h.grad[1], 0.0f);
}

TEST(LineSearch, NeverMisclassifyingDirectionIsNotFound) {
  ModelSpec spec;
  spec.input = {1, 2, 2};
  spec.layers = {DenseLayer{3}};
  Network net(spec);
  net.params()[0].bias[1] = 1.0f;
  const NetworkClassifier clf(net);
  const LineSearchResult r =
      line_search_min_norm(clf, Tensor({1, 2, 2}, 100.0f), 1, Tensor({1, 2, 2}, 1.0f), NormKind::LInf, AttackConfig{});
  EXPECT_FALSE(r.found);
  EXPECT_THROW(line_search_min_norm(clf, Tensor({1, 2, 2}), 1, Tensor({1, 2, 2}), NormKind::LInf, AttackConfig{}),
               Error);
}

TEST(LineSearch, BracketIsTightAndMinimal) {
  const Toy toy;
  AttackConfig cfg;
  int tested = 0;
  for (int i = 0; i < 30; ++i) {
    const LabeledImage img = toy.image(400 + i);
    const HingeResult h = hinge_loss_and_grad(toy.clf, img.image, Tensor(img.image.shape()), img.label, cfg);
    const Tensor dir = scaled(sign_direction(h.grad), -1.0f);
    const LineSearchResult r = line_search_min_norm(toy.clf, img.image, img.label, dir, NormKind::LInf, cfg);
    if (!r.found) continue;
    ++tested;
    const Tensor unit = scaled(dir, 1.0f / static_cast<float>(norm_of(dir, NormKind::LInf)));
    EXPECT_TRUE(misclassifies(toy.clf, img.image, scaled(unit, static_cast<float>(r.alpha_star)), img.label, cfg));
    if (r.alpha_low > 0.0) {
      EXPECT_FALSE(misclassifies(toy.clf, img.image, scaled(unit, static_cast<float>(r.alpha_low)), img.label, cfg));
    }
    // Bisection shrinks one grid step (or [0, grid.min]) by 2^-8.
    const double step = std::max(r.alpha_star * (cfg.grid.factor - 1.0), cfg.grid.min);
    EXPECT_LE(r.alpha_star - r.alpha_low, step / 256.0 * 1.0001 + 1e-12);
    // Any grid point that misclassifies bounds alpha* from above.
    for (double a : cfg.grid.values(cfg.grid.max)) {
      if (misclassifies(toy.clf, img.image, scaled(unit, static_cast<float>(a)), img.label, cfg)) {
        EXPECT_LE(r.alpha_star, a);
        break;
      }
    }
  }
  EXPECT_GT(tested, 20);
}

TEST(AlphaGrid, GeometricAndIncreasing) {
  const AlphaGrid g;
  const auto v = g.values(g.max);
  EXPECT_DOUBLE_EQ(v.front(), 0.1);
  for (std::size_t i = 1; i < v.size(); ++i) EXPECT_NEAR(v[i] / v[i - 1], std::pow(2.0, 0.25), 1e-9);
  EXPECT_LE(v.back(), 512.0 * (1 + 1e-9));
  AttackConfig bad;
  bad.eta = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = AttackConfig{};
  bad.grid.factor = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(SignDirection, ConstructionAndScaleInvariance) {
  const Tensor g({5}, {-2.0f, 0.0f, 3.0f, 1e-8f, -1e-9f});
  EXPECT_EQ(sign_direction(g).vec(), (std::vector<float>{-1, 0, 1, 1, -1}));
  for (int i = 0; i < 20; ++i) {
    const Tensor r = checks::random_tensor({50}, 500 + i);
    EXPECT_EQ(sign_direction(r), sign_direction(scaled(r, 3.7f)));
  }
}

TEST(SignDirection, PositiveGradientModel) {
  ModelSpec spec;
  spec.input = {1, 2, 2};
  spec.layers = {DenseLayer{2}};
  Network net(spec);
  for (int i = 0; i < 4; ++i) net.params()[0].weights[i] = 0.5f + i;
  const NetworkClassifier clf(net);
  const HingeResult h = hinge_loss_and_grad(clf, Tensor({1, 2, 2}, 10.0f), Tensor({1, 2, 2}), 0, AttackConfig{});
  EXPECT_EQ(sign_direction(h.grad), Tensor({1, 2, 2}, 1.0f));
}

TEST(SignAttack, RecordInvariants) {
  const Toy toy;
  AttackConfig cfg;
  for (int i = 0; i < 20; ++i) {
    const LabeledImage img = toy.image(600 + i);
    const PerturbationRecord r = run_attack(AttackKind::Sign, toy.clf, img, cfg);
    ASSERT_TRUE(r.misclassified) << i;
    EXPECT_EQ(r.norm_kind, NormKind::LInf);
    EXPECT_EQ(r.image_id, img.id);
    EXPECT_TRUE(misclassifies(toy.clf, img.image, r.epsilon, img.label, cfg));
    EXPECT_NEAR(r.norm_value, norms(r.epsilon).linf, 1e-5 * r.norm_value);
    // Interior images: no clamping, so every moved pixel moves by alpha*.
    for (float v : r.epsilon.values()) {
      if (v != 0.0f) {
        EXPECT_NEAR(std::abs(v), r.alpha_star, 1e-4 * r.alpha_star);
      }
    }
  }
}

TEST(BfgsAttack, AlreadyMisclassifiedReturnsZero) {
  const Toy toy;
  LabeledImage img = toy.image(7);
  img.label = wrong_label(toy.clf, img.image);
  const PerturbationRecord r = run_attack(AttackKind::BFGS, toy.clf, img, AttackConfig{});
  EXPECT_TRUE(r.misclassified_from_start);
  EXPECT_TRUE(r.misclassified);
  EXPECT_EQ(r.norm_value, 0.0);
  EXPECT_EQ(r.epsilon, Tensor(img.image.shape()));
}

TEST(BfgsAttack, RecordsVerifyAndObjectiveDescends) {
  const Toy toy;
  AttackConfig cfg;
  int ok = 0;
  for (int i = 0; i < 20; ++i) {
    const LabeledImage img = toy.image(800 + i);
    std::vector<double> history;
    PerturbationRecord r = bfgs_perturbation(toy.clf, img.image, img.label, cfg, &history);
    ASSERT_GE(history.size(), 1u);
    for (std::size_t k = 1; k < history.size(); ++k) EXPECT_LE(history[k], history[k - 1]);
    if (!r.misclassified) continue;
    ++ok;
    EXPECT_EQ(r.norm_kind, NormKind::L1PerPixel);
    EXPECT_TRUE(misclassifies(toy.clf, img.image, r.epsilon, img.label, cfg));
    const Tensor xe = add(img.image, r.epsilon);
    for (float v : xe.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 255.0f);
    }
    EXPECT_NEAR(r.norm_value, norms(r.epsilon).l1_per_pixel, 1e-5 * r.norm_value);
    const double fine = checks::rescan_min_alpha(toy.clf, img.image, img.label, r.epsilon, NormKind::L1PerPixel,
                                                 cfg, r.norm_value * 1.02, std::pow(2.0, 1.0 / 64));
    ASSERT_GT(fine, 0.0);
    EXPECT_LE(r.alpha_star, fine * cfg.grid.factor);
  }
  EXPECT_GE(ok, 19);
}

TEST(Perceptibility, Thresholds) {
  EXPECT_EQ(perceptibility(AttackKind::BFGS, NormKind::L1PerPixel, 16.0), Perceptibility::Perceptible);
  EXPECT_EQ(perceptibility(AttackKind::Sign, NormKind::LInf, 5.33), Perceptibility::Imperceptible);
  EXPECT_EQ(perceptibility(AttackKind::BFGS, NormKind::LInf, 100.0), Perceptibility::Borderline);
  EXPECT_EQ(perceptibility(AttackKind::BFGS, NormKind::LInf, 79.9), Perceptibility::Imperceptible);
  EXPECT_EQ(perceptibility(AttackKind::Sign, NormKind::L1PerPixel, 12.0), Perceptibility::Borderline);
}

TEST(UniformNoise, Bounds) {
  EXPECT_EQ(uniform_noise({3, 4}, 0.0, 1), Tensor({3, 4}));
  const Tensor t = uniform_noise({100000}, 5.0, 2);
  EXPECT_LE(norms(t).linf, 5.0);
  double mean = 0.0;
  for (float v : t.values()) mean += v;
  mean /= static_cast<double>(t.size());
  EXPECT_LT(std::abs(mean), 3.0 * 5.0 / std::sqrt(3.0) / std::sqrt(1e5));
  EXPECT_EQ(uniform_noise({10}, 5.0, 9), uniform_noise({10}, 5.0, 9));
  EXPECT_THROW(uniform_noise({1}, -1.0, 1), Error);
}

TEST(Records, RoundTrip) {
  const Toy toy;
  std::vector<PerturbationRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(run_attack(AttackKind::Sign, toy.clf, toy.image(900 + i), AttackConfig{}));
  recs[1].seed = 77;
  const auto dir = std::filesystem::temp_directory_path() / "fovea_records_test";
  std::filesystem::remove_all(dir);
  save_records(dir.string(), recs);
  const auto back = load_records(dir.string());
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].image_id, recs[i].image_id);
    EXPECT_EQ(back[i].epsilon, recs[i].epsilon);
    EXPECT_EQ(back[i].kind, recs[i].kind);
    EXPECT_EQ(back[i].norm_value, recs[i].norm_value);
    EXPECT_EQ(back[i].alpha_star, recs[i].alpha_star);
    EXPECT_EQ(back[i].misclassified, recs[i].misclassified);
    EXPECT_EQ(back[i].iterations, recs[i].iterations);
    EXPECT_EQ(back[i].seed, recs[i].seed);
  }
  std::filesystem::remove_all(dir);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "checks.hpp"
#include "fovea/analysis.hpp"

using namespace fovea;
namespace fs = std::filesystem;

namespace {

LabeledImage labelled(const Classifier& clf, std::uint64_t seed) {
  LabeledImage img = checks::random_labeled_image(seed);
  img.image = checks::random_tensor({3, 32, 32}, seed, 40.0, 215.0);
  img.label = ClassScores{clf.logits(img.image), ScoreStage::PreSoftmax}.top_class();
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Fixture {
  Network net = checks::small_conv_net(3, 32, 32, 10, 41);
  NetworkClassifier clf{net};
  Network lin = checks::linear_net(3, 32, 32, 10, 42);
  NetworkClassifier lin_clf{lin};
};

}  // namespace

TEST(Analysis, PostSoftmaxRejected) {
  EXPECT_THROW(require_pre_softmax(ScoreStage::PostSoftmax), Error);
  const Fixture f;
  const LabeledImage img = labelled(f.clf, 1);
  const PerturbationRecord r = run_attack(AttackKind::Sign, f.clf, img, AttackConfig{});
  EXPECT_THROW(linearity_probe(f.clf, img, r, {0, 1}, ScoreStage::PostSoftmax), Error);
  EXPECT_THROW(foveation_decomposition(f.clf, img, r, object_crop_spec(), ScoreStage::PostSoftmax), Error);
}

TEST(NormSweep, ZeroTargetIsCleanAndStarIsAdversarial) {
  const Fixture f;
  std::vector<LabeledImage> imgs;
  std::vector<Tensor> eps;
  std::vector<double> star;
  for (int i = 0; i < 20; ++i) {
    imgs.push_back(labelled(f.clf, 100 + i));
    const PerturbationRecord r = run_attack(AttackKind::Sign, f.clf, imgs.back(), AttackConfig{});
    ASSERT_TRUE(r.misclassified);
    eps.push_back(r.epsilon);
    star.push_back(r.norm_value);
  }
  const auto pts = norm_sweep_accuracy(f.clf, imgs, eps, NormKind::LInf, {0.0}, 1);
  EXPECT_EQ(pts[0].accuracy, 1.0);
  EXPECT_EQ(pts[0].population, 20);
  EXPECT_EQ(matched_sweep_accuracy(f.clf, imgs, eps, NormKind::LInf, star, {1.0}, 1)[0].accuracy, 0.0);
  const auto rel = relative_sweep_accuracy(f.clf, imgs, eps, {0, 1, 2}, 1);
  EXPECT_EQ(rel[0].accuracy, 1.0);
  EXPECT_EQ(rel[1].accuracy, 0.0);
  EXPECT_THROW(norm_sweep_accuracy(f.clf, imgs, eps, NormKind::LInf, {2.0, 1.0}, 1), Error);
  // Zero perturbations stay zero at every target.
  std::vector<Tensor> zeros(eps.size(), Tensor({3, 32, 32}));
  EXPECT_EQ(norm_sweep_accuracy(f.clf, imgs, zeros, NormKind::LInf, {50.0}, 1)[0].accuracy, 1.0);
}

TEST(MaskedPerturbations, PartitionPerImage) {
  const Fixture f;
  std::vector<LabeledImage> imgs = {labelled(f.clf, 5), labelled(f.clf, 6)};
  std::vector<Tensor> eps = {checks::random_tensor({3, 32, 32}, 7), checks::random_tensor({3, 32, 32}, 8)};
  const auto o = masked_perturbations(imgs, eps, MaskMode::Object);
  const auto b = masked_perturbations(imgs, eps, MaskMode::Background);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(add(o[i], b[i]), eps[i]);
  imgs[1].boxes.clear();
  EXPECT_THROW(masked_perturbations(imgs, eps, MaskMode::Object), Error);
}

TEST(Linearity, CurveEndpoints) {
  const Fixture f;
  const LabeledImage img = labelled(f.clf, 9);
  const PerturbationRecord r = run_attack(AttackKind::BFGS, f.clf, img, AttackConfig{});
  ASSERT_TRUE(r.misclassified);
  const auto cv = linearity_probe(f.clf, img, r, {0, 0.5, 1, 2});
  const double fx = f.clf.logits(img.image)[img.label];
  EXPECT_EQ(cv.score_full[0], fx);
  EXPECT_EQ(cv.score_secant[0], fx);
  const double f2 = f.clf.logits(add(img.image, scaled(r.epsilon, 2.0f)))[img.label];
  EXPECT_NEAR(cv.secant.slope, (f2 - fx) / 2, 1e-9);
  EXPECT_NEAR(cv.score_secant[3], f2, 1e-4);
  PerturbationRecord failed = r;
  failed.misclassified = false;
  EXPECT_THROW(linearity_probe(f.clf, img, failed, {0, 1}), Error);
}

TEST(Linearity, LinearModelIsExact) {
  const Fixture f;
  std::vector<LinearityCurve> curves;
  for (int i = 0; i < 20; ++i) {
    const LabeledImage img = labelled(f.lin_clf, 200 + i);
    const PerturbationRecord r = run_attack(AttackKind::Sign, f.lin_clf, img, AttackConfig{});
    ASSERT_TRUE(r.misclassified);
    const auto cv = linearity_probe(f.lin_clf, img, r, {0, 0.25, 0.5, 1, 1.5, 2});
    for (std::size_t k = 0; k < cv.c.size(); ++k) {
      EXPECT_NEAR(cv.score_full[k] - cv.score_clean, cv.c[k] * cv.secant.slope, 1e-4);
    }
    curves.push_back(cv);
  }
  for (double v : secant_errors(curves).hyp1) EXPECT_LT(v, 1e-4);
}

TEST(Linearity, BiasFreeLinearModelMatchesNaive) {
  Network lin = checks::linear_net(3, 32, 32, 10, 43);
  for (float& b : lin.params()[0].bias.values()) b = 0.0f;
  const NetworkClassifier clf(lin);
  std::vector<LinearityCurve> curves;
  for (int i = 0; i < 20; ++i) {
    const LabeledImage img = labelled(clf, 300 + i);
    const PerturbationRecord r = run_attack(AttackKind::BFGS, clf, img, AttackConfig{});
    ASSERT_TRUE(r.misclassified);
    curves.push_back(linearity_probe(clf, img, r, {0, 1, 2}));
  }
  const SecantErrors e = secant_errors(curves);
  ASSERT_EQ(e.hyp1.size(), 20u);
  for (std::size_t i = 0; i < e.hyp1.size(); ++i) {
    EXPECT_LT(e.hyp1[i], 1e-4);
    EXPECT_LT(e.naive[i], 1e-4);
  }
  auto twice = curves;
  twice.insert(twice.end(), curves.begin(), curves.end());
  const SecantErrors d = secant_errors(twice);
  for (std::size_t i = 0; i < e.hyp1.size(); ++i) {
    EXPECT_EQ(d.hyp1[i], d.hyp1[i + 20]);
    EXPECT_EQ(d.naive[i], d.naive[i + 20]);
  }
  curves[0].c = {0, 2};
  EXPECT_THROW(secant_errors(curves), Error);
}

TEST(CumulativeHistogram, Examples) {
  EXPECT_EQ(cumulative_histogram({1, 2, 3}, {1.5, 2.5}).counts, (std::vector<int>{1, 2}));
  EXPECT_EQ(cumulative_histogram({0.1, 0.2}, {1, 2, 3}).counts, (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(cumulative_histogram({}, {1, 2}).counts, (std::vector<int>{0, 0}));
  EXPECT_EQ(cumulative_histogram({2.0}, {2.0}).counts, (std::vector<int>{1}));
  EXPECT_THROW(cumulative_histogram({1}, {2, 1}), Error);
}

TEST(CumulativeHistogram, MonotoneAndExhaustive) {
  const Tensor v = checks::random_tensor({500}, 11, 0, 100);
  std::vector<double> values(v.vec().begin(), v.vec().end());
  std::vector<double> t;
  for (int k = 0; k <= 20; ++k) t.push_back(5.0 * k);
  const auto h = cumulative_histogram(values, t);
  for (std::size_t i = 1; i < h.counts.size(); ++i) EXPECT_LE(h.counts[i - 1], h.counts[i]);
  EXPECT_EQ(h.counts.back(), 500);
}

TEST(Decomposition, IdentityIsZeroAndFullBoxIsNearZero) {
  const Fixture f;
  for (int i = 0; i < 10; ++i) {
    LabeledImage img = labelled(f.clf, 400 + i);
    const PerturbationRecord r = run_attack(AttackKind::Sign, f.clf, img, AttackConfig{});
    const DecompositionRecord id = foveation_decomposition(f.clf, img, r, identity_spec());
    EXPECT_EQ(id.clean_shift, 0.0);
    EXPECT_EQ(id.pert_shift, 0.0);
    img.boxes = {{0, 0, 32, 32}};
    const DecompositionRecord full = foveation_decomposition(f.clf, img, r, object_crop_spec());
    EXPECT_LT(std::abs(full.clean_shift), 1e-4);
    EXPECT_LT(std::abs(full.pert_shift), 1e-4);
    const DecompositionRecord obj = foveation_decomposition(f.clf, labelled(f.clf, 400 + i), r, object_crop_spec());
    EXPECT_TRUE(std::isfinite(obj.clean_shift));
    EXPECT_TRUE(std::isfinite(obj.pert_shift));
  }
}

TEST(NormRatio, IdentityWithinBracket) {
  const Fixture f;
  AttackConfig cfg;
  const double g = (cfg.grid.factor - 1.0) / 256.0;
  for (auto kind : {AttackKind::BFGS, AttackKind::Sign}) {
    for (int i = 0; i < 5; ++i) {
      const LabeledImage img = labelled(f.clf, 500 + i);
      const NormRatio r = norm_ratio(f.clf, img, kind, cfg, identity_spec());
      ASSERT_TRUE(r.included) << r.exclusion;
      EXPECT_GE(r.ratio, 1.0 / (1.0 + g));
      EXPECT_LE(r.ratio, 1.0 + g);
    }
  }
}

TEST(NormRatio, SemanticsAndExclusions) {
  const Fixture f;
  AttackConfig cfg;
  LabeledImage img = labelled(f.clf, 600);
  PerturbationRecord raw = run_attack(AttackKind::Sign, f.clf, img, cfg);
  const NormRatio r = norm_ratio(f.clf, img, raw, cfg, object_crop_spec());
  if (r.included) {
    EXPECT_NEAR(r.ratio, r.after / r.before, 1e-12);
    EXPECT_EQ(r.before, raw.norm_value);
  }
  PerturbationRecord failed = raw;
  failed.misclassified = false;
  const NormRatio fr = norm_ratio(f.clf, img, failed, cfg, identity_spec());
  EXPECT_FALSE(fr.included);
  EXPECT_EQ(fr.exclusion, "attack failed before foveation");
  LabeledImage wrong = img;
  wrong.label = ranking(f.clf.logits(img.image)).back();
  const NormRatio wr = norm_ratio(f.clf, wrong, raw, cfg, identity_spec());
  EXPECT_FALSE(wr.included);
  EXPECT_EQ(wr.exclusion, "misclassified before foveation");
}

TEST(Median, Basics) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_TRUE(std::isnan(median({})));
  EXPECT_EQ(format4(0.78412), "0.7841");
  EXPECT_EQ(format4(1.0), "1.0000");
}

TEST(CsvWriters, HeadersAndRows) {
  const fs::path dir = fs::temp_directory_path() / "fovea_csv_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_sweep_csv((dir / "s.csv").string(), {{"BFGS same-model", "relative", "L1PerPixel", {{0, 1, 10}, {2, 0.5, 10}}}});
  EXPECT_EQ(slurp(dir / "s.csv"),
            "series,mode,norm,target,accuracy,population\n"
            "BFGS same-model,relative,L1PerPixel,0.0000,1.0000,10\n"
            "BFGS same-model,relative,L1PerPixel,2.0000,0.5000,10\n");

  LinearityCurve cv;
  cv.image_id = "img_00001";
  cv.label = 3;
  cv.score_clean = 1.5;
  cv.secant.slope = -0.25;
  cv.c = {0, 1};
  cv.score_full = {1.5, 1.25};
  cv.score_pert_alone = {0.0, 7.0};
  cv.score_secant = {1.5, 1.25};
  write_curves_csv((dir / "c.csv").string(), {"Sign"}, {{cv}});
  EXPECT_EQ(slurp(dir / "c.csv"),
            "attack,image_id,label,c,score_full,score_pert_alone,score_secant,slope\n"
            "Sign,img_00001,3,0.0000,1.5,0,1.5,-0.25\n"
            "Sign,img_00001,3,1.0000,1.25,7,1.25,-0.25\n");

  const auto h = cumulative_histogram({0.5, 2}, {1, 10});
  write_cumhist_csv((dir / "h.csv").string(), {"BFGS"}, {h}, {h});
  const std::string hist = slurp(dir / "h.csv");
  EXPECT_EQ(hist.substr(0, 2), "# ");
  EXPECT_NE(hist.find("\nattack,threshold,hyp1_count,naive_count\nBFGS,1,1,1\nBFGS,10,2,2\n"), std::string::npos);

  write_decomposition_csv((dir / "d.csv").string(), {"Object Crop MP"}, {"BFGS"}, {{{"a", 0.5, -1}}});
  EXPECT_EQ(slurp(dir / "d.csv"), "condition,attack,image_id,clean_shift,pert_shift\nObject Crop MP,BFGS,a,0.5,-1\n");

  NormRatio nr;
  nr.image_id = "a";
  nr.included = true;
  nr.before = 1.0;
  nr.after = 14.4476;
  nr.ratio = 14.4476;
  nr.input_ratio = 2.0;
  write_ratios_csv((dir / "r.csv").string(), {"Object Crop MP"}, {"BFGS"}, {{nr}});
  EXPECT_EQ(slurp(dir / "r.csv"),
            "condition,attack,image_id,included,exclusion,norm_before,norm_after,ratio,input_ratio\n"
            "Object Crop MP,BFGS,a,1,,1,14.4476,14.4476,2.0000\n");
  fs::remove_all(dir);
}

#include "fovea/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fovea {

void require_pre_softmax(ScoreStage stage) {
  if (stage != ScoreStage::PreSoftmax) throw Error("analysis requires pre-softmax scores");
}

namespace {

bool correct_after(const Classifier& model, const Tensor& x, const Tensor& eps, int label, int k_top, float lo,
                   float hi) {
  const Tensor z = clamped(add(x, eps), lo, hi);
  return top_k_error(ClassScores{model.logits(z), ScoreStage::PreSoftmax}, label, k_top) == 0;
}

// Accuracy of `model` on images[i] + eps_fn(i); per-image work runs in
// parallel, the count is reduced in index order.
template <typename EpsFn>
double sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images, int k_top, float lo,
                      float hi, EpsFn eps_fn) {
  const int n = static_cast<int>(images.size());
  if (n == 0) return 0.0;
  std::vector<char> ok(static_cast<std::size_t>(n), 0);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    ok[static_cast<std::size_t>(i)] = correct_after(model, img.image, eps_fn(i), img.label, k_top, lo, hi);
  }
  int correct = 0;
  for (char c : ok) correct += c;
  return static_cast<double>(correct) / n;
}

void check_pairing(const std::vector<LabeledImage>& images, const std::vector<Tensor>& perturbations) {
  if (images.size() != perturbations.size()) throw Error("sweep: images and perturbations differ in count");
  for (std::size_t i = 0; i < images.size(); ++i) require_same_shape(images[i].image, perturbations[i], "sweep");
}

}  // namespace

std::vector<SweepPoint> norm_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                            const std::vector<Tensor>& perturbations, NormKind norm,
                                            const std::vector<double>& targets, int k_top, float pixel_min,
                                            float pixel_max) {
  check_pairing(images, perturbations);
  if (!std::is_sorted(targets.begin(), targets.end())) throw Error("sweep: targets must be ascending");
  std::vector<double> current(perturbations.size());
  for (std::size_t i = 0; i < perturbations.size(); ++i) current[i] = norm_of(perturbations[i], norm);
  std::vector<SweepPoint> out;
  for (double nu : targets) {
    const double acc = sweep_accuracy(model, images, k_top, pixel_min, pixel_max, [&](int i) {
      const auto k = static_cast<std::size_t>(i);
      if (current[k] == 0.0) return perturbations[k];
      return scaled(perturbations[k], static_cast<float>(nu / current[k]));
    });
    out.push_back({nu, acc, static_cast<int>(images.size())});
  }
  return out;
}

std::vector<SweepPoint> relative_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                                const std::vector<Tensor>& perturbations,
                                                const std::vector<double>& multipliers, int k_top,
                                                float pixel_min, float pixel_max) {
  check_pairing(images, perturbations);
  if (!std::is_sorted(multipliers.begin(), multipliers.end())) throw Error("sweep: multipliers must be ascending");
  std::vector<SweepPoint> out;
  for (double c : multipliers) {
    const double acc = sweep_accuracy(model, images, k_top, pixel_min, pixel_max, [&](int i) {
      return scaled(perturbations[static_cast<std::size_t>(i)], static_cast<float>(c));
    });
    out.push_back({c, acc, static_cast<int>(images.size())});
  }
  return out;
}

std::vector<SweepPoint> matched_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                               const std::vector<Tensor>& perturbations, NormKind norm,
                                               const std::vector<double>& reference_norms,
                                               const std::vector<double>& multipliers, int k_top, float pixel_min,
                                               float pixel_max) {
  check_pairing(images, perturbations);
  if (reference_norms.size() != images.size()) throw Error("sweep: reference norm count mismatch");
  if (!std::is_sorted(multipliers.begin(), multipliers.end())) throw Error("sweep: multipliers must be ascending");
  std::vector<double> current(perturbations.size());
  for (std::size_t i = 0; i < perturbations.size(); ++i) current[i] = norm_of(perturbations[i], norm);
  std::vector<SweepPoint> out;
  for (double c : multipliers) {
    const double acc = sweep_accuracy(model, images, k_top, pixel_min, pixel_max, [&](int i) {
      const auto k = static_cast<std::size_t>(i);
      if (current[k] == 0.0) return perturbations[k];
      return scaled(perturbations[k], static_cast<float>(c * reference_norms[k] / current[k]));
    });
    out.push_back({c, acc, static_cast<int>(images.size())});
  }
  return out;
}

std::vector<Tensor> masked_perturbations(const std::vector<LabeledImage>& images,
                                         const std::vector<Tensor>& perturbations, MaskMode mode) {
  check_pairing(images, perturbations);
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].boxes.empty()) throw Error("masked sweep: image '" + images[i].id + "' has no bounding box");
    out.push_back(mask_perturbation(perturbations[i], images[i].primary_box(), mode));
  }
  return out;
}

namespace {
double label_score(const Classifier& model, const Tensor& image, int label) {
  return model.logits(image).at(static_cast<std::size_t>(label));
}
}  // namespace

SecantEstimate secant_estimate(const Classifier& model, const Tensor& x, const Tensor& eps, int label) {
  const double f0 = label_score(model, x, label);
  const double f2 = label_score(model, add(x, scaled(eps, 2.0f)), label);
  return {(f2 - f0) / 2.0};
}

LinearityCurve linearity_probe(const Classifier& model, const LabeledImage& img, const PerturbationRecord& record,
                               const std::vector<double>& c_values, ScoreStage stage) {
  require_pre_softmax(stage);
  if (!record.misclassified) throw Error("linearity_probe: record '" + record.image_id + "' is not adversarial");
  if (!std::is_sorted(c_values.begin(), c_values.end())) throw Error("linearity_probe: c values must be ascending");
  require_same_shape(img.image, record.epsilon, "linearity_probe");
  LinearityCurve curve;
  curve.image_id = img.id;
  curve.label = img.label;
  curve.score_clean = label_score(model, img.image, img.label);
  curve.secant = secant_estimate(model, img.image, record.epsilon, img.label);
  for (double c : c_values) {
    const Tensor pert = scaled(record.epsilon, static_cast<float>(c));
    curve.c.push_back(c);
    curve.score_full.push_back(c == 0.0 ? curve.score_clean : label_score(model, add(img.image, pert), img.label));
    curve.score_pert_alone.push_back(label_score(model, pert, img.label));
    curve.score_secant.push_back(curve.score_clean + c * curve.secant.slope);
  }
  return curve;
}

SecantErrors secant_errors(const std::vector<LinearityCurve>& curves) {
  SecantErrors out;
  for (const auto& cv : curves) {
    const auto it = std::find(cv.c.begin(), cv.c.end(), 1.0);
    if (it == cv.c.end()) throw Error("secant_errors: curve '" + cv.image_id + "' has no c=1 point");
    const auto k = static_cast<std::size_t>(it - cv.c.begin());
    const double delta = cv.score_full[k] - cv.score_clean;
    out.hyp1.push_back(std::abs(cv.score_clean + cv.secant.slope - cv.score_full[k]));
    out.naive.push_back(std::abs(cv.score_pert_alone[k] - delta));
  }
  return out;
}

CumulativeHistogram cumulative_histogram(const std::vector<double>& values, const std::vector<double>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw Error("cumulative_histogram: thresholds must be ascending");
  }
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  CumulativeHistogram h{thresholds, {}};
  for (double t : thresholds) {
    h.counts.push_back(static_cast<int>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin()));
  }
  return h;
}

namespace {

std::vector<SampleWindow> clean_windows(const Classifier& model, const LabeledImage& img, const FoveationSpec& spec) {
  if (spec.variant == FoveationKind::Embed) throw Error("embed has no crop windows");
  const Shape in = model.input_shape();
  FoveationSpec s = spec;
  s.out_h = in.at(1);
  s.out_w = in.at(2);
  return foveation_windows(s, img, img.image, &model);
}

}  // namespace

DecompositionRecord foveation_decomposition(const Classifier& model, const LabeledImage& img,
                                            const PerturbationRecord& record, const FoveationSpec& spec,
                                            ScoreStage stage) {
  require_pre_softmax(stage);
  require_same_shape(img.image, record.epsilon, "foveation_decomposition");
  DecompositionRecord r;
  r.image_id = img.id;
  const Tensor xe = add(img.image, record.epsilon);
  const double fx = label_score(model, img.image, img.label);
  const double fxe = label_score(model, xe, img.label);
  if (spec.variant == FoveationKind::Identity) {
    return r;
  }
  const FoveatedClassifier fov(model, clean_windows(model, img, spec), img.image.shape());
  const double ftx = label_score(fov, img.image, img.label);
  const double ftxe = label_score(fov, xe, img.label);
  r.clean_shift = fx - ftx;
  r.pert_shift = (fxe - fx) - (ftxe - ftx);
  return r;
}

NormRatio norm_ratio(const Classifier& model, const LabeledImage& img, const PerturbationRecord& raw,
                     const AttackConfig& cfg, const FoveationSpec& spec) {
  NormRatio r;
  r.image_id = img.id;
  const NormKind norm = native_norm(raw.kind);
  if (top_k_error(ClassScores{model.logits(img.image), ScoreStage::PreSoftmax}, img.label, cfg.k_top) != 0) {
    r.exclusion = "misclassified before foveation";
    return r;
  }
  const FoveatedClassifier fov(model, clean_windows(model, img, spec), img.image.shape());
  if (top_k_error(ClassScores{fov.logits(img.image), ScoreStage::PreSoftmax}, img.label, cfg.k_top) != 0) {
    r.exclusion = "misclassified after foveation";
    return r;
  }
  if (!raw.misclassified) {
    r.exclusion = "attack failed before foveation";
    return r;
  }
  const PerturbationRecord after = run_attack(raw.kind, fov, img, cfg);
  if (!after.misclassified) {
    r.exclusion = "attack failed after foveation";
    return r;
  }
  r.before = norm_of(raw.epsilon, norm);
  r.after = norm_of(after.epsilon, norm);
  if (!(r.before > 0.0)) {
    r.exclusion = "zero perturbation before foveation";
    return r;
  }
  r.ratio = r.after / r.before;
  double seen = 0.0;
  const Shape in = model.input_shape();
  for (const auto& w : fov.windows()) seen += norm_of(crop_window(after.epsilon, w, in.at(1), in.at(2)), norm);
  r.input_ratio = seen / static_cast<double>(fov.windows().size()) / r.before;
  r.included = true;
  return r;
}

NormRatio norm_ratio(const Classifier& model, const LabeledImage& img, AttackKind kind, const AttackConfig& cfg,
                     const FoveationSpec& spec) {
  return norm_ratio(model, img, run_attack(kind, model, img, cfg), cfg, spec);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

namespace {

std::string g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  return out;
}

}  // namespace

void write_sweep_csv(const std::string& path, const std::vector<SweepSeries>& series) {
  auto out = open_csv(path);
  out << "series,mode,norm,target,accuracy,population\n";
  for (const auto& s : series)
    for (const auto& p : s.points) {
      out << s.name << ',' << s.mode << ',' << s.norm << ',' << format4(p.target) << ',' << format4(p.accuracy) << ','
          << p.population << '\n';
    }
}

void write_curves_csv(const std::string& path, const std::vector<std::string>& attacks,
                      const std::vector<std::vector<LinearityCurve>>& curves) {
  if (attacks.size() != curves.size()) throw Error("write_curves_csv: attack count mismatch");
  auto out = open_csv(path);
  out << "attack,image_id,label,c,score_full,score_pert_alone,score_secant,slope\n";
  for (std::size_t a = 0; a < attacks.size(); ++a)
    for (const auto& cv : curves[a])
      for (std::size_t k = 0; k < cv.c.size(); ++k) {
        out << attacks[a] << ',' << cv.image_id << ',' << cv.label << ',' << format4(cv.c[k]) << ','
            << g6(cv.score_full[k]) << ',' << g6(cv.score_pert_alone[k]) << ',' << g6(cv.score_secant[k]) << ','
            << g6(cv.secant.slope) << '\n';
      }
}

void write_cumhist_csv(const std::string& path, const std::vector<std::string>& attacks,
                       const std::vector<CumulativeHistogram>& hyp1, const std::vector<CumulativeHistogram>& naive) {
  if (attacks.size() != hyp1.size() || attacks.size() != naive.size()) {
    throw Error("write_cumhist_csv: attack count mismatch");
  }
  auto out = open_csv(path);
  out << "# hyp1_error = |f(x)[l] + slope - f(x+eps)[l]|; naive_error = |f(eps)[l] - (f(x+eps)[l] - f(x)[l])|;"
         " pre-softmax label scores\n";
  out << "attack,threshold,hyp1_count,naive_count\n";
  for (std::size_t a = 0; a < attacks.size(); ++a) {
    if (hyp1[a].thresholds != naive[a].thresholds) throw Error("write_cumhist_csv: threshold mismatch");
    for (std::size_t k = 0; k < hyp1[a].thresholds.size(); ++k) {
      out << attacks[a] << ',' << g6(hyp1[a].thresholds[k]) << ',' << hyp1[a].counts[k] << ',' << naive[a].counts[k]
          << '\n';
    }
  }
}

void write_decomposition_csv(const std::string& path, const std::vector<std::string>& conditions,
                             const std::vector<std::string>& attacks,
                             const std::vector<std::vector<DecompositionRecord>>& records) {
  if (conditions.size() != records.size() || attacks.size() != records.size()) {
    throw Error("write_decomposition_csv: condition count mismatch");
  }
  auto out = open_csv(path);
  out << "condition,attack,image_id,clean_shift,pert_shift\n";
  for (std::size_t c = 0; c < conditions.size(); ++c)
    for (const auto& r : records[c]) {
      out << conditions[c] << ',' << attacks[c] << ',' << r.image_id << ',' << g6(r.clean_shift) << ',' << g6(r.pert_shift) << '\n';
    }
}

void write_ratios_csv(const std::string& path, const std::vector<std::string>& conditions,
                      const std::vector<std::string>& attacks, const std::vector<std::vector<NormRatio>>& ratios) {
  if (conditions.size() != ratios.size() || attacks.size() != ratios.size()) {
    throw Error("write_ratios_csv: condition count mismatch");
  }
  auto out = open_csv(path);
  out << "condition,attack,image_id,included,exclusion,norm_before,norm_after,ratio,input_ratio\n";
  for (std::size_t c = 0; c < conditions.size(); ++c)
    for (const auto& r : ratios[c]) {
      out << conditions[c] << ',' << attacks[c] << ',' << r.image_id << ',' << (r.included ? 1 : 0) << ','
          << r.exclusion << ',' << g6(r.before) << ',' << g6(r.after) << ',' << format4(r.ratio) << ','
          << format4(r.input_ratio) << '\n';
    }
}

}  // namespace fovea

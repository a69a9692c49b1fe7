#pragma once

#include <string>
#include <vector>

#include "fovea/attack.hpp"
#include "fovea/foveation.hpp"
#include "fovea/model.hpp"

namespace fovea {

/// Throws unless `stage` is pre-softmax; every analysis works on raw scores.
void require_pre_softmax(ScoreStage stage);

struct SweepPoint {
  double target = 0.0;
  double accuracy = 0.0;
  int population = 0;
};

/// Accuracy with every perturbation rescaled to the absolute norm `target`
/// (zero perturbations stay zero). Records pair with images by position.
std::vector<SweepPoint> norm_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                            const std::vector<Tensor>& perturbations, NormKind norm,
                                            const std::vector<double>& targets, int k_top,
                                            float pixel_min = 0.0f, float pixel_max = 255.0f);

/// Same, but `multipliers` scale each perturbation relative to its own norm.
std::vector<SweepPoint> relative_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                                const std::vector<Tensor>& perturbations,
                                                const std::vector<double>& multipliers, int k_top,
                                                float pixel_min = 0.0f, float pixel_max = 255.0f);

/// Each perturbation rescaled to multiplier * reference_norms[i].
std::vector<SweepPoint> matched_sweep_accuracy(const Classifier& model, const std::vector<LabeledImage>& images,
                                               const std::vector<Tensor>& perturbations, NormKind norm,
                                               const std::vector<double>& reference_norms,
                                               const std::vector<double>& multipliers, int k_top,
                                               float pixel_min = 0.0f, float pixel_max = 255.0f);

/// Perturbations restricted to the object box or its complement.
std::vector<Tensor> masked_perturbations(const std::vector<LabeledImage>& images,
                                         const std::vector<Tensor>& perturbations, MaskMode mode);

struct SecantEstimate {
  double slope = 0.0;
};

SecantEstimate secant_estimate(const Classifier& model, const Tensor& x, const Tensor& eps, int label);

struct LinearityCurve {
  std::string image_id;
  int label = 0;
  double score_clean = 0.0;
  SecantEstimate secant;
  std::vector<double> c;
  std::vector<double> score_full;
  std::vector<double> score_pert_alone;
  std::vector<double> score_secant;
};

/// Label score along x + c*eps*, eps* alone, and the secant line. Inputs are
/// not clamped. `c_values` must be ascending.
LinearityCurve linearity_probe(const Classifier& model, const LabeledImage& img, const PerturbationRecord& record,
                               const std::vector<double>& c_values, ScoreStage stage = ScoreStage::PreSoftmax);

struct SecantErrors {
  std::vector<double> hyp1;
  std::vector<double> naive;
};

SecantErrors secant_errors(const std::vector<LinearityCurve>& curves);

struct CumulativeHistogram {
  std::vector<double> thresholds;
  std::vector<int> counts;
};

CumulativeHistogram cumulative_histogram(const std::vector<double>& values, const std::vector<double>& thresholds);

struct DecompositionRecord {
  std::string image_id;
  double clean_shift = 0.0;
  double pert_shift = 0.0;
};

/// Crop windows are taken from the clean image and reused for x + eps*, so
/// T is the same linear map in both terms.
DecompositionRecord foveation_decomposition(const Classifier& model, const LabeledImage& img,
                                            const PerturbationRecord& record, const FoveationSpec& spec,
                                            ScoreStage stage = ScoreStage::PreSoftmax);

struct NormRatio {
  std::string image_id;
  bool included = false;
  std::string exclusion;
  double before = 0.0;
  double after = 0.0;
  double ratio = 0.0;
  /// Same ratio with the foveated perturbation measured after T, as the CNN sees it.
  double input_ratio = 0.0;
};

NormRatio norm_ratio(const Classifier& model, const LabeledImage& img, const PerturbationRecord& raw,
                     const AttackConfig& cfg, const FoveationSpec& spec);
/// Runs the raw attack as well.
NormRatio norm_ratio(const Classifier& model, const LabeledImage& img, AttackKind kind, const AttackConfig& cfg,
                     const FoveationSpec& spec);

double median(std::vector<double> values);

// CSV writers. Floats use 4 decimals except where the column needs more
// resolution (scores and errors use %.6g).
struct SweepSeries {
  std::string name;
  std::string mode;  // "absolute", "relative" or "matched"
  std::string norm;
  std::vector<SweepPoint> points;
};

void write_sweep_csv(const std::string& path, const std::vector<SweepSeries>& series);
void write_curves_csv(const std::string& path, const std::vector<std::string>& attacks,
                      const std::vector<std::vector<LinearityCurve>>& curves);
void write_cumhist_csv(const std::string& path, const std::vector<std::string>& attacks,
                       const std::vector<CumulativeHistogram>& hyp1, const std::vector<CumulativeHistogram>& naive);
void write_decomposition_csv(const std::string& path, const std::vector<std::string>& conditions,
                             const std::vector<std::string>& attacks,
                             const std::vector<std::vector<DecompositionRecord>>& records);
void write_ratios_csv(const std::string& path, const std::vector<std::string>& conditions,
                      const std::vector<std::string>& attacks, const std::vector<std::vector<NormRatio>>& ratios);

std::string format4(double v);

}  // namespace fovea

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fovea/analysis.hpp"
#include "fovea/attack.hpp"
#include "fovea/dataset.hpp"
#include "fovea/foveation.hpp"
#include "fovea/model.hpp"

namespace fovea {

/// Analyses `run` can execute, by config name.
inline const std::vector<std::string> kAnalyses = {"norm_sweep", "masked", "linearity", "decomposition",
                                                   "norm_ratio"};

std::vector<FoveationSpec> default_foveations();

struct ExperimentConfig {
  /// Generated from `synthetic` when the directory has no labels.csv.
  std::string dataset = "data";
  /// Trained and written here when missing. Empty means <output>/model.fovn.
  std::string checkpoint;
  /// Independently seeded model for the transfer sweep. Empty means
  /// <output>/model_transfer.fovn.
  std::string transfer_checkpoint;
  std::string output = "out";
  std::uint64_t seed = 1;
  int k_top = 1;
  int eval_size = 200;
  double train_fraction = 0.75;
  std::vector<AttackKind> attacks = {AttackKind::BFGS, AttackKind::Sign};
  std::vector<std::string> analyses = kAnalyses;
  std::vector<FoveationSpec> foveations = default_foveations();
  SyntheticSpec synthetic;
  TrainConfig train;
  AttackConfig attack;
  /// Images per attack used for norm ratios (0 = whole attack set).
  int ratio_images = 0;
  std::vector<double> relative_multipliers = {0, 1, 2, 4, 8};
  /// Absolute sweep norms, per native norm of each attack.
  std::vector<double> l1_targets = {0, 1, 2, 3, 4, 6, 8, 10, 12, 15, 20};
  std::vector<double> linf_targets = {0, 2, 4, 6, 8, 10, 12, 15, 20, 30};
  /// Masked sweeps sample the imperceptible band.
  std::vector<double> masked_l1_targets = {2, 4, 6, 8, 10, 12};
  std::vector<double> masked_linf_targets = {2, 4, 6, 8, 10, 12};
  std::vector<double> linearity_c = {0, 0.25, 0.5, 0.75, 1, 1.25, 1.5, 1.75, 2};

  /// Throws on invalid values or unresolvable paths.
  void validate() const;
  std::string checkpoint_path() const;
  std::string transfer_checkpoint_path() const;
  bool wants(const std::string& analysis) const;
};

/// YAML; unknown keys are errors.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& text);
std::string experiment_config_to_text(const ExperimentConfig& cfg);

struct ReportRow {
  std::string condition;
  std::string attack;
  double accuracy = 0.0;
  int population = 0;
  int exclusions = 0;
};

/// report.csv and summary.txt. Floats are printed with 4 decimals; `notes`
/// open summary.txt as comment lines.
void emit_report(const std::vector<ReportRow>& rows, const std::vector<std::string>& analysis_files,
                 const std::string& outdir, const std::vector<std::string>& notes = {});
std::vector<ReportRow> read_report(const std::string& path);

struct Workspace {
  std::vector<LabeledImage> all;
  Split split;
  /// Held-out prefix that holds `eval_size` correctly classified images.
  std::vector<LabeledImage> eval;
  std::vector<char> eval_correct;
};

/// Loads or generates the dataset and selects the evaluation prefix.
std::vector<LabeledImage> obtain_dataset(const ExperimentConfig& cfg);
Workspace select_eval(const ExperimentConfig& cfg, std::vector<LabeledImage> all, const Classifier& model);

/// Training view: the raw image, its object crop, a one-shift crop or one of
/// the ten crops, drawn uniformly.
AugmentFn foveation_augment();
Checkpoint obtain_model(const ExperimentConfig& cfg, const std::string& path, std::uint64_t seed,
                        const Split& split);

/// Per-image attacks; misclassified images get a zero perturbation.
std::vector<PerturbationRecord> attack_images(const Classifier& model, const std::vector<LabeledImage>& images,
                                              AttackKind kind, const AttackConfig& cfg);
/// Object crops at the model input size; images without a box map to an empty tensor.
std::vector<LabeledImage> object_crops(const std::vector<LabeledImage>& images, const Shape& input_shape);

/// Seed of `spec` specialised to the i-th evaluated image.
FoveationSpec spec_for_image(const FoveationSpec& spec, std::size_t index);

/// Accuracy of the foveated classifier on images[i] + eps[i]. Object-crop
/// specs (Shift, Embed) take eps as perturbations of the object crops.
ReportRow evaluate_condition(const Classifier& model, const std::vector<LabeledImage>& images,
                             const std::vector<Tensor>& eps, const FoveationSpec& spec, AttackKind kind, int k_top);

struct RunResult {
  std::vector<ReportRow> rows;
  std::vector<std::string> files;
  bool ok = true;
};

/// Full pipeline. Writes CSVs, summary.txt and manifest.json to cfg.output;
/// on a stage failure the outputs so far are kept and the manifest marks it.
RunResult run_experiment(const ExperimentConfig& cfg);

}  // namespace fovea

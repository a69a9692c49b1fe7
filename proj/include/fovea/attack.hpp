#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fovea/model.hpp"
#include "fovea/tensor.hpp"

namespace fovea {

enum class AttackKind { BFGS, Sign };
enum class NormKind { L1PerPixel, LInf };

std::string to_string(AttackKind kind);
std::string to_string(NormKind kind);
AttackKind parse_attack_kind(const std::string& s);
NormKind parse_norm_kind(const std::string& s);

/// The norm each attack optimizes: L1 per pixel for BFGS, L-infinity for Sign.
NormKind native_norm(AttackKind kind);
double norm_of(const Tensor& t, NormKind kind);

/// Geometric scale grid min, min*factor, ... up to max (inclusive).
struct AlphaGrid {
  double min = 0.1;
  double max = 512.0;
  double factor = std::pow(2.0, 0.25);

  std::vector<double> values(double upper) const;
};

struct AttackConfig {
  double eta = 1e-6;
  int max_iters = 100;
  int lbfgs_memory = 10;
  AlphaGrid grid;
  /// Upper limit when the grid is extended for the fallback search.
  double hard_cap = 4096.0;
  int k_top = 1;
  float pixel_min = 0.0f;
  float pixel_max = 255.0f;
  int bisection_steps = 8;
  double armijo_c = 1e-4;
  /// Largest per-pixel change of a first-order step, in pixel levels.
  double initial_step = 1.0;
  double max_step = 16.0;

  void validate() const;
};

struct PerturbationRecord {
  std::string image_id;
  Tensor epsilon;
  AttackKind kind = AttackKind::BFGS;
  NormKind norm_kind = NormKind::L1PerPixel;
  double norm_value = 0.0;
  double l1_per_pixel = 0.0;
  double linf = 0.0;
  double alpha_star = 0.0;
  /// Lower end of the final line-search bracket (known not to misclassify).
  double alpha_low = 0.0;
  bool misclassified = false;
  bool misclassified_from_start = false;
  int iterations = 0;
  std::uint64_t seed = 0;
};

/// Fills norms from `epsilon`.
void set_norms(PerturbationRecord& r);

struct HingeResult {
  double loss = 0.0;
  Tensor grad;
  bool misclassified = false;
};

/// Hinge on the pre-softmax label score at clamp(x+eps): zero (with zero
/// gradient) once the label leaves the top-k, otherwise the label score and
/// its gradient, zeroed where the clamp is active.
HingeResult hinge_loss_and_grad(const Classifier& model, const Tensor& x, const Tensor& eps, int label,
                                const AttackConfig& cfg);

bool misclassifies(const Classifier& model, const Tensor& x, const Tensor& eps, int label,
                   const AttackConfig& cfg);

struct LineSearchResult {
  bool found = false;
  double alpha_star = 0.0;
  double alpha_low = 0.0;
  Tensor epsilon;  // clamp(x + alpha_star * unit) - x
  int evaluations = 0;
};

/// Scans the grid (values in (skip_below, max_alpha]) along `direction`
/// normalized to unit `norm`, then bisects the first misclassifying bracket.
LineSearchResult line_search_min_norm(const Classifier& model, const Tensor& x, int label,
                                      const Tensor& direction, NormKind norm, const AttackConfig& cfg,
                                      double max_alpha, double skip_below = 0.0);
LineSearchResult line_search_min_norm(const Classifier& model, const Tensor& x, int label,
                                      const Tensor& direction, NormKind norm, const AttackConfig& cfg);

/// Elementwise sign in {-1,0,+1}.
Tensor sign_direction(const Tensor& grad);

/// `objective_history`, when given, receives the objective after every
/// accepted quasi-Newton step (starting with the value at eps = 0).
PerturbationRecord bfgs_perturbation(const Classifier& model, const Tensor& x, int label,
                                     const AttackConfig& cfg, std::vector<double>* objective_history = nullptr);
PerturbationRecord sign_perturbation(const Classifier& model, const Tensor& x, int label,
                                     const AttackConfig& cfg);
PerturbationRecord run_attack(AttackKind kind, const Classifier& model, const LabeledImage& img,
                              const AttackConfig& cfg);

enum class Perceptibility { Imperceptible, Borderline, Perceptible };
std::string to_string(Perceptibility p);

/// Visibility threshold for an attack/norm pair (pixel levels on [0,255]).
double perceptibility_threshold(AttackKind kind, NormKind norm);
Perceptibility perceptibility(AttackKind kind, NormKind norm, double value);
Perceptibility perceptibility(const PerturbationRecord& record);

/// i.i.d. uniform in [-amplitude, amplitude].
Tensor uniform_noise(const Shape& shape, double amplitude, std::uint64_t seed);

/// Directory of FVT1 tensors plus manifest.json.
void save_records(const std::string& dir, const std::vector<PerturbationRecord>& records);
std::vector<PerturbationRecord> load_records(const std::string& dir);

}  // namespace fovea

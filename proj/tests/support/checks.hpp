#pragma once

// Numerical checks shared by the unit tests and the acceptance binary.

#include <cstdint>
#include <string>
#include <vector>

#include "fovea/attack.hpp"
#include "fovea/foveation.hpp"
#include "fovea/model.hpp"
#include "fovea/network.hpp"
#include "fovea/tensor.hpp"

namespace fovea::checks {

struct CheckResult {
  std::string name;
  int probes = 0;
  /// Largest relative error (gradients) or absolute residual (oracles).
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass() const { return probes > 0 && worst < tolerance; }
};

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0);
/// Random image on [0,255].
Tensor random_image(const Shape& shape, std::uint64_t seed);

/// conv(4,3x3,pad 1) - relu - dense(k), He-initialized.
Network small_conv_net(int c, int h, int w, int k, std::uint64_t seed);
/// A single dense layer: f(x) = Wx + b, scores of order one.
Network linear_net(int c, int h, int w, int k, std::uint64_t seed);

/// True when both inputs hit the same relu signs and pooling winners, so the
/// network is one affine map on the segment between them.
bool same_activation_pattern(const Network& net, const Tensor& a, const Tensor& b);

/// Central-difference directional derivatives against the analytic
/// gradients of every differentiable op.
std::vector<CheckResult> gradient_checks(int probes_per_op, std::uint64_t seed);

/// OpenMP kernels against the serial reference loops.
std::vector<CheckResult> oracle_checks(int trials, std::uint64_t seed);

/// ||T(x+e) - T(x) - T(e)||_inf for every crop-based foveation (windows
/// fixed from x), and the affine identity for Embed.
std::vector<CheckResult> linearity_checks(int pairs, std::uint64_t seed);

/// Object-masked + background-masked == eps, exactly (worst = mismatching entries).
CheckResult mask_partition_check(int pairs, std::uint64_t seed);

/// Smallest alpha on a fine geometric grid (ratio `fine_factor`, from
/// cfg.grid.min / 256 up to `limit`) at which x + alpha * eps/|eps| misclassifies;
/// negative when none does.
double rescan_min_alpha(const Classifier& model, const Tensor& x, int label, const Tensor& eps, NormKind norm,
                        const AttackConfig& cfg, double limit, double fine_factor);

/// A random 3x32x32 image carrying a random box.
LabeledImage random_labeled_image(std::uint64_t seed, int height = 32, int width = 32);

}  // namespace fovea::checks

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fovea/kernels.hpp"
#include "fovea/model.hpp"
#include "fovea/tensor.hpp"

namespace fovea {

enum class FoveationKind { Identity, ObjectCrop, TenCrop, RandomCrops, ShiftCrops, SaliencyCrops, Embed };

std::string to_string(FoveationKind kind);
FoveationKind parse_foveation_kind(const std::string& s);

/// Declarative description of one foveation mechanism.
struct FoveationSpec {
  FoveationKind variant = FoveationKind::Identity;
  int n = 1;
  double background_fraction = 0.12;
  int out_h = 32;
  int out_w = 32;
  std::uint64_t seed = 0;

  void validate() const;
  /// Report label, e.g. "Object Crop MP" or "1 Shift MP-Object".
  std::string condition_name() const;
  /// Shift and Embed act on perturbations computed for the object crop.
  bool uses_object_perturbation() const;
  bool needs_box() const;

  friend bool operator==(const FoveationSpec&, const FoveationSpec&) = default;
};

FoveationSpec identity_spec(int out_h = 32, int out_w = 32);
FoveationSpec object_crop_spec(int out_h = 32, int out_w = 32);

/// Structured text (YAML) form: a sequence of single-key maps, the key
/// naming the variant and the nested map carrying its parameters.
std::string foveation_specs_to_text(const std::vector<FoveationSpec>& specs);
std::vector<FoveationSpec> foveation_specs_from_text(const std::string& text);

SampleWindow box_window(const BoundingBox& box);
SampleWindow full_window(int height, int width);

Tensor crop_window(const Tensor& image, const SampleWindow& window, int out_h, int out_w);
/// Extracts `box` and resizes it bilinearly. Throws for boxes under 2 px.
Tensor crop_resize(const Tensor& image, const BoundingBox& box, int out_h, int out_w);

/// One crop per box.
std::vector<Tensor> object_crop(const LabeledImage& img, int out_h, int out_w);

enum class MaskMode { Object, Background };

/// Image-shaped {0,1} mask, 1 inside `box` (Object) or outside (Background).
Tensor box_mask(const Shape& image_shape, const BoundingBox& box, MaskMode mode);
Tensor mask_perturbation(const Tensor& eps, const BoundingBox& box, MaskMode mode);

/// Per-axis side fraction of the ten-crop windows (about 79% of the area kept).
inline constexpr double kTenCropSide = 0.888;

/// Four corner windows and the center window, then the same five flipped.
std::vector<SampleWindow> ten_crop_windows(int height, int width);
std::vector<Tensor> ten_crop(const Tensor& image, int out_h, int out_w);

/// n distinct indices into the ten crops, uniform without replacement.
std::vector<int> random_crop_indices(int n, std::uint64_t seed);
std::vector<SampleWindow> random_crop_windows(int height, int width, int n, std::uint64_t seed);
std::vector<Tensor> random_crops(const Tensor& image, int n, int out_h, int out_w, std::uint64_t seed);

/// Box-sized windows displaced so that `background_fraction` of each window
/// falls outside the box. n = 10 gives every offset, smaller n a seeded subset.
std::vector<SampleWindow> shift_windows(const BoundingBox& box, int height, int width, int n,
                                        double background_fraction, std::uint64_t seed);
/// Fraction of the window area covered by the box.
double window_overlap_fraction(const SampleWindow& window, const BoundingBox& box);
std::vector<Tensor> shift_crops(const LabeledImage& img, int n, double background_fraction, int out_h,
                                int out_w, std::uint64_t seed);

/// Resizes `crop` to the primary box and pastes it into a copy of the image.
Tensor embed_crop(const LabeledImage& full, const Tensor& crop);

/// Blurred, max-normalized gradient magnitude of the top-class score, [H,W].
Tensor saliency_map(const Classifier& model, const Tensor& image);
/// Weighted k-means centroids of `map` (seeded, 20 Lloyd iterations), each
/// framed by a window of `fraction` of the image side. All-zero maps yield
/// centered windows.
std::vector<SampleWindow> saliency_windows(const Tensor& map, int n, std::uint64_t seed,
                                           double fraction = 0.6);
std::vector<Tensor> saliency_crops(const Classifier& model, const LabeledImage& img, int n, int out_h,
                                   int out_w, std::uint64_t seed);

ClassScores average_scores(const std::vector<ClassScores>& scores);

/// The crop windows `spec` extracts from `image`. Saliency windows are taken
/// from `saliency_model`'s map of `image`. Not defined for Embed.
std::vector<SampleWindow> foveation_windows(const FoveationSpec& spec, const LabeledImage& img,
                                            const Tensor& image, const Classifier* saliency_model);

/// f(T(x)) as a classifier over the full image: per-window logits are
/// averaged, and gradients are the averaged adjoints of each window.
class FoveatedClassifier : public Classifier {
 public:
  FoveatedClassifier(const Classifier& base, std::vector<SampleWindow> windows, Shape image_shape);
  Shape input_shape() const override { return image_shape_; }
  int num_classes() const override { return base_->num_classes(); }
  std::vector<float> logits(const Tensor& image) const override;
  std::vector<float> logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const override;
  const std::vector<SampleWindow>& windows() const { return windows_; }

 private:
  const Classifier* base_;
  std::vector<SampleWindow> windows_;
  Shape image_shape_;
  int out_h_;
  int out_w_;
};

}  // namespace fovea

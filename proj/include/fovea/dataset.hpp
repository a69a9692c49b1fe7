#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fovea/model.hpp"
#include "fovea/tensor.hpp"

namespace fovea {

struct SyntheticSpec {
  int num_images = 1000;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  double scale_min = 0.3;
  double scale_max = 0.8;
  /// Expected clutter items per 100 background pixels.
  double clutter_density = 1.5;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Distinct textured shape per class over a cluttered background. Labels
/// cycle through the classes; boxes tightly contain the object mask.
std::vector<LabeledImage> generate_synthetic(const SyntheticSpec& spec);

/// Writes images/<id>.fvt, previews/<id>.png, masks/<id>.fvt, labels.csv,
/// bboxes.csv and dataset.json.
void write_dataset(const std::vector<LabeledImage>& data, const SyntheticSpec& spec, const std::string& dir);
std::vector<LabeledImage> generate_synthetic(const SyntheticSpec& spec, const std::string& dir);

struct IngestError {
  std::string id;
  std::string message;
};

struct IngestResult {
  std::vector<LabeledImage> images;
  std::vector<IngestError> errors;
  int num_classes = 0;
};

/// Loads labels.csv (required), bboxes.csv and masks (optional). Images are
/// read from images/<id>.fvt, else images/<id>.png, else previews/<id>.png.
/// Unreadable images are reported per file; malformed CSV throws.
IngestResult ingest_dataset(const std::string& dir, int num_classes = 0);

Tensor read_png(const std::string& path);
void write_png(const Tensor& image, const std::string& path);

/// Train/held-out split by position: the first `fraction` of the list trains.
struct Split {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> heldout;
};
Split split_dataset(const std::vector<LabeledImage>& data, double train_fraction);

}  // namespace fovea

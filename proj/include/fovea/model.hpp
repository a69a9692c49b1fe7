#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fovea/network.hpp"
#include "fovea/tensor.hpp"

namespace fovea {

enum class ScoreStage { PreSoftmax, PostSoftmax };

struct ClassScores {
  std::vector<float> scores;
  ScoreStage stage = ScoreStage::PreSoftmax;

  std::size_t size() const { return scores.size(); }
  float operator[](std::size_t i) const { return scores[i]; }
  /// Highest score; lower class index wins ties.
  int top_class() const;
};

ClassScores softmax(const ClassScores& logits);

/// Class indices sorted by descending score, lower index first on ties.
std::vector<int> ranking(const std::vector<float>& scores);

/// 0 when `label` is among the `k_top` highest scores, 1 otherwise.
int top_k_error(const ClassScores& scores, int label, int k_top);

/// Pixel-space axis-aligned box; x0+w <= W and y0+h <= H.
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int w = 1;
  int h = 1;

  bool inside(int width, int height) const {
    return x0 >= 0 && y0 >= 0 && w > 0 && h > 0 && x0 + w <= width && y0 + h <= height;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct LabeledImage {
  std::string id;
  Tensor image;  // [C,H,W], values in [0,255]
  int label = 0;
  std::vector<BoundingBox> boxes;
  std::optional<Tensor> object_mask;  // [1,H,W] in {0,1} when known

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
  const BoundingBox& primary_box() const;
};

/// Anything that maps an image to class scores and can back-propagate a
/// single class score to the image. Implementations are immutable and safe
/// to share across threads.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Shape input_shape() const = 0;
  virtual int num_classes() const = 0;
  /// Pre-softmax scores.
  virtual std::vector<float> logits(const Tensor& image) const = 0;
  /// Pre-softmax scores; writes d(logit[cls])/d(image) into `grad`.
  virtual std::vector<float> logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const = 0;
};

class NetworkClassifier : public Classifier {
 public:
  explicit NetworkClassifier(const Network& net) : net_(&net) {}
  Shape input_shape() const override { return net_->spec().input_shape(); }
  int num_classes() const override { return net_->spec().num_classes(); }
  std::vector<float> logits(const Tensor& image) const override;
  std::vector<float> logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const override;
  const Network& network() const { return *net_; }

 private:
  const Network* net_;
};

ClassScores predict_scores(const Classifier& model, const Tensor& image, ScoreStage stage);
ClassScores predict_scores(const Network& model, const Tensor& image, ScoreStage stage);

struct TrainConfig {
  int epochs = 24;
  float lr = 0.01f;
  float momentum = 0.9f;
  int batch = 32;
  std::uint64_t seed = 1;
  float weight_decay = 5e-4f;
  double min_accuracy = 0.85;
  int max_attempts = 3;
};

struct TrainingMetadata {
  int epochs = 0;
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  int attempts = 1;
  double final_loss = 0.0;
};

struct Checkpoint {
  Network network;
  TrainingMetadata meta;
};

/// Produces the training view of a sample; defaults to the raw image.
using AugmentFn = std::function<Tensor(const LabeledImage&, std::mt19937_64&)>;

/// Held-out top-1 accuracy.
double evaluate_accuracy(const Network& net, const std::vector<LabeledImage>& data, int k_top = 1);

/// One SGD-with-momentum run on softmax cross-entropy, deterministic in
/// `config.seed`. Throws Error when the loss becomes non-finite.
Checkpoint train_once(const ModelSpec& spec, const std::vector<LabeledImage>& train_set,
                      const std::vector<LabeledImage>& heldout, const TrainConfig& config,
                      const AugmentFn& augment = {});

/// Retries with derived seeds until held-out accuracy reaches
/// `config.min_accuracy` or `config.max_attempts` runs are used; returns the
/// best run.
Checkpoint train(const ModelSpec& spec, const std::vector<LabeledImage>& train_set,
                 const std::vector<LabeledImage>& heldout, const TrainConfig& config,
                 const AugmentFn& augment = {});

// Checkpoint file: "FOVN", u32 version (1), u32 length + UTF-8 model
// description, every weight tensor in FVT1, u32 length + JSON metadata.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fovea

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fovea/model.hpp"

namespace fovea {

int ClassScores::top_class() const { return ranking(scores).front(); }

std::vector<int> ranking(const std::vector<float>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

ClassScores softmax(const ClassScores& logits) {
  if (logits.stage == ScoreStage::PostSoftmax) return logits;
  ClassScores out{logits.scores, ScoreStage::PostSoftmax};
  if (out.scores.empty()) return out;
  const float m = *std::max_element(out.scores.begin(), out.scores.end());
  double sum = 0.0;
  std::vector<double> e(out.scores.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = std::exp(static_cast<double>(out.scores[i]) - m);
    sum += e[i];
  }
  for (std::size_t i = 0; i < e.size(); ++i) out.scores[i] = static_cast<float>(e[i] / sum);
  return out;
}

int top_k_error(const ClassScores& scores, int label, int k_top) {
  const int k = static_cast<int>(scores.size());
  if (label < 0 || label >= k) throw ShapeError("label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
  if (k_top < 1 || k_top > k) throw ShapeError("k_top " + std::to_string(k_top) + " outside [1," + std::to_string(k) + "]");
  const float s = scores.scores[static_cast<std::size_t>(label)];
  int ahead = 0;
  for (int j = 0; j < k; ++j) {
    const float v = scores.scores[static_cast<std::size_t>(j)];
    if (v > s || (v == s && j < label)) ++ahead;
  }
  return ahead < k_top ? 0 : 1;
}

const BoundingBox& LabeledImage::primary_box() const {
  if (boxes.empty()) throw Error("image '" + id + "' has no bounding box");
  return boxes.front();
}

std::vector<float> NetworkClassifier::logits(const Tensor& image) const {
  return net_->forward(image).vec();
}

std::vector<float> NetworkClassifier::logits_and_gradient(const Tensor& image, int cls, Tensor& grad) const {
  ForwardTrace trace;
  Tensor out = net_->forward(image, trace);
  Tensor upstream(out.shape());
  upstream[static_cast<std::size_t>(cls)] = 1.0f;
  grad = net_->input_gradient(trace, upstream);
  return out.vec();
}

ClassScores predict_scores(const Classifier& model, const Tensor& image, ScoreStage stage) {
  ClassScores s{model.logits(image), ScoreStage::PreSoftmax};
  return stage == ScoreStage::PreSoftmax ? s : softmax(s);
}

ClassScores predict_scores(const Network& model, const Tensor& image, ScoreStage stage) {
  return predict_scores(NetworkClassifier(model), image, stage);
}

}  // namespace fovea

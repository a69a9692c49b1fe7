#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fovea/model.hpp"
#include "fovea/rng.hpp"

namespace fovea {

double evaluate_accuracy(const Network& net, const std::vector<LabeledImage>& data, int k_top) {
  if (data.empty()) return 0.0;
  std::vector<int> correct(data.size(), 0);
  const int n = static_cast<int>(data.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const ClassScores s{net.forward(data[i].image).vec(), ScoreStage::PreSoftmax};
    correct[i] = 1 - top_k_error(s, data[i].label, k_top);
  }
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0)) / n;
}

namespace {

struct SampleResult {
  NetworkGradients grads;
  double loss = 0.0;
};

SampleResult sample_gradient(const Network& net, const Tensor& x, int label) {
  ForwardTrace trace;
  const Tensor logits = net.forward(x, trace);
  const ClassScores p = softmax({logits.vec(), ScoreStage::PreSoftmax});
  Tensor upstream(logits.shape());
  for (std::size_t j = 0; j < p.size(); ++j) upstream[j] = p.scores[j];
  upstream[static_cast<std::size_t>(label)] -= 1.0f;
  SampleResult r;
  double top = -INFINITY;
  for (float v : logits.values()) top = std::max(top, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits.values()) sum += std::exp(static_cast<double>(v) - top);
  r.loss = top + std::log(sum) - static_cast<double>(logits[static_cast<std::size_t>(label)]);
  r.grads = net.backward(trace, upstream, true);
  return r;
}

}  // namespace

Checkpoint train_once(const ModelSpec& spec, const std::vector<LabeledImage>& train_set,
                      const std::vector<LabeledImage>& heldout, const TrainConfig& config,
                      const AugmentFn& augment) {
  if (train_set.empty()) throw Error("train: empty dataset");
  if (config.batch < 1 || config.epochs < 0) throw Error("train: batch must be >= 1 and epochs >= 0");
  const int k = spec.num_classes();
  for (const auto& s : train_set) {
    if (s.label < 0 || s.label >= k) throw Error("train: label " + std::to_string(s.label) + " of '" + s.id + "' >= k");
  }

  Checkpoint ckpt{Network(spec), {}};
  Network& net = ckpt.network;
  net.initialize(derive_seed(config.seed, {0x1417}));
  std::vector<LayerParams> velocity;
  for (const auto& p : net.params()) velocity.push_back({zeros_like(p.weights), zeros_like(p.bias)});

  std::mt19937_64 order_rng(derive_seed(config.seed, {0x5eed}));
  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  double last_loss = 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    const float lr = static_cast<float>(
        config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, config.epochs))));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const int count = static_cast<int>(std::min<std::size_t>(config.batch, order.size() - start));
      std::vector<SampleResult> results(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
      for (int b = 0; b < count; ++b) {
        const int idx = order[start + static_cast<std::size_t>(b)];
        const LabeledImage& sample = train_set[static_cast<std::size_t>(idx)];
        if (augment) {
          std::mt19937_64 rng(derive_seed(config.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)}));
          results[b] = sample_gradient(net, augment(sample, rng), sample.label);
        } else {
          results[b] = sample_gradient(net, sample.image, sample.label);
        }
      }
      double batch_loss = 0.0;
      for (const auto& r : results) batch_loss += r.loss;
      if (!std::isfinite(batch_loss)) {
        throw Error("train: loss diverged (non-finite) at epoch " + std::to_string(epoch) + ", sample offset " +
                    std::to_string(start));
      }
      epoch_loss += batch_loss;
      const float inv = 1.0f / static_cast<float>(count);
      for (std::size_t layer = 0; layer < net.params().size(); ++layer) {
        LayerParams& p = net.params()[layer];
        if (p.weights.empty()) continue;
        Tensor gw = zeros_like(p.weights);
        Tensor gb = zeros_like(p.bias);
        for (const auto& r : results) {
          axpy(inv, r.grads.params[layer].weights, gw);
          axpy(inv, r.grads.params[layer].bias, gb);
        }
        axpy(config.weight_decay, p.weights, gw);
        LayerParams& v = velocity[layer];
        for (std::size_t i = 0; i < gw.size(); ++i) {
          v.weights[i] = config.momentum * v.weights[i] - lr * gw[i];
          p.weights[i] += v.weights[i];
        }
        for (std::size_t i = 0; i < gb.size(); ++i) {
          v.bias[i] = config.momentum * v.bias[i] - lr * gb[i];
          p.bias[i] += v.bias[i];
        }
      }
    }
    last_loss = epoch_loss / static_cast<double>(order.size());
  }

  ckpt.meta.epochs = config.epochs;
  ckpt.meta.seed = config.seed;
  ckpt.meta.final_loss = last_loss;
  ckpt.meta.final_accuracy = heldout.empty() ? 0.0 : evaluate_accuracy(net, heldout, 1);
  return ckpt;
}

Checkpoint train(const ModelSpec& spec, const std::vector<LabeledImage>& train_set,
                 const std::vector<LabeledImage>& heldout, const TrainConfig& config,
                 const AugmentFn& augment) {
  std::optional<Checkpoint> best;
  const int attempts = std::max(1, config.max_attempts);
  for (int a = 0; a < attempts; ++a) {
    TrainConfig c = config;
    if (a > 0) c.seed = derive_seed(config.seed, {0xa77e, static_cast<std::uint64_t>(a)});
    Checkpoint ck = train_once(spec, train_set, heldout, c, augment);
    ck.meta.attempts = a + 1;
    const bool good = ck.meta.final_accuracy >= config.min_accuracy;
    if (!best || ck.meta.final_accuracy > best->meta.final_accuracy) best = std::move(ck);
    if (good) break;
  }
  return std::move(*best);
}

}  // namespace fovea

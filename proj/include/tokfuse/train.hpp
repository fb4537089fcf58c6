#pragma once

// Desk-scale training surrogate: regress the projector output onto a fixed
// random linear map of the 2x2-average-pooled last block, with full-batch
// gradient descent over a handful of synthetic stacks.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tokfuse/features.hpp"
#include "tokfuse/fusion.hpp"
#include "tokfuse/ops.hpp"
#include "tokfuse/tape.hpp"

namespace tokfuse {

struct TrainOptions {
  double learning_rate = 1e-3;
  std::size_t steps = 200;
  std::size_t batch = 4;
};

// Small STF configuration for toy training: 2 of 4 blocks, 16x16x16 maps,
// 2x2 fusion into 64 tokens of width 128.
inline FusionConfig toy_config() {
  FusionConfig c;
  c.encoder_depth = 4;
  c.blocks = 2;
  c.height = 16;
  c.width = 16;
  c.channels = 16;
  c.kernel = 2;
  c.fused_tokens = 1;
  c.llm_width = 128;
  c.mbtf_hidden = 64;
  c.stf_hidden = 256;
  return c;
}

struct TrainResult {
  std::vector<double> losses;  // loss before each update; steps + 1 entries

  double initial() const { return losses.front(); }
  double final() const { return losses.back(); }
};

// Target tokens: avgpool2x2(last block) mapped C1 -> C3 by a fixed matrix
// with N(0, 1/C1) entries.
inline std::vector<Tensor> regression_targets(
    const std::vector<FeatureStack>& batch, const FusionConfig& c) {
  std::seed_seq seq{static_cast<std::uint32_t>(c.seed),
                    static_cast<std::uint32_t>(c.seed >> 32), 0x7a26e7u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<float> dist(
      0.0f, static_cast<float>(1.0 / std::sqrt(c.channels)));
  Tensor map({1, 1, c.channels, c.llm_width});
  for (float& v : map.data()) v = dist(rng);
  const Tensor no_bias;
  std::vector<Tensor> targets;
  for (const FeatureStack& s : batch) {
    Tensor pooled = ops::avgpool2x2(s.last());
    targets.push_back(
        ops::reshape_tokens(ops::conv2d(pooled, map, no_bias, 1), 1));
  }
  return targets;
}

// Mean over the batch of the summed squared error; accumulates parameter
// gradients when params grads are zeroed beforehand.
inline double batch_loss(const std::vector<FeatureStack>& batch,
                         const std::vector<Tensor>& targets,
                         ModuleParams& params, const FusionConfig& c,
                         bool with_grad) {
  double total = 0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tape tape(with_grad);
    const auto maps = push_stack(tape, batch[b]);
    const auto out = graph::projector(tape, std::span<const std::size_t>(maps),
                                      params, c);
    const Tensor& y = tape.value(out);
    const Tensor& t = targets[b];
    Tensor dy(y.shape());
    double loss = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y[i]) - t[i];
      loss += d * d;
      dy[i] = static_cast<float>(2.0 * d * scale);
    }
    total += loss * scale;
    if (with_grad) tape.backward(out, dy);
  }
  return total;
}

inline TrainResult toy_train(const FusionConfig& config,
                             const TrainOptions& opts = {}) {
  config.validate();
  if (config.kernel != 2 || config.fused_tokens != 1 ||
      config.height % 2 != 0 || config.width % 2 != 0) {
    throw ConfigError("toy training needs k=2, E=1 and even extents so the "
                      "projector output aligns with the pooled target");
  }
  if (opts.batch == 0) throw ConfigError("batch must be positive");

  std::vector<FeatureStack> batch;
  for (std::size_t b = 0; b < opts.batch; ++b) {
    batch.push_back(gen_features(config.seed * 1000 + b, config));
  }
  const auto targets = regression_targets(batch, config);
  ModuleParams params = init_params(config);
  const float lr = static_cast<float>(opts.learning_rate);

  TrainResult result;
  for (std::size_t step = 0; step <= opts.steps; ++step) {
    const bool update = step < opts.steps;
    params.zero_grad();
    const double loss = batch_loss(batch, targets, params, config, update);
    if (!std::isfinite(loss)) {
      throw NumericError("toy training diverged at step " +
                         std::to_string(step));
    }
    result.losses.push_back(loss);
    if (!update) break;
    for (auto& [id, layer] : params.layers()) {
      for (Tensor* t : {&layer.weight, &layer.bias}) {
        auto w = t->data();
        const auto g = t->grad();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      }
    }
  }
  return result;
}

}  // namespace tokfuse

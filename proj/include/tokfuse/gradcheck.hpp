#pragma once

// Finite-difference verification of the hand-written backward passes.
//
// The probe objective is the sum of squares of the module output. Each
// parameter block (a layer's weight or bias) is checked on a seeded subsample
// of entries: the analytic gradient from one backward pass is compared with
// the central difference (f(t+e) - f(t-e)) / ((t+e) - (t-e)), where the
// denominator uses the rounded perturbed values actually stored.
//
// Checks run on the double instantiation by default. At float storage the
// central difference carries a rounding floor of roughly u * |f| / eps,
// which swamps small gradient entries at eps = 1e-3.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokfuse/fusion.hpp"
#include "tokfuse/tape.hpp"

namespace tokfuse::gradcheck {

enum class Module { mbtf, stf, projector, avgpool, tokenconcat };

inline std::string_view to_string(Module m) {
  switch (m) {
    case Module::mbtf: return "mbtf";
    case Module::stf: return "stf";
    case Module::projector: return "projector";
    case Module::avgpool: return "avgpool";
    case Module::tokenconcat: return "tokenconcat";
  }
  return "?";
}

inline Module parse_module(std::string_view name) {
  for (Module m : {Module::mbtf, Module::stf, Module::projector,
                   Module::avgpool, Module::tokenconcat}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown gradcheck module '" + std::string(name) + "'");
}

struct Options {
  double epsilon = 1e-3;
  double threshold = 1e-3;
  std::size_t samples_per_block = 200;
  // Inputs whose GeLU pre-activations come closer than this to zero are
  // redrawn.
  double min_preactivation = 1e-4;
};

struct BlockResult {
  std::string name;  // e.g. "stf.conv2.weight"
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  bool pass = false;
};

struct GradReport {
  std::string module;
  std::uint64_t seed = 0;
  double epsilon = 0;
  double threshold = 0;
  std::vector<BlockResult> blocks;

  bool passed() const {
    return !blocks.empty() &&
           std::all_of(blocks.begin(), blocks.end(),
                       [](const BlockResult& b) { return b.pass; });
  }
  double max_rel_error() const {
    double m = 0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
    return m;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
}

// Small configuration that keeps a full check well under a second.
inline FusionConfig tiny_config() {
  FusionConfig c;
  c.encoder_depth = 4;
  c.blocks = 2;
  c.height = 4;
  c.width = 4;
  c.channels = 4;
  c.kernel = 2;
  c.fused_tokens = 1;
  c.llm_width = 8;
  c.mbtf_hidden = 8;
  c.stf_hidden = 16;
  return c;
}

inline ProjectorKind projector_kind(Module m) {
  switch (m) {
    case Module::avgpool: return ProjectorKind::avgpool;
    case Module::tokenconcat: return ProjectorKind::tokenconcat;
    default: return ProjectorKind::stf;
  }
}

inline std::vector<std::string> module_layers(Module m) {
  switch (m) {
    case Module::mbtf: return {"mbtf.conv1", "mbtf.conv2"};
    case Module::stf: return {"stf.conv1", "stf.conv2", "stf.conv3"};
    case Module::projector:
      return {"mbtf.conv1", "mbtf.conv2", "stf.conv1", "stf.conv2",
              "stf.conv3"};
    case Module::avgpool: return {"avgpool.fc1", "avgpool.fc2"};
    case Module::tokenconcat: return {"tokenconcat.fc1", "tokenconcat.fc2"};
  }
  return {};
}

// Draws float N(0,1) values so both precisions see identical inputs.
template <class T>
BasicTensor<T> random_normal(Shape shape, std::mt19937_64& rng) {
  BasicTensor<T> t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Module inputs: the M block maps for mbtf/projector, a single fused map
// for stf, the last block map for the baselines.
template <class T>
std::vector<BasicTensor<T>> draw_inputs(Module m, const FusionConfig& c,
                                        std::mt19937_64& rng) {
  const Shape map{c.height, c.width, c.channels};
  std::vector<BasicTensor<T>> inputs;
  const std::size_t count =
      (m == Module::mbtf || m == Module::projector) ? c.blocks : 1;
  for (std::size_t i = 0; i < count; ++i) {
    inputs.push_back(random_normal<T>(map, rng));
  }
  return inputs;
}

// Records the module on the tape and returns its output variable.
template <class T, class Params>
std::size_t record(BasicTape<T>& tape, Module m,
                   std::span<const BasicTensor<T>> inputs, Params& params,
                   const FusionConfig& c) {
  std::vector<std::size_t> vars;
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  const std::span<const std::size_t> v(vars);
  switch (m) {
    case Module::mbtf: return graph::mbtf(tape, v, params, c);
    case Module::stf: return graph::stf(tape, v.front(), params, c);
    case Module::projector: return graph::projector(tape, v, params, c);
    case Module::avgpool: return graph::avgpool(tape, v.front(), params, c);
    case Module::tokenconcat:
      return graph::tokenconcat(tape, v.front(), params, c);
  }
  throw ConfigError("unhandled module");
}

template <class T>
double sum_of_squares(std::span<const T> v) {
  double s = 0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return s;
}

template <class T>
double probe_loss(Module m, std::span<const BasicTensor<T>> inputs,
                  const BasicModuleParams<T>& params, const FusionConfig& c) {
  BasicTape<T> tape(false);
  const std::size_t out = record(tape, m, inputs, params, c);
  const double loss = sum_of_squares<T>(tape.value(out).data());
  if (!std::isfinite(loss)) {
    throw NumericError("gradcheck: non-finite probe loss for module " +
                       std::string(to_string(m)));
  }
  return loss;
}

// Fills every layer's grad slots with d(sum y^2)/d(theta).
template <class T>
void analytic_gradients(Module m, std::span<const BasicTensor<T>> inputs,
                        BasicModuleParams<T>& params, const FusionConfig& c) {
  params.zero_grad();
  BasicTape<T> tape(true);
  const std::size_t out = record(tape, m, inputs, params, c);
  const BasicTensor<T>& y = tape.value(out);
  BasicTensor<T> dy(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dy[i] = T{2} * y[i];
  tape.backward(out, dy);
}

inline std::vector<std::size_t> sample_indices(std::size_t size,
                                               std::size_t count,
                                               std::uint64_t seed,
                                               std::size_t block) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (size <= count) return all;
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(block), 0x9c4du};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> picked;
  std::sample(all.begin(), all.end(), std::back_inserter(picked), count, rng);
  return picked;
}

// Draws inputs from N(0,1) until no GeLU pre-activation is within
// opts.min_preactivation of zero.
template <class T>
std::vector<BasicTensor<T>> draw_checked_inputs(
    Module m, const FusionConfig& c, const BasicModuleParams<T>& params,
    std::uint64_t seed, const Options& opts) {
  std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto inputs = draw_inputs<T>(m, c, rng);
    BasicTape<T> tape(true);
    record(tape, m, std::span<const BasicTensor<T>>(inputs), params, c);
    if (tape.min_abs_gelu_input() >= opts.min_preactivation) return inputs;
  }
  throw NumericError("gradcheck: could not draw inputs away from zero "
                     "pre-activations");
}

struct Probe {
  double analytic;
  double numeric;
};

template <class T>
Probe probe_entry(Module m, std::span<const BasicTensor<T>> inputs,
                  BasicModuleParams<T>& params, const FusionConfig& c,
                  BasicTensor<T>& target, std::size_t index, double epsilon,
                  double analytic) {
  const T original = target[index];
  const T plus = static_cast<T>(original + epsilon);
  const T minus = static_cast<T>(original - epsilon);
  target[index] = plus;
  const double f_plus = probe_loss(m, inputs, params, c);
  target[index] = minus;
  const double f_minus = probe_loss(m, inputs, params, c);
  target[index] = original;
  const double step = static_cast<double>(plus) - static_cast<double>(minus);
  return {analytic, (f_plus - f_minus) / step};
}

template <class T = double>
GradReport check_module(Module m, FusionConfig config, std::uint64_t seed,
                        const Options& opts = {}) {
  config.seed = seed;
  config.validate();
  auto params = init_params<T>(config, projector_kind(m));
  const auto inputs = draw_checked_inputs<T>(m, config, params, seed, opts);
  const std::span<const BasicTensor<T>> in(inputs);

  analytic_gradients(m, in, params, config);

  GradReport report;
  report.module = std::string(to_string(m));
  report.seed = seed;
  report.epsilon = opts.epsilon;
  report.threshold = opts.threshold;

  std::size_t block_ordinal = 0;
  for (const std::string& id : module_layers(m)) {
    auto& layer = params.at(id);
    for (auto [suffix, tensor] :
         {std::pair<const char*, BasicTensor<T>*>{".weight", &layer.weight},
          std::pair<const char*, BasicTensor<T>*>{".bias", &layer.bias}}) {
      const std::vector<T> grad(tensor->grad().begin(),
                                tensor->grad().end());
      BlockResult block;
      block.name = id + suffix;
      for (std::size_t idx : sample_indices(tensor->size(),
                                            opts.samples_per_block, seed,
                                            block_ordinal)) {
        const Probe p = probe_entry(m, in, params, config, *tensor, idx,
                                    opts.epsilon, grad[idx]);
        const double err = relative_error(p.analytic, p.numeric);
        if (block.checked == 0 || err > block.max_rel_error) {
          block.max_rel_error = err;
          block.worst_index = idx;
          block.worst_analytic = p.analytic;
          block.worst_numeric = p.numeric;
        }
        ++block.checked;
      }
      block.pass = block.max_rel_error <= opts.threshold;
      report.blocks.push_back(std::move(block));
      ++block_ordinal;
    }
  }
  return report;
}

// Mean absolute difference between analytic and central-difference
// gradients over the sampled weights of every layer, for each step size.
template <class T = double>
std::vector<double> epsilon_sweep(Module m, FusionConfig config,
                                  std::uint64_t seed,
                                  std::span<const double> epsilons,
                                  std::size_t samples_per_block = 50) {
  config.seed = seed;
  config.validate();
  auto params = init_params<T>(config, projector_kind(m));
  const auto inputs =
      draw_checked_inputs<T>(m, config, params, seed, Options{});
  const std::span<const BasicTensor<T>> in(inputs);
  analytic_gradients(m, in, params, config);

  std::vector<double> errors;
  for (double eps : epsilons) {
    double total = 0;
    std::size_t n = 0;
    std::size_t ordinal = 0;
    for (const std::string& id : module_layers(m)) {
      auto& w = params.at(id).weight;
      const std::vector<T> grad(w.grad().begin(), w.grad().end());
      for (std::size_t idx :
           sample_indices(w.size(), samples_per_block, seed, ordinal++)) {
        const Probe p = probe_entry(m, in, params, config, w, idx, eps,
                                    grad[idx]);
        total += std::fabs(p.analytic - p.numeric);
        ++n;
      }
    }
    errors.push_back(total / static_cast<double>(n));
  }
  return errors;
}

}  // namespace tokfuse::gradcheck

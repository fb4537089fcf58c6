#pragma once

// Vision-token projectors: multi-block token fusion (MBTF) followed by
// spatial token fusion (STF), plus the AvgPool and TokenConcat baselines.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokfuse/ops.hpp"
#include "tokfuse/tape.hpp"
#include "tokfuse/tensor.hpp"

namespace tokfuse {

enum class Activation { gelu, identity };

enum class ProjectorKind { stf, avgpool, tokenconcat };

// Where an LLM-bound token sequence came from.
enum class Provenance { stf, avgpool, tokenconcat, identity };

inline std::string_view to_string(ProjectorKind kind) {
  switch (kind) {
    case ProjectorKind::stf: return "stf";
    case ProjectorKind::avgpool: return "avgpool";
    case ProjectorKind::tokenconcat: return "tokenconcat";
  }
  return "?";
}

inline ProjectorKind parse_projector(std::string_view name) {
  if (name == "stf") return ProjectorKind::stf;
  if (name == "avgpool") return ProjectorKind::avgpool;
  if (name == "tokenconcat") return ProjectorKind::tokenconcat;
  throw ConfigError("unknown projector '" + std::string(name) +
                    "' (expected stf, avgpool or tokenconcat)");
}

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::stf: return "stf";
    case Provenance::avgpool: return "avgpool";
    case Provenance::tokenconcat: return "tokenconcat";
    case Provenance::identity: return "identity";
  }
  return "?";
}

// Hyperparameters of the projector. Defaults reproduce the LLaVA-1.5-7B
// setting: CLIP ViT-L/14 at 336px (24 blocks, 24x24x1024 tokens), eight
// sampled blocks, 2x2 fusion into one token, 4096-wide LLM embeddings.
struct FusionConfig {
  std::size_t encoder_depth = 24;
  std::size_t blocks = 8;  // M
  std::size_t height = 24;  // H1
  std::size_t width = 24;   // W1
  std::size_t channels = 1024;  // C1
  std::size_t kernel = 2;       // k
  std::size_t fused_tokens = 1;  // E
  std::size_t llm_width = 4096;  // C3
  std::size_t mbtf_hidden = 4096;
  std::size_t stf_hidden = 16384;
  std::uint64_t seed = 0;
  Activation activation = Activation::gelu;

  // Channel width after the k x k fusion conv: k^2 * C1.
  std::size_t fused_width() const { return kernel * kernel * channels; }
  std::size_t fused_positions() const {
    return (height / kernel) * (width / kernel);
  }

  // Sets k and E and rescales stf_hidden to 4 * k^2 * C1.
  FusionConfig with_fusion(std::size_t k, std::size_t e) const {
    FusionConfig c = *this;
    c.kernel = k;
    c.fused_tokens = e;
    c.stf_hidden = 4 * k * k * channels;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (blocks < 1) fail("M must be at least 1");
    if (blocks > encoder_depth) fail("M exceeds encoder depth");
    if (encoder_depth % blocks != 0) {
      fail("encoder depth " + std::to_string(encoder_depth) +
           " is not divisible by M=" + std::to_string(blocks));
    }
    if (height == 0 || width == 0 || channels == 0) {
      fail("feature map extents must be positive");
    }
    if (kernel < 1) fail("k must be at least 1");
    if (height % kernel != 0 || width % kernel != 0) {
      fail("k=" + std::to_string(kernel) + " does not divide " +
           std::to_string(height) + "x" + std::to_string(width));
    }
    if (fused_tokens < 1 || fused_tokens > kernel * kernel) {
      fail("E=" + std::to_string(fused_tokens) + " outside [1, k^2]");
    }
    if (fused_width() % fused_tokens != 0) {
      fail("E=" + std::to_string(fused_tokens) +
           " does not divide k^2*C1=" + std::to_string(fused_width()));
    }
    if (llm_width == 0 || mbtf_hidden == 0 || stf_hidden == 0) {
      fail("layer widths must be positive");
    }
  }

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

// Evenly spaced 1-based block indices {d, 2d, ..., depth}, d = depth / M.
inline std::vector<std::uint32_t> select_block_indices(std::size_t depth,
                                                       std::size_t m) {
  if (m == 0 || m > depth || depth % m != 0) {
    throw ConfigError("cannot sample " + std::to_string(m) +
                      " evenly spaced blocks from depth " +
                      std::to_string(depth));
  }
  const std::size_t step = depth / m;
  std::vector<std::uint32_t> out;
  for (std::size_t i = 1; i <= m; ++i) {
    out.push_back(static_cast<std::uint32_t>(i * step));
  }
  return out;
}

// Feature maps from the selected encoder blocks, ascending block index.
template <class T>
struct BasicFeatureStack {
  std::vector<std::uint32_t> block_indices;
  std::vector<BasicTensor<T>> maps;  // each [H1, W1, C1]

  std::size_t size() const { return maps.size(); }
  const BasicTensor<T>& last() const { return maps.back(); }

  friend bool operator==(const BasicFeatureStack&,
                         const BasicFeatureStack&) = default;
};

template <class T>
struct BasicTokenSequence {
  BasicTensor<T> tokens;  // [L, width]
  Provenance provenance = Provenance::stf;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

// Learnable layers keyed by id, e.g. "mbtf.conv1" or "stf.conv3".
template <class T>
class BasicModuleParams {
 public:
  using Layer = BasicConv2dLayer<T>;
  using Map = std::map<std::string, Layer, std::less<>>;

  Layer& at(std::string_view id) {
    auto it = layers_.find(id);
    if (it == layers_.end()) {
      throw ConfigError("no layer '" + std::string(id) + "' in parameters");
    }
    return it->second;
  }
  const Layer& at(std::string_view id) const {
    auto it = layers_.find(id);
    if (it == layers_.end()) {
      throw ConfigError("no layer '" + std::string(id) + "' in parameters");
    }
    return it->second;
  }
  bool contains(std::string_view id) const { return layers_.contains(id); }

  void insert(std::string id, Layer layer) {
    layers_.insert_or_assign(std::move(id), std::move(layer));
  }

  Map& layers() { return layers_; }
  const Map& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [id, layer] : layers_) n += layer.parameter_count();
    return n;
  }

  void zero_grad() {
    for (auto& [id, layer] : layers_) layer.zero_grad();
  }

 private:
  Map layers_;
};

using FeatureStack = BasicFeatureStack<float>;
using TokenSequence = BasicTokenSequence<float>;
using ModuleParams = BasicModuleParams<float>;

template <class To, class From>
BasicFeatureStack<To> stack_cast(const BasicFeatureStack<From>& s) {
  BasicFeatureStack<To> out;
  out.block_indices = s.block_indices;
  for (const auto& m : s.maps) out.maps.push_back(tensor_cast<To>(m));
  return out;
}

template <class To, class From>
BasicModuleParams<To> params_cast(const BasicModuleParams<From>& p) {
  BasicModuleParams<To> out;
  for (const auto& [id, layer] : p.layers()) {
    out.insert(id, {tensor_cast<To>(layer.weight), tensor_cast<To>(layer.bias),
                    layer.stride});
  }
  return out;
}

// Static description of one conv layer; init_params and the FLOPs model
// both derive from this list.
struct LayerSpec {
  std::string id;
  std::size_t kernel;
  std::size_t stride;
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t out_height;
  std::size_t out_width;
};

inline std::vector<LayerSpec> layer_specs(const FusionConfig& c,
                                          ProjectorKind kind) {
  const std::size_t h2 = c.height / c.kernel, w2 = c.width / c.kernel;
  switch (kind) {
    case ProjectorKind::stf:
      return {
          {"mbtf.conv1", 1, 1, c.blocks * c.channels, c.mbtf_hidden, c.height,
           c.width},
          {"mbtf.conv2", 1, 1, c.mbtf_hidden, c.channels, c.height, c.width},
          {"stf.conv1", c.kernel, c.kernel, c.channels, c.fused_width(), h2,
           w2},
          {"stf.conv2", 1, 1, c.fused_width(), c.stf_hidden, h2, w2},
          {"stf.conv3", 1, 1, c.stf_hidden, c.fused_tokens * c.llm_width, h2,
           w2},
      };
    case ProjectorKind::avgpool:
      return {
          {"avgpool.fc1", 1, 1, c.channels, c.llm_width, c.height / 2,
           c.width / 2},
          {"avgpool.fc2", 1, 1, c.llm_width, c.llm_width, c.height / 2,
           c.width / 2},
      };
    case ProjectorKind::tokenconcat:
      return {
          {"tokenconcat.fc1", 1, 1, 4 * c.channels, c.llm_width, c.height / 2,
           c.width / 2},
          {"tokenconcat.fc2", 1, 1, c.llm_width, c.llm_width, c.height / 2,
           c.width / 2},
      };
  }
  return {};
}

// Weights ~ U(-b, b), b = sqrt(1 / fan_in); biases zero. Each layer draws
// float values from its own mt19937_64 stream seeded with (config.seed,
// layer ordinal), so identical seeds give bit-identical parameters and the
// double instantiation holds exactly the same values.
template <class T = float>
BasicModuleParams<T> init_params(const FusionConfig& config,
                                 ProjectorKind kind = ProjectorKind::stf) {
  config.validate();
  BasicModuleParams<T> params;
  const auto specs = layer_specs(config, kind);
  for (std::size_t ordinal = 0; ordinal < specs.size(); ++ordinal) {
    const LayerSpec& s = specs[ordinal];
    BasicConv2dLayer<T> layer;
    layer.stride = s.stride;
    layer.weight =
        BasicTensor<T>({s.kernel, s.kernel, s.in_channels, s.out_channels});
    layer.bias = BasicTensor<T>({s.out_channels});
    const std::size_t fan_in = s.kernel * s.kernel * s.in_channels;
    const float bound =
        static_cast<float>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                      static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(ordinal),
                      static_cast<std::uint32_t>(kind)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> dist(std::nextafter(-bound, 0.0f),
                                               bound);
    for (T& w : layer.weight.data()) w = static_cast<T>(dist(rng));
    params.insert(s.id, std::move(layer));
  }
  return params;
}

template <class T>
void check_stack(const BasicFeatureStack<T>& stack, const FusionConfig& c) {
  if (stack.maps.size() != c.blocks) {
    throw ShapeError("feature stack holds " +
                     std::to_string(stack.maps.size()) +
                     " maps, config expects M=" + std::to_string(c.blocks));
  }
  const Shape want{c.height, c.width, c.channels};
  for (const auto& m : stack.maps) {
    if (m.shape() != want) {
      throw ShapeError("feature map " + shape_string(m.shape()) +
                       " does not match config " + shape_string(want));
    }
  }
}

// Graph builders. Params is BasicModuleParams<T> (gradients accumulate into
// the layers) or const BasicModuleParams<T> (frozen).
namespace graph {

template <class T, class Params>
std::size_t conv_act(BasicTape<T>& tape, std::size_t x, Params& params,
                     std::string_view id, const FusionConfig& c) {
  auto& layer = params.at(id);
  if (layer.stride == 0) throw ConfigError("layer stride must be positive");
  const std::size_t y = tape.conv2d(x, layer);
  return c.activation == Activation::gelu ? tape.gelu(y) : y;
}

// concat -> conv1x1 -> GeLU -> conv1x1 -> GeLU, output [H1, W1, C1].
template <class T, class Params>
std::size_t mbtf(BasicTape<T>& tape, std::span<const std::size_t> maps,
                 Params& params, const FusionConfig& c) {
  if (maps.size() != c.blocks) {
    throw ShapeError("MBTF expects " + std::to_string(c.blocks) +
                     " maps, got " + std::to_string(maps.size()));
  }
  std::size_t x = maps.size() == 1 ? maps.front() : tape.concat_channels(maps);
  x = conv_act(tape, x, params, "mbtf.conv1", c);
  return conv_act(tape, x, params, "mbtf.conv2", c);
}

// conv k x k stride k -> conv1x1 -> conv1x1 (each followed by GeLU), then
// split every position into E tokens of width C3.
template <class T, class Params>
std::size_t stf(BasicTape<T>& tape, std::size_t fused, Params& params,
                const FusionConfig& c) {
  const Shape want{c.height, c.width, c.channels};
  if (tape.value(fused).shape() != want) {
    throw ShapeError("STF input " + shape_string(tape.value(fused).shape()) +
                     " does not match config " + shape_string(want));
  }
  const auto& conv1 = params.at("stf.conv1");
  if (conv1.kernel() != c.kernel || conv1.stride != c.kernel) {
    throw ConfigError("stf.conv1 kernel/stride does not match k=" +
                      std::to_string(c.kernel));
  }
  if (params.at("stf.conv3").out_channels() != c.fused_tokens * c.llm_width) {
    throw ConfigError("stf.conv3 width does not match E*C3");
  }
  std::size_t x = conv_act(tape, fused, params, "stf.conv1", c);
  x = conv_act(tape, x, params, "stf.conv2", c);
  x = conv_act(tape, x, params, "stf.conv3", c);
  return tape.reshape_tokens(x, c.fused_tokens);
}

template <class T, class Params>
std::size_t projector(BasicTape<T>& tape, std::span<const std::size_t> maps,
                      Params& params, const FusionConfig& c) {
  return stf(tape, mbtf(tape, maps, params, c), params, c);
}

// Two pointwise layers to C3 with GeLU, flattened to tokens.
template <class T, class Params>
std::size_t mlp_tokens(BasicTape<T>& tape, std::size_t x, Params& params,
                       std::string_view prefix, const FusionConfig& c) {
  const std::string p(prefix);
  x = conv_act(tape, x, params, p + ".fc1", c);
  x = conv_act(tape, x, params, p + ".fc2", c);
  return tape.reshape_tokens(x, 1);
}

template <class T, class Params>
std::size_t avgpool(BasicTape<T>& tape, std::size_t last, Params& params,
                    const FusionConfig& c) {
  return mlp_tokens(tape, tape.avgpool2x2(last), params, "avgpool", c);
}

template <class T, class Params>
std::size_t tokenconcat(BasicTape<T>& tape, std::size_t last, Params& params,
                        const FusionConfig& c) {
  return mlp_tokens(tape, tape.space_to_depth(last, 2), params, "tokenconcat",
                    c);
}

}  // namespace graph

template <class T>
std::vector<std::size_t> push_stack(BasicTape<T>& tape,
                                    const BasicFeatureStack<T>& s) {
  std::vector<std::size_t> vars;
  for (const auto& m : s.maps) vars.push_back(tape.input(m));
  return vars;
}

template <class T>
BasicTensor<T> mbtf_forward(const BasicFeatureStack<T>& stack,
                            const BasicModuleParams<T>& params,
                            const FusionConfig& config) {
  config.validate();
  check_stack(stack, config);
  BasicTape<T> tape(false);
  const auto maps = push_stack(tape, stack);
  return tape.value(graph::mbtf(tape, std::span<const std::size_t>(maps),
                                params, config));
}

template <class T>
BasicTokenSequence<T> stf_forward(const BasicTensor<T>& fused,
                                  const BasicModuleParams<T>& params,
                                  const FusionConfig& config) {
  config.validate();
  BasicTape<T> tape(false);
  const std::size_t x = tape.input(fused);
  return {tape.value(graph::stf(tape, x, params, config)), Provenance::stf};
}

template <class T>
BasicTokenSequence<T> avgpool_projector(const BasicFeatureStack<T>& stack,
                                        const BasicModuleParams<T>& params,
                                        const FusionConfig& config) {
  if (stack.maps.empty()) throw ShapeError("empty feature stack");
  BasicTape<T> tape(false);
  const std::size_t x = tape.input(stack.last());
  return {tape.value(graph::avgpool(tape, x, params, config)),
          Provenance::avgpool};
}

template <class T>
BasicTokenSequence<T> tokenconcat_projector(const BasicFeatureStack<T>& stack,
                                            const BasicModuleParams<T>& params,
                                            const FusionConfig& config) {
  if (stack.maps.empty()) throw ShapeError("empty feature stack");
  BasicTape<T> tape(false);
  const std::size_t x = tape.input(stack.last());
  return {tape.value(graph::tokenconcat(tape, x, params, config)),
          Provenance::tokenconcat};
}

template <class T>
BasicTokenSequence<T> projector_forward(
    const BasicFeatureStack<T>& stack, const BasicModuleParams<T>& params,
    const FusionConfig& config, ProjectorKind kind = ProjectorKind::stf) {
  config.validate();
  switch (kind) {
    case ProjectorKind::avgpool:
      return avgpool_projector(stack, params, config);
    case ProjectorKind::tokenconcat:
      return tokenconcat_projector(stack, params, config);
    case ProjectorKind::stf:
      break;
  }
  check_stack(stack, config);
  BasicTape<T> tape(false);
  const auto maps = push_stack(tape, stack);
  return {tape.value(graph::projector(tape, std::span<const std::size_t>(maps),
                                      params, config)),
          Provenance::stf};
}

}  // namespace tokfuse

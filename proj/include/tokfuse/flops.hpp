#pragma once

// Analytical cost model. LLM prefill is modelled as 2 * N * L FLOPs for a
// dense N-parameter decoder over L vision tokens (one multiply-add per
// parameter per token). The attention score term, O(L^2 * d), is left out:
// at L <= 576 and d = 4096 it is under 2% of the total.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tokfuse/fusion.hpp"

namespace tokfuse::flops {

inline constexpr double kDefaultLlmParams = 6.7e9;  // Vicuna-7B class

struct FlopsReport {
  std::string config_summary;
  std::size_t kernel = 0;
  std::size_t fused_tokens = 0;
  std::size_t vision_token_count = 0;
  double llm_params = 0;
  double llm_prefill_flops = 0;
  double projector_flops = 0;
  std::size_t projector_params = 0;
  double ratio_to_baseline = 0;

  double tflops() const { return llm_prefill_flops / 1e12; }
};

// (H1/k) * (W1/k) * E
inline std::size_t token_count(const FusionConfig& c) {
  c.validate();
  return c.fused_positions() * c.fused_tokens;
}

inline double llm_prefill_flops(double n_params, std::size_t vision_tokens) {
  return 2.0 * n_params * static_cast<double>(vision_tokens);
}

inline double layer_flops(const LayerSpec& s) {
  const double positions = static_cast<double>(s.out_height * s.out_width);
  const double macs = static_cast<double>(s.kernel * s.kernel * s.in_channels) *
                      static_cast<double>(s.out_channels) * positions;
  return 2.0 * macs + positions * static_cast<double>(s.out_channels);
}

inline double layers_flops(const std::vector<LayerSpec>& specs) {
  double total = 0;
  for (const auto& s : specs) total += layer_flops(s);
  return total;
}

inline double projector_flops(const FusionConfig& c,
                              ProjectorKind kind = ProjectorKind::stf) {
  c.validate();
  return layers_flops(layer_specs(c, kind));
}

inline std::size_t projector_params(const FusionConfig& c,
                                    ProjectorKind kind = ProjectorKind::stf) {
  std::size_t n = 0;
  for (const auto& s : layer_specs(c, kind)) {
    n += (s.kernel * s.kernel * s.in_channels + 1) * s.out_channels;
  }
  return n;
}

inline FlopsReport make_report(const FusionConfig& c,
                               double llm_params = kDefaultLlmParams,
                               ProjectorKind kind = ProjectorKind::stf) {
  FlopsReport r;
  r.kernel = c.kernel;
  r.fused_tokens = c.fused_tokens;
  r.vision_token_count =
      kind == ProjectorKind::stf ? token_count(c)
                                 : (c.height / 2) * (c.width / 2);
  r.llm_params = llm_params;
  r.llm_prefill_flops = llm_prefill_flops(llm_params, r.vision_token_count);
  r.projector_flops = projector_flops(c, kind);
  r.projector_params = projector_params(c, kind);
  r.ratio_to_baseline = static_cast<double>(r.vision_token_count) /
                        static_cast<double>(c.height * c.width);
  r.config_summary = std::string(to_string(kind)) + " k=" +
                     std::to_string(c.kernel) + " E=" +
                     std::to_string(c.fused_tokens) + " M=" +
                     std::to_string(c.blocks) + " " + std::to_string(c.height) +
                     "x" + std::to_string(c.width) + "x" +
                     std::to_string(c.channels);
  return r;
}

// The (k, E) pairs of the kernel-size ablation.
inline const std::vector<std::pair<std::size_t, std::size_t>>& grid_pairs() {
  static const std::vector<std::pair<std::size_t, std::size_t>> pairs{
      {1, 1}, {2, 1}, {2, 2}, {4, 4}, {4, 8}, {8, 16}, {8, 32}};
  return pairs;
}

inline std::vector<FlopsReport> kernel_grid(
    const FusionConfig& base = {}, double llm_params = kDefaultLlmParams) {
  std::vector<FlopsReport> out;
  for (auto [k, e] : grid_pairs()) {
    out.push_back(make_report(base.with_fusion(k, e), llm_params));
  }
  return out;
}

}  // namespace tokfuse::flops

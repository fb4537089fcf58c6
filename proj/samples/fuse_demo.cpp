// Runs the fusion projector and both baselines on one synthetic stack and
// prints token counts next to the prefill cost of each.

#include <cstdio>

#include "tokfuse/tokfuse.hpp"

int main() {
  using namespace tokfuse;
  FusionConfig c;
  c.encoder_depth = 8;
  c.blocks = 4;
  c.height = 8;
  c.width = 8;
  c.channels = 16;
  c.llm_width = 64;
  c.mbtf_hidden = 64;
  c = c.with_fusion(2, 1);

  const FeatureStack stack = gen_features(1, c);
  for (auto kind : {ProjectorKind::stf, ProjectorKind::avgpool,
                    ProjectorKind::tokenconcat}) {
    const ModuleParams params = init_params(c, kind);
    const TokenSequence seq = projector_forward(stack, params, c, kind);
    const auto report = flops::make_report(c, flops::kDefaultLlmParams, kind);
    std::printf("%-12s %3zu x %-3zu  prefill %.3f TFLOPs  projector %zu "
                "params\n",
                std::string(to_string(kind)).c_str(), seq.length(),
                seq.width(), report.tflops(), report.projector_params);
  }

  std::printf("\nk  E  tokens at 24x24\n");
  for (const auto& r : flops::kernel_grid()) {
    std::printf("%zu  %-2zu %zu\n", r.kernel, r.fused_tokens,
                r.vision_token_count);
  }
}

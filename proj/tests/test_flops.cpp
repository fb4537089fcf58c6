#include <gtest/gtest.h>

#include <cmath>

#include "tokfuse/flops.hpp"

using namespace tokfuse;

namespace {

double within(double got, double want) { return std::fabs(got / want - 1); }

}  // namespace

TEST(TokenCount, Examples) {
  const FusionConfig c;
  EXPECT_EQ(flops::token_count(c.with_fusion(2, 1)), 144u);
  EXPECT_EQ(flops::token_count(c.with_fusion(1, 1)), 576u);
  EXPECT_EQ(flops::token_count(c.with_fusion(8, 32)), 288u);
  EXPECT_EQ(flops::token_count(c.with_fusion(1, 1)), c.height * c.width);
}

TEST(Prefill, Examples) {
  EXPECT_LT(within(flops::llm_prefill_flops(6.7e9, 576), 7.6e12), 0.05);
  EXPECT_LT(within(flops::llm_prefill_flops(6.7e9, 144), 1.9e12), 0.05);
  EXPECT_EQ(flops::llm_prefill_flops(6.7e9, 0), 0.0);
  EXPECT_EQ(flops::llm_prefill_flops(123.0, 0), 0.0);
  EXPECT_DOUBLE_EQ(flops::llm_prefill_flops(6.7e9, 576), 2 * 6.7e9 * 576);
}

TEST(Prefill, LinearInTokens) {
  for (std::size_t l : {1u, 144u, 288u, 1000u}) {
    EXPECT_EQ(flops::llm_prefill_flops(6.7e9, 2 * l) /
                  flops::llm_prefill_flops(6.7e9, l),
              2.0);
  }
}

TEST(ProjectorFlops, DefaultLayerSum) {
  // 2*k^2*Cin*Cout*HW per layer plus Cout*HW bias adds.
  const double hw1 = 576, hw2 = 144;
  const double want = (2 * 8192.0 * 4096 + 4096) * hw1 +
                      (2 * 4096.0 * 1024 + 1024) * hw1 +
                      (2 * 4.0 * 1024 * 4096 + 4096) * hw2 +
                      (2 * 4096.0 * 16384 + 16384) * hw2 +
                      (2 * 16384.0 * 4096 + 4096) * hw2;
  const double got = flops::projector_flops(FusionConfig{});
  EXPECT_EQ(got, want);
  EXPECT_EQ(got, 86'979'575'808.0);
  // Well below the LLM cost it saves, though not 100x below.
  const double prefill_576 = flops::llm_prefill_flops(6.7e9, 576);
  const double prefill_144 = flops::llm_prefill_flops(6.7e9, 144);
  EXPECT_LT(got / prefill_576, 0.02);
  EXPECT_LT(got / prefill_144, 0.05);
}

TEST(ProjectorFlops, EmptyLayerListIsZero) {
  EXPECT_EQ(flops::layers_flops({}), 0.0);
}

TEST(ProjectorFlops, StfHiddenLinearity) {
  FusionConfig c;
  auto stf23 = [](const FusionConfig& x) {
    double s = 0;
    for (const auto& spec : layer_specs(x, ProjectorKind::stf)) {
      if (spec.id == "stf.conv2" || spec.id == "stf.conv3") {
        s += 2.0 * spec.kernel * spec.kernel * spec.in_channels *
             spec.out_channels * spec.out_height * spec.out_width;
      }
    }
    return s;
  };
  FusionConfig d = c;
  d.stf_hidden *= 2;
  EXPECT_EQ(stf23(d), 2 * stf23(c));
  const double others =
      flops::projector_flops(c) - stf23(c);
  const double bias_delta = 144.0 * c.stf_hidden;  // extra conv2 bias adds
  EXPECT_EQ(flops::projector_flops(d), others + 2 * stf23(c) + bias_delta);
}

TEST(Grid, KernelSizeRows) {
  const auto grid = flops::kernel_grid();
  ASSERT_EQ(grid.size(), 7u);
  const std::size_t tokens[] = {576, 144, 288, 144, 288, 144, 288};
  const double reference[] = {7.6, 1.9, 3.8, 1.9, 3.8, 1.9, 3.8};
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(grid[i].vision_token_count, tokens[i]);
    EXPECT_LT(within(grid[i].tflops(), reference[i]), 0.05) << i;
    EXPECT_DOUBLE_EQ(grid[i].ratio_to_baseline, tokens[i] / 576.0);
    EXPECT_GE(grid[i].projector_flops, 0);
  }
  EXPECT_EQ(grid[1].llm_prefill_flops, grid[3].llm_prefill_flops);
  EXPECT_EQ(grid[3].llm_prefill_flops, grid[5].llm_prefill_flops);
  EXPECT_EQ(grid[2].llm_prefill_flops, grid[4].llm_prefill_flops);
  EXPECT_EQ(grid[4].llm_prefill_flops, grid[6].llm_prefill_flops);
}

TEST(Report, Baselines) {
  const FusionConfig c;
  for (auto kind : {ProjectorKind::avgpool, ProjectorKind::tokenconcat}) {
    const auto r = flops::make_report(c, 6.7e9, kind);
    EXPECT_EQ(r.vision_token_count, 144u);
    EXPECT_DOUBLE_EQ(r.ratio_to_baseline, 0.25);
  }
  EXPECT_EQ(flops::projector_params(c, ProjectorKind::avgpool),
            (1024u + 1) * 4096 + (4096u + 1) * 4096);
  EXPECT_EQ(flops::projector_params(c, ProjectorKind::tokenconcat),
            (4096u + 1) * 4096 + (4096u + 1) * 4096);
}

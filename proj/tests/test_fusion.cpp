#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "tokfuse/flops.hpp"
#include "tokfuse/fusion.hpp"
#include "tokfuse/ops.hpp"

using namespace tokfuse;

namespace {

FusionConfig small(std::size_t k = 2, std::size_t e = 1) {
  FusionConfig c;
  c.encoder_depth = 4;
  c.blocks = 2;
  c.height = 4;
  c.width = 4;
  c.channels = 2;
  c.llm_width = 6;
  c.mbtf_hidden = 5;
  return c.with_fusion(k, e);
}

FeatureStack random_stack(const FusionConfig& c, std::mt19937_64& rng) {
  FeatureStack s;
  s.block_indices = select_block_indices(c.encoder_depth, c.blocks);
  for (std::size_t m = 0; m < c.blocks; ++m) {
    s.maps.push_back(
        oracle::random_tensor({c.height, c.width, c.channels}, rng));
  }
  return s;
}

}  // namespace

TEST(BlockIndices, EvenSpacing) {
  EXPECT_EQ(select_block_indices(24, 8),
            (std::vector<std::uint32_t>{3, 6, 9, 12, 15, 18, 21, 24}));
  EXPECT_EQ(select_block_indices(24, 1), (std::vector<std::uint32_t>{24}));
  EXPECT_EQ(select_block_indices(12, 4),
            (std::vector<std::uint32_t>{3, 6, 9, 12}));
  EXPECT_THROW(select_block_indices(24, 5), ConfigError);
  EXPECT_THROW(select_block_indices(24, 0), ConfigError);
}

TEST(Config, Validation) {
  FusionConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.fused_width(), c.llm_width);  // lossless width at defaults
  auto bad = [](auto mutate) {
    FusionConfig x;
    mutate(x);
    EXPECT_THROW(x.validate(), ConfigError);
  };
  bad([](FusionConfig& x) { x.blocks = 0; });
  bad([](FusionConfig& x) { x.blocks = 25; });
  bad([](FusionConfig& x) { x.blocks = 5; });
  bad([](FusionConfig& x) { x.kernel = 5; });
  bad([](FusionConfig& x) { x.kernel = 0; });
  bad([](FusionConfig& x) { x.fused_tokens = 5; });
  bad([](FusionConfig& x) { x.fused_tokens = 0; });
  bad([](FusionConfig& x) { x.llm_width = 0; });
  FusionConfig odd = small(2, 3);
  odd.channels = 1;
  EXPECT_THROW(odd.validate(), ConfigError);  // 3 does not divide 4
  EXPECT_EQ(c.with_fusion(4, 8).stf_hidden, 4u * 16 * 1024);
}

TEST(LayerShapes, DefaultConfig) {
  const auto specs = layer_specs(FusionConfig{}, ProjectorKind::stf);
  ASSERT_EQ(specs.size(), 5u);
  EXPECT_EQ(specs[0].in_channels, 8192u);
  EXPECT_EQ(specs[0].out_channels, 4096u);
  EXPECT_EQ(specs[1].out_channels, 1024u);
  EXPECT_EQ(specs[2].kernel, 2u);
  EXPECT_EQ(specs[2].out_channels, 4096u);
  EXPECT_EQ(specs[2].out_height, 12u);
  EXPECT_EQ(specs[3].out_channels, 16384u);
  EXPECT_EQ(specs[4].out_channels, 4096u);
}

TEST(InitParams, DeterministicAndBounded) {
  const FusionConfig c = small();
  const ModuleParams a = init_params(c), b = init_params(c);
  for (const auto& [id, layer] : a.layers()) {
    EXPECT_EQ(layer.weight, b.at(id).weight) << id;
    EXPECT_EQ(layer.bias, b.at(id).bias) << id;
    const double bound = std::sqrt(
        1.0 / (layer.kernel() * layer.kernel() * layer.in_channels()));
    for (float w : layer.weight.data()) {
      EXPECT_LT(std::fabs(w), bound) << id;
    }
    for (float v : layer.bias.data()) EXPECT_EQ(v, 0.0f);
  }
  FusionConfig other = c;
  other.seed = 1;
  EXPECT_NE(init_params(other).at("stf.conv1").weight,
            a.at("stf.conv1").weight);
}

TEST(InitParams, WeightMeanWithinThreeSigma) {
  FusionConfig c = small();
  c.channels = 16;
  c.mbtf_hidden = 64;
  c.llm_width = 64;
  c = c.with_fusion(2, 1);
  const ModuleParams p = init_params(c);
  for (const auto& [id, layer] : p.layers()) {
    const auto w = layer.weight.data();
    const double n = static_cast<double>(w.size());
    const double bound = std::sqrt(
        1.0 / (layer.kernel() * layer.kernel() * layer.in_channels()));
    const double sigma = bound / std::sqrt(3.0);
    const double mean = std::accumulate(w.begin(), w.end(), 0.0) / n;
    EXPECT_LT(std::fabs(mean), 3 * sigma / std::sqrt(n)) << id;
  }
}

TEST(ParameterCount, ClosedForm) {
  const FusionConfig c;
  const ModuleParams p = init_params(small());
  EXPECT_EQ(p.parameter_count(), oracle::stf_param_count(small()));
  EXPECT_EQ(flops::projector_params(c), oracle::stf_param_count(c));
  EXPECT_EQ(oracle::stf_param_count(c), 188'773'376u);
}

TEST(Mbtf, ZeroWeightsGiveZeroOutput) {
  const FusionConfig c = small();
  ModuleParams p = init_params(c);
  for (auto& [id, layer] : p.layers()) {
    for (float& w : layer.weight.data()) w = 0;
  }
  std::mt19937_64 rng(1);
  const Tensor y = mbtf_forward(random_stack(c, rng), p, c);
  EXPECT_EQ(y.shape(), (Shape{4, 4, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Mbtf, HandComputedTwoByTwo) {
  // M=2, 2x2 maps of one channel, hidden width 1.
  FusionConfig c;
  c.encoder_depth = 2;
  c.blocks = 2;
  c.height = 2;
  c.width = 2;
  c.channels = 1;
  c.kernel = 1;
  c.fused_tokens = 1;
  c.llm_width = 1;
  c.mbtf_hidden = 1;
  c.stf_hidden = 1;
  ModuleParams p = init_params(c);
  auto& l1 = p.at("mbtf.conv1");
  l1.weight = Tensor({1, 1, 2, 1}, std::vector<float>{0.5f, -1.0f});
  l1.bias = Tensor({1}, std::vector<float>{0.25f});
  auto& l2 = p.at("mbtf.conv2");
  l2.weight = Tensor({1, 1, 1, 1}, std::vector<float>{2.0f});
  l2.bias = Tensor({1}, std::vector<float>{-0.5f});
  FeatureStack s;
  s.maps.push_back(Tensor({2, 2, 1}, std::vector<float>{1, 2, -1, 0}));
  s.maps.push_back(Tensor({2, 2, 1}, std::vector<float>{0, 1, 1, -2}));
  const Tensor y = mbtf_forward(s, p, c);
  const double a[4] = {1, 2, -1, 0}, b[4] = {0, 1, 1, -2};
  for (int i = 0; i < 4; ++i) {
    const double h = oracle::gelu(0.5 * a[i] - 1.0 * b[i] + 0.25);
    EXPECT_NEAR(y[i], oracle::gelu(2.0 * h - 0.5), 1e-6) << i;
  }
}

TEST(Mbtf, WrongMapCount) {
  const FusionConfig c = small();
  std::mt19937_64 rng(2);
  FeatureStack s = random_stack(c, rng);
  s.maps.pop_back();
  EXPECT_THROW(mbtf_forward(s, init_params(c), c), ShapeError);
  EXPECT_THROW(projector_forward(s, init_params(c), c), ShapeError);
}

TEST(Stf, WindowByWindowOracle) {
  for (auto [k, e] : {std::pair<std::size_t, std::size_t>{2, 1}, {2, 2},
                      {2, 4}, {4, 8}, {1, 1}}) {
    FusionConfig c = small(k, e);
    c.stf_hidden = 7;
    c.seed = 0;
    const ModuleParams p = init_params(c);
    std::mt19937_64 rng(3);
    const Tensor fused = oracle::random_tensor({4, 4, 2}, rng);
    const TokenSequence seq = stf_forward(fused, p, c);
    const auto want = oracle::stf_windows(fused, p, c);
    ASSERT_EQ(seq.length(), want.size());
    ASSERT_EQ(seq.width(), c.llm_width);
    for (std::size_t t = 0; t < want.size(); ++t) {
      for (std::size_t j = 0; j < c.llm_width; ++j) {
        EXPECT_NEAR(seq.tokens[t * c.llm_width + j], want[t][j], 1e-5);
      }
    }
  }
}

TEST(Stf, IdentityPathWithoutNonlinearity) {
  FusionConfig c = small(1, 1);
  c.llm_width = c.channels;
  c.stf_hidden = c.channels;
  c.activation = Activation::identity;
  ModuleParams p = init_params(c);
  for (const char* id : {"stf.conv1", "stf.conv2", "stf.conv3"}) {
    auto& w = p.at(id).weight;
    for (float& v : w.data()) v = 0;
    for (std::size_t i = 0; i < c.channels; ++i) w[i * c.channels + i] = 1;
  }
  std::mt19937_64 rng(4);
  const Tensor fused = oracle::random_tensor({4, 4, 2}, rng);
  const TokenSequence seq = stf_forward(fused, p, c);
  EXPECT_EQ(seq.tokens.values(), fused.values());
}

TEST(Stf, LocalityOfWindows) {
  FusionConfig c = small(2, 2);
  const ModuleParams p = init_params(c);
  std::mt19937_64 rng(5);
  const Tensor fused = oracle::random_tensor({4, 4, 2}, rng);
  Tensor changed = fused;
  // window (1, 0) covers rows 2-3, cols 0-1
  changed.at(3, 1, 0) += 1.0f;
  changed.at(2, 0, 1) -= 2.0f;
  const Tensor a = stf_forward(fused, p, c).tokens;
  const Tensor b = stf_forward(changed, p, c).tokens;
  const std::size_t window = 1 * 2 + 0;
  for (std::size_t t = 0; t < 8; ++t) {
    bool same = true;
    for (std::size_t j = 0; j < c.llm_width; ++j) {
      same = same && a[t * c.llm_width + j] == b[t * c.llm_width + j];
    }
    if (t / c.fused_tokens == window) {
      EXPECT_FALSE(same) << t;
    } else {
      EXPECT_TRUE(same) << t;
    }
  }
}

TEST(Stf, ParamMismatch) {
  const FusionConfig c = small(2, 1);
  const ModuleParams p = init_params(c);
  std::mt19937_64 rng(6);
  const Tensor fused = oracle::random_tensor({4, 4, 2}, rng);
  EXPECT_THROW(stf_forward(fused, p, small(4, 1)), ConfigError);
  EXPECT_THROW(stf_forward(fused, p, small(2, 2)), ConfigError);
  EXPECT_THROW(stf_forward(Tensor({4, 4, 3}), p, c), ShapeError);
}

// Token-count law across every valid (k, E) on a 24 x 24 grid. Validity is
// judged at C1 = 1024; the forward pass runs with the smallest C1 for which
// E divides k^2 * C1 to keep it cheap.
TEST(Projector, TokenCountLaw) {
  for (std::size_t k : {1u, 2u, 3u, 4u, 6u, 8u}) {
    for (std::size_t e = 1; e <= k * k; ++e) {
      FusionConfig full = FusionConfig{}.with_fusion(k, e);
      bool valid = true;
      try {
        full.validate();
      } catch (const ConfigError&) {
        valid = false;
      }
      EXPECT_EQ(valid, (k * k * 1024) % e == 0) << k << "," << e;
      if (!valid) continue;
      EXPECT_EQ(flops::token_count(full), (24 / k) * (24 / k) * e);

      FusionConfig c;
      c.encoder_depth = 1;
      c.blocks = 1;
      c.channels = e / std::gcd(e, k * k);
      c.llm_width = 2;
      c.mbtf_hidden = 2;
      c = c.with_fusion(k, e);
      c.stf_hidden = 2;
      const ModuleParams p = init_params(c);
      const Tensor fused({24, 24, c.channels}, 0.5f);
      const TokenSequence seq = stf_forward(fused, p, c);
      EXPECT_EQ(seq.length(), (24 / k) * (24 / k) * e);
      EXPECT_EQ(seq.width(), 2u);
    }
  }
}

TEST(Projector, DegenerateMlpShape) {
  FusionConfig c;
  c.encoder_depth = 24;
  c.blocks = 1;
  c.channels = 2;
  c.llm_width = 3;
  c.mbtf_hidden = 3;
  c = c.with_fusion(1, 1);
  std::mt19937_64 rng(7);
  const TokenSequence seq =
      projector_forward(random_stack(c, rng), init_params(c), c);
  EXPECT_EQ(seq.length(), 576u);
  EXPECT_EQ(seq.width(), 3u);
}

TEST(Projector, DeterministicAndFinite) {
  const FusionConfig c = small(2, 2);
  std::mt19937_64 r1(8), r2(8);
  const FeatureStack s1 = random_stack(c, r1), s2 = random_stack(c, r2);
  const TokenSequence a = projector_forward(s1, init_params(c), c);
  const TokenSequence b = projector_forward(s2, init_params(c), c);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_TRUE(all_finite(a.tokens));
  EXPECT_EQ(a.provenance, Provenance::stf);
}

TEST(Baselines, ShapesAndConstants) {
  FusionConfig c = small();
  c.height = c.width = 8;
  std::mt19937_64 rng(9);
  const FeatureStack s = random_stack(c, rng);
  for (auto kind : {ProjectorKind::avgpool, ProjectorKind::tokenconcat}) {
    const TokenSequence seq =
        projector_forward(s, init_params(c, kind), c, kind);
    EXPECT_EQ(seq.length(), 16u);
    EXPECT_EQ(seq.width(), c.llm_width);
  }
  FeatureStack flat;
  flat.maps.push_back(Tensor({8, 8, 2}, 0.3f));
  for (auto kind : {ProjectorKind::avgpool, ProjectorKind::tokenconcat}) {
    const Tensor t =
        projector_forward(flat, init_params(c, kind), c, kind).tokens;
    for (std::size_t i = 1; i < t.dim(0); ++i) {
      for (std::size_t j = 0; j < t.dim(1); ++j) {
        EXPECT_EQ(t[i * t.dim(1) + j], t[j]);
      }
    }
  }
}

TEST(Baselines, UseOnlyTheLastBlock) {
  FusionConfig c = small();
  std::mt19937_64 rng(10);
  FeatureStack s = random_stack(c, rng);
  FeatureStack last_only;
  last_only.maps.push_back(s.last());
  for (auto kind : {ProjectorKind::avgpool, ProjectorKind::tokenconcat}) {
    const ModuleParams p = init_params(c, kind);
    EXPECT_EQ(projector_forward(s, p, c, kind).tokens,
              projector_forward(last_only, p, c, kind).tokens);
  }
}

TEST(Baselines, AvgPoolMatchesOracleBeforeMlp) {
  FusionConfig c = small();
  c.activation = Activation::identity;
  c.llm_width = c.channels;
  ModuleParams p = init_params(c, ProjectorKind::avgpool);
  for (const char* id : {"avgpool.fc1", "avgpool.fc2"}) {
    auto& w = p.at(id).weight;
    for (float& v : w.data()) v = 0;
    for (std::size_t i = 0; i < c.channels; ++i) w[i * c.channels + i] = 1;
  }
  std::mt19937_64 rng(11);
  const FeatureStack s = random_stack(c, rng);
  const Tensor got =
      projector_forward(s, p, c, ProjectorKind::avgpool).tokens;
  EXPECT_EQ(got.values(), oracle::avgpool(s.last()).values());
}

TEST(Baselines, TokenConcatOrderMatchesOracle) {
  FusionConfig c = small();
  c.activation = Activation::identity;
  c.llm_width = 4 * c.channels;
  ModuleParams p = init_params(c, ProjectorKind::tokenconcat);
  for (const char* id : {"tokenconcat.fc1", "tokenconcat.fc2"}) {
    auto& w = p.at(id).weight;
    for (float& v : w.data()) v = 0;
    for (std::size_t i = 0; i < c.llm_width; ++i) w[i * c.llm_width + i] = 1;
  }
  std::mt19937_64 rng(12);
  const FeatureStack s = random_stack(c, rng);
  const Tensor got =
      projector_forward(s, p, c, ProjectorKind::tokenconcat).tokens;
  EXPECT_EQ(got.values(), oracle::space_to_depth(s.last(), 2).values());
}

TEST(DefaultShapes, FullSizeBaselines) {
  // The full 24x24x1024 -> 144x4096 baselines run in well under a second.
  const FusionConfig c;
  FeatureStack s;
  s.maps.push_back(Tensor({24, 24, 1024}, 0.1f));
  for (auto kind : {ProjectorKind::avgpool, ProjectorKind::tokenconcat}) {
    const TokenSequence seq =
        projector_forward(s, init_params(c, kind), c, kind);
    EXPECT_EQ(seq.length(), 144u);
    EXPECT_EQ(seq.width(), 4096u);
  }
}

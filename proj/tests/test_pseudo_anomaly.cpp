#include <gtest/gtest.h>

#include "dstpm/pseudo_anomaly.hpp"
#include "support/convert.hpp"
#include "support/expect_error.hpp"
#include "support/fixture.hpp"

using namespace dstpm;
using test_support::to_vector;

TEST(Perlin, DeterministicAndBounded) {
  const auto a = perlin_field(64, 48, 4, 8, 99);
  const auto b = perlin_field(64, 48, 4, 8, 99);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_FALSE(torch::equal(a, perlin_field(64, 48, 4, 8, 100)));
  EXPECT_GE(a.min().item<float>(), -1.0f);
  EXPECT_LE(a.max().item<float>(), 1.0f);
  EXPECT_DSTPM_ERROR(perlin_field(0, 8, 2, 2, 1), ErrorKind::kDimension);
  EXPECT_DSTPM_ERROR(perlin_field(8, -1, 2, 2, 1), ErrorKind::kDimension);
}

TEST(Perlin, SmoothAtLagOne) {
  const auto f = to_vector(perlin_field(256, 256, 8, 8, 5));
  double mean = 0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  double num = 0, den = 0;
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) {
      const double d = f[static_cast<std::size_t>(y * 256 + x)] - mean;
      den += d * d;
      if (x + 1 < 256) num += d * (f[static_cast<std::size_t>(y * 256 + x + 1)] - mean);
    }
  EXPECT_GT(num / den, 0.9);
}

TEST(GenerateMask, MatchesPerPixelComparison) {
  const auto field = perlin_field(128, 128, 4, 4, 2024);
  const auto mask = generate_mask(field, 0.5);
  const auto f = to_vector(field);
  const auto m = to_vector(mask);
  double count = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double expected = std::abs(f[i]) > 0.5 ? 1.0 : 0.0;
    ASSERT_EQ(m[i], expected) << i;
    count += expected;
  }
  const double fraction = count / static_cast<double>(f.size());
  EXPECT_GE(fraction, 0.01);
  EXPECT_LE(fraction, 0.4);
  EXPECT_DOUBLE_EQ(anomalous_fraction(mask), fraction);
}

TEST(DrawMask, ThresholdAboveFieldExhaustsRetries) {
  EXPECT_EQ(generate_mask(perlin_field(32, 32, 2, 2, 1), 1.5).sum().item<int64_t>(), 0);
  std::mt19937_64 rng(1);
  MaskParams params;
  params.threshold = 1.0;
  params.retries = 4;
  EXPECT_DSTPM_ERROR(draw_anomaly_mask(32, 32, rng, params), ErrorKind::kDegenerateMask);
}

TEST(DrawMask, ZeroThresholdIsRaisedUntilFractionBelowHalf) {
  std::mt19937_64 rng(8);
  MaskParams params;
  params.threshold = 0.0;
  const auto drawn = draw_anomaly_mask(64, 64, rng, params);
  EXPECT_GT(drawn.threshold, 0.0);
  const double fraction = anomalous_fraction(drawn.mask);
  EXPECT_GT(fraction, 0.0);
  EXPECT_LT(fraction, 0.5);
}

TEST(Blend, DegenerateCases) {
  const auto source = torch::rand({3, 16, 16});
  const auto mask = generate_mask(perlin_field(16, 16, 2, 2, 3), 0.3);
  EXPECT_TRUE(torch::equal(blend(source, source, mask, 1.0).image, source));
  EXPECT_TRUE(torch::equal(blend(source, torch::rand({3, 16, 16}), torch::zeros({16, 16}, torch::kUInt8), 0.7).image, source));
  EXPECT_DSTPM_ERROR(blend(source, source, mask, 0.05), ErrorKind::kParameter);
  EXPECT_DSTPM_ERROR(blend(source, source, mask, 1.01), ErrorKind::kParameter);
  EXPECT_DSTPM_ERROR(blend(source, torch::rand({3, 8, 8}), mask, 0.5), ErrorKind::kShape);
}

TEST(Blend, HalfOpacityArithmetic) {
  const auto source = torch::full({3, 4, 4}, 0.2f);
  const auto texture = torch::full({3, 4, 4}, 0.8f);
  auto mask = torch::zeros({4, 4}, torch::kUInt8);
  mask[1][2] = 1;
  const auto out = blend(source, texture, mask, 0.5).image;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const float expected = (y == 1 && x == 2) ? 0.5f : 0.2f;
        EXPECT_NEAR(out[c][y][x].item<float>(), expected, 1e-7);
      }
}

TEST(TextureSource, IdentityPoolAndDeterminism) {
  test_support::TempDir dir;
  test_support::write_fixture(dir.path());
  const auto source = load_image(dir.path() / "widget/train/good/000.png", 64);
  TextureOptions identity;
  identity.pool.clear();
  EXPECT_TRUE(torch::equal(texture_source(source, 1, identity), source));
  EXPECT_TRUE(torch::equal(texture_source(source, 4), texture_source(source, 4)));
  for (auto aug : all_augmentations()) {
    TextureOptions single;
    single.pool = {aug};
    single.picks = 1;
    const auto tex = texture_source(source, 11, single);
    EXPECT_EQ(tex.sizes(), source.sizes());
    EXPECT_GE(tex.min().item<float>(), 0.0f);
    EXPECT_LE(tex.max().item<float>(), 1.0f);
    EXPECT_GT((tex - source).abs().mean().item<double>(), 0.0) << "augmentation " << static_cast<int>(aug);
  }
}

TEST(Synthesize, OutsideMaskUntouchedAndSeeded) {
  const auto source = torch::rand({3, 64, 64});
  const PseudoAnomalyParams params;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = synthesize(source, seed, params);
    const auto b = synthesize(source, seed, params);
    EXPECT_TRUE(torch::equal(a.image, b.image));
    EXPECT_TRUE(torch::equal(a.mask, b.mask));
    const auto outside = (a.mask == 0).unsqueeze(0).expand_as(source);
    EXPECT_TRUE(torch::equal(a.image.masked_select(outside), source.masked_select(outside)));
    const double fraction = anomalous_fraction(a.mask);
    EXPECT_GT(fraction, 0.0);
    EXPECT_LT(fraction, 0.5);
    EXPECT_GE(a.beta, 0.1);
    EXPECT_LE(a.beta, 1.0);
    EXPECT_TRUE(a.anomalous);
  }
  const auto normal = synthesize(source, 1, params, false);
  EXPECT_TRUE(torch::equal(normal.image, source));
  EXPECT_EQ(normal.mask.sum().item<int64_t>(), 0);
  EXPECT_FALSE(normal.anomalous);
}

TEST(Synthesize, ExternalTextureDirectory) {
  test_support::TempDir dir;
  test_support::write_fixture(dir.path());
  TrainConfig config;
  config.texture_dir = (dir.path() / "widget/train/good").string();
  const auto params = PseudoAnomalyParams::from(config);
  EXPECT_EQ(params.texture_paths.size(), 16u);
  const auto source = torch::zeros({3, 64, 64});
  const auto s = synthesize(source, 3, params);
  EXPECT_GT(s.image.abs().sum().item<double>(), 0.0);
  config.texture_dir = (dir.path() / "missing").string();
  EXPECT_DSTPM_ERROR(PseudoAnomalyParams::from(config), ErrorKind::kLayout);
}

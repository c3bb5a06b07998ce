#include <gtest/gtest.h>

#include "dstpm/anomaly_composition.hpp"
#include "support/convert.hpp"
#include "support/expect_error.hpp"
#include "support/oracles.hpp"

using namespace dstpm;
using test_support::from_field;
using test_support::to_field;

namespace {

// Sites 1..6 at strides 4, 8, 16, 16, 8, 4 for a `size` x `size` input.
std::array<AnomalyMap, 6> random_site_maps(std::int64_t size, std::int64_t batch = 1) {
  const std::int64_t strides[] = {4, 8, 16, 16, 8, 4};
  std::array<AnomalyMap, 6> maps;
  for (int i = 0; i < 6; ++i) {
    const auto s = size / strides[i];
    maps[static_cast<std::size_t>(i)] = AnomalyMap{torch::rand({batch, s, s}) * 2.0, strides[i], i + 1};
  }
  return maps;
}

std::array<AnomalyMap, 6> constant_site_maps(std::int64_t size, double value) {
  auto maps = random_site_maps(size);
  for (auto& m : maps) m.values.fill_(value);
  return maps;
}

// (a+f)(b+e)(c+d) per pixel after independent upsampling of each pair sum.
oracle::Field brute_force_composite(const std::array<AnomalyMap, 6>& maps, int size) {
  oracle::Field out(size, size, 1.0);
  const int pairs[3][2] = {{0, 5}, {1, 4}, {2, 3}};
  for (const auto& pair : pairs) {
    auto a = to_field(maps[static_cast<std::size_t>(pair[0])].values[0]);
    const auto b = to_field(maps[static_cast<std::size_t>(pair[1])].values[0]);
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
    const auto up = oracle::bilinear(a, size, size);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= up.v[i];
  }
  return out;
}

}  // namespace

TEST(SiteMap, ZeroForEqualFeaturesAndTwoForAntipodes) {
  const auto t = torch::randn({1, 8, 4, 4});
  EXPECT_EQ(site_anomaly_map(t, t, 4, 1).values.abs().max().item<double>(), 0.0);
  auto s = t.clone();
  s.index_put_({0, torch::indexing::Slice(), 2, 3}, -t.index({0, torch::indexing::Slice(), 2, 3}));
  const auto m = site_anomaly_map(t, s, 4, 1).values;
  EXPECT_NEAR(m[0][2][3].item<double>(), 2.0, 1e-6);
  EXPECT_NEAR(m.sum().item<double>(), 2.0, 1e-6);
  EXPECT_DSTPM_ERROR(site_anomaly_map(t, torch::zeros({1, 8, 4, 5}), 4, 1), ErrorKind::kShape);
}

TEST(SiteMap, AgreesWithPixelLoss) {
  const auto t = torch::randn({2, 16, 6, 6});
  const auto s = torch::randn({2, 16, 6, 6});
  const auto m = site_anomaly_map(t, s, 8, 2).values;
  const auto direct = pixel_loss(normalize_features(t), normalize_features(s));
  EXPECT_LT((m - direct).abs().max().item<double>(), 1e-7);
}

TEST(UpsampleMap, ConstantStaysConstant) {
  const auto up = upsample_map(AnomalyMap{torch::full({1, 4, 4}, 3.25f), 16, 1}, 64);
  EXPECT_EQ(up.values.size(-1), 64);
  EXPECT_EQ(up.values.min().item<float>(), 3.25f);
  EXPECT_EQ(up.values.max().item<float>(), 3.25f);
}

TEST(UpsampleMap, HandComputedColumns) {
  const auto map = AnomalyMap{torch::tensor({0.0f, 2.0f, 0.0f, 2.0f}).view({2, 2}), 2, 1};
  const auto up = upsample_map(map, 4).values;
  const float expected[] = {0.0f, 0.5f, 1.5f, 2.0f};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(up[y][x].item<float>(), expected[x], 1e-7) << y << "," << x;
}

TEST(UpsampleMap, MatchesReferenceResizer) {
  const auto map = torch::rand({5, 7}, torch::kFloat64);
  const auto got = to_field(bilinear_resize(map, 20, 28));
  const auto expected = oracle::bilinear(to_field(map), 20, 28);
  for (std::size_t i = 0; i < got.v.size(); ++i) EXPECT_NEAR(got.v[i], expected.v[i], 1e-12);
}

TEST(UpsampleMap, PreservesMaxOfRamps) {
  const auto ramp = torch::arange(16, torch::kFloat32).view({4, 4});
  const auto up = upsample_map(AnomalyMap{ramp, 4, 1}, 16).values;
  EXPECT_EQ(up.max().item<float>(), ramp.max().item<float>());
  EXPECT_DSTPM_ERROR(upsample_map(AnomalyMap{ramp, 4, 1}, 2), ErrorKind::kParameter);
}

TEST(ComposeStpm, ConstantOnesGiveEight) {
  const auto c = compose_stpm(constant_site_maps(64, 1.0), 64).values;
  EXPECT_EQ(c.min().item<float>(), 8.0f);
  EXPECT_EQ(c.max().item<float>(), 8.0f);
}

TEST(ComposeStpm, ZeroPairAnnihilates) {
  for (int pair = 0; pair < 3; ++pair) {
    auto maps = random_site_maps(64);
    const int a[] = {0, 1, 2}, b[] = {5, 4, 3};
    maps[static_cast<std::size_t>(a[pair])].values.zero_();
    maps[static_cast<std::size_t>(b[pair])].values.zero_();
    EXPECT_EQ(compose_stpm(maps, 64).values.abs().max().item<float>(), 0.0f) << "pair " << pair;
  }
}

TEST(ComposeStpm, MatchesBruteForce) {
  torch::manual_seed(3);
  const auto maps = random_site_maps(32);
  const auto got = to_field(compose_stpm(maps, 32).values[0]);
  const auto expected = brute_force_composite(maps, 32);
  for (std::size_t i = 0; i < got.v.size(); ++i) EXPECT_NEAR(got.v[i], expected.v[i], 1e-5 * std::max(1.0, expected.v[i]));
}

TEST(ComposeStpm, PairingMismatch) {
  auto maps = random_site_maps(64);
  maps[5].values = torch::rand({1, 8, 8});
  EXPECT_DSTPM_ERROR(compose_stpm(maps, 64), ErrorKind::kPairing);
}

TEST(ComposeFinal, IdentityAndZeroDiscriminator) {
  const auto maps = random_site_maps(32, 2);
  const auto stpm = compose_stpm(maps, 32).values;
  EXPECT_TRUE(torch::equal(compose_final(maps, AnomalyMap{torch::ones({2, 32, 32})}).values, stpm));
  EXPECT_EQ(compose_final(maps, AnomalyMap{torch::zeros({2, 32, 32})}).values.abs().max().item<float>(), 0.0f);
}

TEST(ComposeFinal, MatchesBruteForceProduct) {
  const auto maps = random_site_maps(32);
  const auto disc = torch::rand({1, 32, 32});
  const auto got = to_field(compose_final(maps, AnomalyMap{disc}).values[0]);
  auto expected = brute_force_composite(maps, 32);
  const auto d = to_field(disc[0]);
  for (std::size_t i = 0; i < got.v.size(); ++i) EXPECT_NEAR(got.v[i], expected.v[i] * d.v[i], 1e-5 * std::max(1.0, expected.v[i]));
}

TEST(ComposeFinal, RejectsOutOfRangeProbability) {
  const auto maps = random_site_maps(32);
  EXPECT_DSTPM_ERROR(compose_final(maps, AnomalyMap{torch::full({1, 32, 32}, 1.5f)}), ErrorKind::kRange);
  EXPECT_DSTPM_ERROR(compose_final(maps, AnomalyMap{torch::full({1, 32, 32}, -0.1f)}), ErrorKind::kRange);
}

TEST(ImageScore, MaxAndTopK) {
  EXPECT_EQ(image_score(AnomalyMap{torch::zeros({8, 8})}).item<float>(), 0.0f);
  auto single = torch::zeros({8, 8});
  single[3][4] = 5.0f;
  EXPECT_EQ(image_score(AnomalyMap{single}).item<float>(), 5.0f);

  const auto field = torch::rand({3, 16, 16}, torch::kFloat64);
  const auto scores = image_score(AnomalyMap{field});
  for (int b = 0; b < 3; ++b) {
    double best = 0;
    for (double v : test_support::to_vector(field[b])) best = std::max(best, v);
    EXPECT_EQ(scores[b].item<double>(), best);
  }
  auto values = test_support::to_vector(field[0]);
  std::sort(values.rbegin(), values.rend());
  const double top4 = (values[0] + values[1] + values[2] + values[3]) / 4;
  EXPECT_NEAR(image_score(AnomalyMap{field[0]}, ImageReduction::kTopKMean, 4).item<double>(), top4, 1e-12);
}

TEST(GaussianSmooth, PreservesConstantsAndMass) {
  const auto c = torch::full({1, 32, 32}, 2.0f);
  EXPECT_LT((gaussian_smooth(c, 2.0) - c).abs().max().item<float>(), 1e-5f);
  const auto r = torch::rand({32, 32});
  EXPECT_TRUE(torch::equal(gaussian_smooth(r, 0.0), r));
  EXPECT_LT(gaussian_smooth(r, 1.5).max().item<float>(), r.max().item<float>());
}

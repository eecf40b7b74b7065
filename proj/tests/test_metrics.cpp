#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "zs3d/metrics.hpp"
#include "zs3d/rng.hpp"

using namespace zs3d;
using namespace zs3d::testing;

namespace {

double aupro_one(const ScoreMap& m, const Labels& mask, AuproOptions opt = {}) {
  const MapSample s{&m, mask, {}};
  return aupro(std::span<const MapSample>(&s, 1), opt);
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, Labels{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.4, 0.4, 0.4, 0.4}, Labels{1, 0, 1, 0}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.3, 0.6, 0.2}, Labels{1, 1, 0, 0}), 0.75);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, Labels{1, 1}), InputError);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, Labels{0, 0}), InputError);
  EXPECT_THROW(auroc(std::vector<double>{0.1}, Labels{0, 1}), InputError);
}

TEST(Ap, Examples) {
  EXPECT_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.2}, Labels{1, 1, 0}), 1.0);
  EXPECT_EQ(average_precision(std::vector<double>{0.9, 0.1}, Labels{0, 1}), 0.5);
  EXPECT_EQ(average_precision(std::vector<double>{0.5, 0.5}, Labels{1, 1}), 1.0);
  EXPECT_THROW(average_precision(std::vector<double>{0.5}, Labels{0}), InputError);
}

TEST(Ranking, BruteForceOracles) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(7);
    std::vector<double> s(n);
    Labels y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(5)) / 4.0;  // plenty of ties
      y[i] = rng.uniform() < 0.5;
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auroc(s, y), auroc_oracle(s, y), 1e-12);
    EXPECT_NEAR(average_precision(s, y), ap_oracle(s, y), 1e-12);

    std::vector<double> neg(n), cubed(n);
    for (std::size_t i = 0; i < n; ++i) {
      neg[i] = -s[i];
      cubed[i] = s[i] * s[i] * s[i] + 1;
    }
    EXPECT_NEAR(auroc(s, y) + auroc(neg, y), 1.0, 1e-12);
    EXPECT_EQ(auroc(cubed, y), auroc(s, y));
    EXPECT_EQ(average_precision(cubed, y), average_precision(s, y));
  }
}

TEST(PixelAuroc, FlattensValidCells) {
  ScoreMap a(2, 2), b(2, 2);
  a.values = {0.9, 0.1, 0.8, 0.0};
  b.values = {0.2, 0.7, 0.3, 5.0};
  const Labels ma{1, 0, 1, 0}, mb{0, 1, 0, 1}, vb{1, 1, 1, 0};
  const std::vector<MapSample> s{{&a, ma, {}}, {&b, mb, vb}};
  std::vector<double> flat{0.9, 0.1, 0.8, 0.0, 0.2, 0.7, 0.3};
  const Labels fy{1, 0, 1, 0, 0, 1, 0};
  EXPECT_EQ(pixel_auroc(s), auroc(flat, fy));
  const Labels short_mask{1, 0};
  const std::vector<MapSample> bad{{&a, short_mask, {}}};
  EXPECT_THROW(pixel_auroc(bad), InputError);
}

TEST(Regions, EightConnectivity) {
  // Diagonal neighbours join; the isolated cell on the right is its own region.
  const Labels m{1, 0, 0, 0, 0,
                 0, 1, 0, 0, 1,
                 0, 0, 1, 0, 0};
  std::size_t n = 0;
  const auto lab = connected_regions(m, 3, 5, &n);
  EXPECT_EQ(n, 2u);
  EXPECT_EQ(lab[0], lab[6]);
  EXPECT_EQ(lab[6], lab[12]);
  EXPECT_NE(lab[9], lab[0]);
  EXPECT_EQ(lab[1], -1);
  EXPECT_THROW(connected_regions(m, 2, 5), InputError);
}

TEST(Aupro, PerfectAndConstantMaps) {
  Labels mask(64, 0);
  for (int y = 2; y < 5; ++y)
    for (int x = 3; x < 6; ++x) mask[y * 8 + x] = 1;
  mask[63] = 1;
  ScoreMap perfect(8, 8);
  for (std::size_t i = 0; i < 64; ++i) perfect.values[i] = mask[i];
  EXPECT_DOUBLE_EQ(aupro_one(perfect, mask), 1.0);
  EXPECT_NEAR(aupro_one(ScoreMap(8, 8, 0.3), mask), 0.15, 1e-12);
  EXPECT_NEAR(aupro_one(ScoreMap(8, 8, 0.3), mask, {0.3, 0}), 0.15, 1e-12);
}

TEST(Aupro, ExhaustiveSweepOracle) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    Labels mask(64, 0);
    const int y0 = static_cast<int>(rng.index(6)), x0 = static_cast<int>(rng.index(6));
    for (int y = y0; y < y0 + 3; ++y)
      for (int x = x0; x < x0 + 3; ++x) mask[y * 8 + x] = 1;
    if (t % 2) mask[rng.index(64)] = 1;
    ScoreMap m(8, 8);
    for (std::size_t i = 0; i < 64; ++i) m.values[i] = rng.uniform() + (mask[i] ? 0.4 : 0.0);
    if (t % 5 == 0) {
      for (auto& v : m.values) v = std::round(v * 4) / 4;  // ties
    }
    const double limit = t % 3 == 0 ? 1.0 : 0.3;
    EXPECT_NEAR(aupro_one(m, mask, {limit, 0}), aupro_oracle(m, mask, limit), 1e-12) << "trial " << t;
    EXPECT_NEAR(aupro_one(m, mask, {limit, 64}), aupro_oracle(m, mask, limit), 0.03) << "trial " << t;
  }
}

TEST(Aupro, MonotoneTransformInvariance) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Labels mask(100, 0);
    for (int i = 0; i < 12; ++i) mask[rng.index(100)] = 1;
    mask[0] = 1;
    mask[99] = 0;
    ScoreMap m(10, 10), c(10, 10);
    for (std::size_t i = 0; i < 100; ++i) {
      m.values[i] = rng.uniform();
      c.values[i] = m.values[i] * m.values[i] * m.values[i] + 1;
    }
    EXPECT_EQ(aupro_one(m, mask), aupro_one(c, mask));
    const MapSample a{&m, mask, {}}, b{&c, mask, {}};
    EXPECT_EQ(pixel_auroc(std::span<const MapSample>(&a, 1)), pixel_auroc(std::span<const MapSample>(&b, 1)));
  }
}

TEST(Aupro, Errors) {
  const Labels none(16, 0), all(16, 1);
  const ScoreMap m(4, 4, 0.5);
  EXPECT_THROW(aupro_one(m, none), InputError);
  EXPECT_THROW(aupro_one(m, all), InputError);
  Labels one(16, 0);
  one[5] = 1;
  EXPECT_THROW(aupro_one(m, one, {0.0, 200}), InputError);
  EXPECT_THROW(aupro_one(m, one, {1.5, 200}), InputError);
}

TEST(Aupro, ThresholdGrid) {
  std::vector<double> obs{0.1, 0.5, 0.5, 0.9, 0.2};
  EXPECT_EQ(aupro_thresholds(obs, 0), (std::vector<double>{0.9, 0.5, 0.2, 0.1}));
  EXPECT_EQ(aupro_thresholds(obs, 1), (std::vector<double>{0.1}));
  const auto t = aupro_thresholds(obs, 3);
  EXPECT_EQ(t.front(), 0.9);
  EXPECT_EQ(t.back(), 0.1);
}

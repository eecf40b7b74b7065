#include <gtest/gtest.h>

#include "zs3d/datagen.hpp"

using namespace zs3d;

namespace {

SynthSpec small_spec(std::size_t normal, std::size_t anomalous) {
  SynthSpec s;
  s.n_normal = normal;
  s.n_anomalous = anomalous;
  s.height = s.width = 32;
  return s;
}

std::size_t mask_area(const OrganizedPointCloud& c) {
  std::size_t n = 0;
  for (auto m : c.mask) n += m;
  return n;
}

}  // namespace

TEST(Synth, Deterministic) {
  const auto spec = small_spec(3, 3);
  const auto a = generate_clouds(spec);
  const auto b = generate_clouds(spec);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].cloud.points, b[i].cloud.points);
    EXPECT_EQ(a[i].cloud.rgb, b[i].cloud.rgb);
    EXPECT_EQ(a[i].cloud.mask, b[i].cloud.mask);
  }
  auto other = spec;
  other.seed = 7;
  EXPECT_NE(generate_clouds(other)[0].cloud.points, a[0].cloud.points);
}

TEST(Synth, IdsAndKinds) {
  const auto spec = small_spec(2, 3);
  const auto c = generate_clouds(spec);
  EXPECT_EQ(c[0].id, "s000");
  EXPECT_EQ(c[4].id, "s004");
  EXPECT_EQ(c[1].kind, AnomalyKind::none);
  EXPECT_EQ(c[2].kind, AnomalyKind::geometric);
  EXPECT_EQ(c[3].kind, AnomalyKind::color);
  EXPECT_EQ(c[4].kind, AnomalyKind::geometric);
  EXPECT_EQ(parse_anomaly_kind("color"), AnomalyKind::color);
  EXPECT_THROW(parse_anomaly_kind("dent"), InputError);
}

TEST(Synth, NoAnomaliesGivesEmptyMasks) {
  for (const auto& s : generate_clouds(small_spec(5, 0))) {
    EXPECT_EQ(mask_area(s.cloud), 0u);
    EXPECT_FALSE(s.cloud.global_label());
  }
}

TEST(Synth, DefaultAreasWithinRange) {
  const SynthSpec spec;
  for (const auto& s : generate_clouds(spec)) {
    const auto area = mask_area(s.cloud);
    if (s.kind == AnomalyKind::none) {
      EXPECT_EQ(area, 0u);
      continue;
    }
    const double n_valid = static_cast<double>(s.cloud.valid_count());
    EXPECT_GE(static_cast<double>(area), std::ceil(spec.area_min * n_valid)) << s.id;
    EXPECT_LE(static_cast<double>(area), std::floor(spec.area_max * n_valid)) << s.id;
    EXPECT_TRUE(s.cloud.global_label());
  }
}

TEST(Synth, MaskOnlyOnValidCells) {
  for (const auto& s : generate_clouds(small_spec(2, 6))) {
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      if (s.cloud.mask[i]) {
        EXPECT_TRUE(s.cloud.valid[i]);
      }
    }
  }
}

TEST(Synth, AnomalyKindsTouchOneModality) {
  const auto spec = small_spec(0, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto base = synth_sample(spec, i, AnomalyKind::none);
    const auto colour = synth_sample(spec, i, AnomalyKind::color);
    const auto geo = synth_sample(spec, i, AnomalyKind::geometric);
    EXPECT_EQ(colour.cloud.points, base.cloud.points);
    EXPECT_NE(colour.cloud.rgb, base.cloud.rgb);
    EXPECT_EQ(geo.cloud.rgb, base.cloud.rgb);
    EXPECT_NE(geo.cloud.points, base.cloud.points);
    EXPECT_EQ(colour.cloud.mask, geo.cloud.mask);
  }
}

TEST(Synth, RejectsBadSpecs) {
  EXPECT_THROW(generate_clouds(small_spec(0, 0)), InputError);
  auto s = small_spec(1, 1);
  s.area_min = 0.2;
  s.area_max = 0.1;
  EXPECT_THROW(generate_clouds(s), InputError);
  s = small_spec(1, 1);
  s.kinds.clear();
  EXPECT_THROW(generate_clouds(s), InputError);
  s = small_spec(1, 1);
  s.height = 8;
  EXPECT_THROW(generate_clouds(s), InputError);
}

TEST(Evidence, FlagsTheAnomalousModality) {
  const auto spec = small_spec(0, 2);
  FeatureSpec fs;
  const auto base = synth_sample(spec, 0, AnomalyKind::none);
  const auto colour = synth_sample(spec, 0, AnomalyKind::color);
  const auto geo = synth_sample(spec, 0, AnomalyKind::geometric);
  EXPECT_EQ(geometric_evidence(colour.cloud, fs), geometric_evidence(base.cloud, fs));
  EXPECT_EQ(color_evidence(geo.cloud, fs), color_evidence(base.cloud, fs));

  auto mean_on = [](const std::vector<double>& e, const OrganizedPointCloud& c, bool inside) {
    double s = 0, n = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (c.valid[i] && (c.mask[i] != 0) == inside) {
        s += e[i];
        n += 1;
      }
    }
    return s / n;
  };
  const auto ce = color_evidence(colour.cloud, fs);
  EXPECT_GT(mean_on(ce, colour.cloud, true), 5 * mean_on(ce, colour.cloud, false));
  const auto ge = geometric_evidence(geo.cloud, fs);
  EXPECT_GT(mean_on(ge, geo.cloud, true), 5 * mean_on(ge, geo.cloud, false));
}

TEST(Features, BundleShapesAndDecoupling) {
  const auto spec = small_spec(0, 2);
  FeatureSpec fs;
  fs.rgb_patch_grid = 8;
  fs.view_patch_grid = 8;
  fs.dim = 16;
  const FeatureMap fm(fs);
  const auto views = default_view_set();
  const auto base = featurize(synth_sample(spec, 1, AnomalyKind::none), fm, views, 32);
  const auto colour = featurize(synth_sample(spec, 1, AnomalyKind::color), fm, views, 32);
  const auto geo = featurize(synth_sample(spec, 1, AnomalyKind::geometric), fm, views, 32);

  EXPECT_EQ(base.rgb.locals.size(), 4u);
  EXPECT_EQ(base.rgb.dim(), 16u);
  EXPECT_EQ(base.rgb.locals[0].dims(), (std::vector<std::uint64_t>{64, 16}));
  ASSERT_EQ(base.views.size(), 9u);
  EXPECT_EQ(base.views[0].locals.size(), 1u);

  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(colour.views[k], base.views[k]);
  EXPECT_EQ(geo.rgb, base.rgb);
  EXPECT_FALSE(colour.rgb == base.rgb);

  const auto again = featurize(synth_sample(spec, 1, AnomalyKind::color), fm, views, 32);
  EXPECT_EQ(again.rgb, colour.rgb);

  fs.view_patch_grid = 5;
  EXPECT_THROW(featurize(synth_sample(spec, 1, AnomalyKind::none), FeatureMap(fs), views, 32), InputError);
}

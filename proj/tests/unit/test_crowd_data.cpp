#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "msfanet/crowd_data.hpp"
#include "support/fixtures.hpp"

namespace msfa {
namespace {

namespace fs = std::filesystem;

fs::path write_scene(const fs::path& dir, const std::string& id, int h, int w, const std::string& points_json) {
  save_image(Tensor<float>({3, h, w}), dir / (id + ".png"));
  const fs::path sidecar = dir / (id + kSidecarSuffix);
  std::ofstream(sidecar) << R"({"image": ")" << id << R"(.png", "points": )" << points_json << "}";
  return sidecar;
}

TEST(Annotations, EmptySidecarGivesZeroCount) {
  const auto dir = test::scratch_dir("ann_empty");
  const LoadedSample s = load_annotations(write_scene(dir, "a", 16, 20, "[]"));
  EXPECT_EQ(s.sample.annotations.count(), 0u);
  EXPECT_EQ(s.clamped_points, 0);
  EXPECT_EQ(s.sample.id, "a");
}

TEST(Annotations, InBoundsPointsAreKeptVerbatim) {
  const auto dir = test::scratch_dir("ann_three");
  const LoadedSample s = load_annotations(write_scene(dir, "b", 16, 20, "[[1, 2], [19, 15], [0.5, 7.25]]"));
  ASSERT_EQ(s.sample.annotations.count(), 3u);
  EXPECT_EQ(s.clamped_points, 0);
  EXPECT_EQ(s.sample.annotations.points()[2], (Point{0.5, 7.25}));
  EXPECT_EQ(s.sample.annotations.image_width(), 20);
  EXPECT_EQ(s.sample.annotations.image_height(), 16);
}

TEST(Annotations, OutOfBoundsPointIsClampedAndTallied) {
  const auto dir = test::scratch_dir("ann_clamp");
  const LoadedSample s = load_annotations(write_scene(dir, "c", 16, 20, "[[25, 4]]"));
  ASSERT_EQ(s.sample.annotations.count(), 1u);
  EXPECT_EQ(s.sample.annotations.points()[0], (Point{19.0, 4.0}));
  EXPECT_EQ(s.clamped_points, 1);
}

TEST(Annotations, SchemaAndCorruptionErrors) {
  EXPECT_THROW(parse_sidecar(R"({"points": []})"), SchemaError);
  EXPECT_THROW(parse_sidecar(R"({"image": "x.png", "points": [[1]]})"), SchemaError);
  EXPECT_THROW(parse_sidecar(R"({"image": "x.png", "points": [)"), LoadError);
  EXPECT_THROW(load_annotations("/nonexistent/none.ann.json"), LoadError);
}

TEST(Annotations, ConstructorRejectsOutOfRangePoints) {
  EXPECT_THROW(HeadAnnotations({{10.0, 0.0}}, 10, 10), ContractError);
  EXPECT_THROW(HeadAnnotations({{0.0, -0.1}}, 10, 10), ContractError);
  EXPECT_NO_THROW(HeadAnnotations({{9.99, 9.99}}, 10, 10));
}

TEST(Annotations, SidecarIdStripsSuffix) {
  EXPECT_EQ(sidecar_id("/a/img_01.ann.json"), "img_01");
  EXPECT_EQ(sidecar_id("img_02.json"), "img_02");
}

TEST(Annotations, RoiPolygonsAreRasterized) {
  AnnotationSidecar sc = parse_sidecar(
      R"({"image": "x.png", "points": [[1, 1]], "roi_polygons": [[[-0.5, -0.5], [3.5, -0.5], [3.5, 7.5], [-0.5, 7.5]]]})");
  const LoadedSample s = make_sample(sc, Tensor<float>({3, 8, 8}), "x");
  ASSERT_TRUE(s.sample.roi.has_value());
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) EXPECT_EQ((*s.sample.roi)(y, x), x < 4 ? 1 : 0) << y << "," << x;
  }
}

TEST(DensityMap, ZeroPointsGiveZeroMap) {
  const DensityMap d = generate_density_map(HeadAnnotations({}, 12, 9), 4.0);
  EXPECT_EQ(d.height(), 9);
  EXPECT_EQ(d.width(), 12);
  EXPECT_EQ(d.sum(), 0.0);
}

TEST(DensityMap, SinglePointSumsToOne) {
  const DensityMap d = generate_density_map(HeadAnnotations({{32.0, 32.0}}, 64, 64), 4.0);
  EXPECT_NEAR(d.sum(), 1.0, 1e-6);
  EXPECT_GT(d(32, 32), d(32, 33));
  EXPECT_FLOAT_EQ(d(32, 30), d(32, 34));
}

TEST(DensityMap, BorderPointsKeepTheirMass) {
  const std::vector<Point> pts{{1.0, 20.0}, {10.0, 10.0}, {30.5, 5.25}, {38.0, 28.0}, {20.0, 1.0}};
  const DensityMap d = generate_density_map(HeadAnnotations(pts, 40, 30), 4.0);
  EXPECT_NEAR(d.sum(), 5.0, 1e-6);
}

TEST(DensityMap, MatchesBruteForceOracle) {
  std::mt19937_64 rng(11);
  for (double sigma : {1.5, 4.0, 7.0}) {
    const auto pts = test::random_points(25, 37, 29, rng);
    const DensityMap d = generate_density_map(HeadAnnotations(pts, 37, 29), sigma);
    const auto oracle = test::density_oracle(pts, 37, 29, sigma);
    for (std::size_t i = 0; i < oracle.size(); ++i) ASSERT_NEAR(d.values.values[i], oracle[i], 1e-6) << i;
  }
}

TEST(DensityMap, NonNegativeEverywhere) {
  std::mt19937_64 rng(12);
  const auto pts = test::random_points(200, 64, 48, rng);
  const DensityMap d = generate_density_map(HeadAnnotations(pts, 64, 48), 2.0);
  for (float v : d.values.values) ASSERT_GE(v, 0.0f);
}

TEST(Downsample, ConstantBlockSums) {
  DensityMap d(8, 8);
  std::fill(d.values.values.begin(), d.values.values.end(), 1.0f);
  const DensityMap s = downsample_density(d, 8);
  ASSERT_EQ(s.height(), 1);
  ASSERT_EQ(s.width(), 1);
  EXPECT_EQ(s(0, 0), 64.0f);
  EXPECT_EQ(s.scale, 8);
}

TEST(Downsample, ZeroStaysZero) {
  const DensityMap s = downsample_density(DensityMap(16, 24), 8);
  EXPECT_EQ(s.height(), 2);
  EXPECT_EQ(s.width(), 3);
  EXPECT_EQ(s.sum(), 0.0);
}

TEST(Downsample, RandomMapMatchesDoubleLoop) {
  std::mt19937_64 rng(13);
  DensityMap d(test::random_grid<float>(16, 16, rng), 1);
  const DensityMap s = downsample_density(d, 8);
  for (int by = 0; by < 2; ++by) {
    for (int bx = 0; bx < 2; ++bx) {
      double block = 0.0;
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) block += d(by * 8 + y, bx * 8 + x);
      }
      EXPECT_NEAR(s(by, bx), block, 1e-5);
    }
  }
  EXPECT_NEAR(s.sum(), d.sum(), 1e-6 * d.sum());
}

TEST(Downsample, TargetShapeIsCeilOfImageOverEight) {
  const DensityMap t = make_target(HeadAnnotations({{3.0, 3.0}, {60.0, 40.0}}, 61, 45), 4.0, 8);
  EXPECT_EQ(t.height(), 6);
  EXPECT_EQ(t.width(), 8);
  EXPECT_NEAR(t.sum(), 2.0, 1e-5);
}

CrowdSample blank_sample(int h, int w, std::vector<Point> pts) {
  CrowdSample s;
  s.id = "s";
  s.image = Tensor<float>({3, h, w});
  s.annotations = HeadAnnotations(std::move(pts), w, h);
  return s;
}

TEST(Crop, FullSizeCropIsIdentity) {
  std::mt19937_64 g(1);
  CrowdSample s = blank_sample(224, 224, test::random_points(10, 224, 224, g));
  s.image = test::random_tensor<float>({3, 224, 224}, g);
  AugmentationConfig cfg;
  Rng rng(3);
  const CrowdSample c = random_crop(s, cfg, rng);
  EXPECT_EQ(c.image, s.image);
  EXPECT_EQ(c.annotations, s.annotations);
}

TEST(Crop, WindowWithoutPointsHasZeroCount) {
  const CrowdSample s = blank_sample(300, 300, {{290.0, 290.0}, {295.0, 10.0}});
  const CrowdSample c = crop_at(s, 0, 0, 224, 224);
  EXPECT_EQ(c.annotations.count(), 0u);
}

TEST(Crop, ReplayedDrawsSelectTheSamePoints) {
  std::mt19937_64 g(5);
  const auto pts = test::random_points(10, 300, 300, g);
  const CrowdSample s = blank_sample(300, 300, pts);
  AugmentationConfig cfg;
  Rng rng(99);
  const CrowdSample c = random_crop(s, cfg, rng);

  Rng replay(99);
  const int y0 = std::uniform_int_distribution<int>(0, 300 - 224)(replay);
  const int x0 = std::uniform_int_distribution<int>(0, 300 - 224)(replay);
  std::vector<Point> expected;
  for (const Point& p : pts) {
    if (p.x >= x0 && p.x < x0 + 224 && p.y >= y0 && p.y < y0 + 224) expected.push_back({p.x - x0, p.y - y0});
  }
  ASSERT_EQ(c.annotations.count(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_DOUBLE_EQ(c.annotations.points()[i].x, expected[i].x);
    EXPECT_DOUBLE_EQ(c.annotations.points()[i].y, expected[i].y);
  }
  EXPECT_EQ(c.height(), 224);
  EXPECT_EQ(c.width(), 224);
}

TEST(Crop, SmallImagesAreUpscaledFirst) {
  const CrowdSample s = blank_sample(100, 150, {{10.0, 10.0}});
  AugmentationConfig cfg;
  Rng rng(1);
  const CrowdSample c = random_crop(s, cfg, rng);
  EXPECT_EQ(c.height(), 224);
  EXPECT_EQ(c.width(), 224);
}

TEST(Scale, UnitFactorIsIdentity) {
  const CrowdSample s = blank_sample(40, 50, {{3.0, 4.0}});
  const CrowdSample t = scale_sample(s, 1.0);
  EXPECT_EQ(t.height(), 40);
  EXPECT_EQ(t.width(), 50);
  EXPECT_EQ(t.annotations, s.annotations);
}

TEST(Scale, ThreeQuartersMapsPointsLinearly) {
  const CrowdSample t = scale_sample(blank_sample(400, 400, {{100.0, 200.0}}), 0.75);
  EXPECT_EQ(t.height(), 300);
  EXPECT_EQ(t.width(), 300);
  EXPECT_DOUBLE_EQ(t.annotations.points()[0].x, 75.0);
  EXPECT_DOUBLE_EQ(t.annotations.points()[0].y, 150.0);
}

TEST(Scale, UpThenDownRestoresGeometry) {
  std::mt19937_64 g(8);
  const auto pts = test::random_points(20, 400, 320, g);
  const CrowdSample s = blank_sample(320, 400, pts);
  const CrowdSample t = scale_sample(scale_sample(s, 1.25), 0.8);
  EXPECT_EQ(t.height(), 320);
  EXPECT_EQ(t.width(), 400);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(t.annotations.points()[i].x, pts[i].x, 1e-6);
    EXPECT_NEAR(t.annotations.points()[i].y, pts[i].y, 1e-6);
  }
}

TEST(Scale, LongestSideCap) {
  const CrowdSample t = cap_longest_side(blank_sample(300, 600, {}), 400);
  EXPECT_EQ(t.width(), 400);
  EXPECT_EQ(t.height(), 200);
  const CrowdSample u = cap_longest_side(blank_sample(100, 120, {}), 400);
  EXPECT_EQ(u.width(), 120);
}

TEST(Mirror, TwiceIsIdentity) {
  // Quarter-pixel coordinates inside [0, W - 1] make every subtraction exact.
  std::mt19937_64 g(9);
  std::uniform_int_distribution<int> qx(0, 4 * 44), qy(0, 4 * 30);
  std::vector<Point> pts;
  for (int i = 0; i < 15; ++i) pts.push_back({qx(g) / 4.0, qy(g) / 4.0});
  CrowdSample s = blank_sample(31, 45, pts);
  s.image = test::random_tensor<float>({3, 31, 45}, g);
  const CrowdSample t = horizontal_mirror(horizontal_mirror(s));
  EXPECT_EQ(t.image, s.image);
  EXPECT_EQ(t.annotations, s.annotations);
}

TEST(Mirror, TwiceRestoresArbitraryPointsToRounding) {
  std::mt19937_64 g(10);
  std::uniform_real_distribution<double> ux(0.0, 44.0), uy(0.0, 31.0);
  std::vector<Point> pts;
  for (int i = 0; i < 200; ++i) pts.push_back({ux(g), uy(g)});
  const HeadAnnotations a(pts, 45, 31);
  const HeadAnnotations b = mirror_annotations(mirror_annotations(a));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(b.points()[i].x, pts[i].x, 1e-13);
    EXPECT_EQ(b.points()[i].y, pts[i].y);
  }
}

TEST(Mirror, AxisPointIsFixed) {
  const HeadAnnotations a({{3.0, 2.0}}, 7, 5);
  EXPECT_EQ(mirror_annotations(a).points()[0], (Point{3.0, 2.0}));
}

TEST(Mirror, DensityIsEquivariant) {
  std::mt19937_64 g(10);
  for (int trial = 0; trial < 5; ++trial) {
    const HeadAnnotations a(test::random_points(30, 53, 41, g), 53, 41);
    const DensityMap lhs = generate_density_map(mirror_annotations(a), 4.0);
    const DensityMap rhs = mirror_density(generate_density_map(a, 4.0));
    for (std::size_t i = 0; i < lhs.values.size(); ++i) ASSERT_NEAR(lhs.values.values[i], rhs.values.values[i], 1e-6);
  }
}

TEST(Augment, DeterministicForAFixedSeed) {
  std::mt19937_64 g(3);
  CrowdSample s = blank_sample(300, 340, test::random_points(40, 340, 300, g));
  s.image = test::random_tensor<float>({3, 300, 340}, g);
  AugmentationConfig cfg;
  Rng a(17), b(17);
  const CrowdSample x = augment(s, cfg, a);
  const CrowdSample y = augment(s, cfg, b);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.annotations, y.annotations);
  EXPECT_EQ(x.height(), cfg.crop_size);
}

TEST(Augment, ConfigValidation) {
  AugmentationConfig cfg;
  cfg.crop_size = 0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.scales.clear();
  EXPECT_THROW(cfg.validate(), ContractError);
  EXPECT_EQ(AugmentationConfig::large_image_profile().crop_size, 512);
  EXPECT_EQ(AugmentationConfig::large_image_profile().longest_side_cap, 2048);
}

TEST(Roi, AllOnesLeavesMapUnchanged) {
  std::mt19937_64 g(4);
  const DensityMap d(test::random_grid<float>(6, 9, g), 1);
  const DensityMap m = apply_roi_mask(d, RoiMask(6, 9, 1));
  EXPECT_EQ(m.values.values, d.values.values);
}

TEST(Roi, AllZerosClearsMap) {
  std::mt19937_64 g(4);
  const DensityMap d(test::random_grid<float>(6, 9, g), 1);
  EXPECT_EQ(apply_roi_mask(d, RoiMask(6, 9, 0)).sum(), 0.0);
}

TEST(Roi, HalfPlaneKeepsLeftHalf) {
  std::mt19937_64 g(6);
  const DensityMap d(test::random_grid<float>(8, 10, g), 1);
  RoiMask roi(8, 10, 0);
  double left = 0.0;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 5; ++x) {
      roi(y, x) = 1;
      left += d(y, x);
    }
  }
  const DensityMap m = apply_roi_mask(d, roi);
  EXPECT_NEAR(m.sum(), left, 1e-6);
  for (int y = 0; y < 8; ++y) {
    for (int x = 5; x < 10; ++x) EXPECT_EQ(m(y, x), 0.0f);
  }
}

TEST(Roi, FullResolutionMaskIsPooledToMapScale) {
  DensityMap d(2, 2, 8);
  std::fill(d.values.values.begin(), d.values.values.end(), 1.0f);
  RoiMask roi(16, 16, 0);
  roi(3, 3) = 1;  // touches block (0, 0) only
  const DensityMap m = apply_roi_mask(d, roi);
  EXPECT_EQ(m(0, 0), 1.0f);
  EXPECT_EQ(m.sum(), 1.0);
  EXPECT_THROW(apply_roi_mask(d, RoiMask(5, 5, 1)), ContractError);
}

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("img" + std::to_string(i));
  return ids;
}

TEST(KFold, FiftyIdsFiveFolds) {
  const auto folds = kfold_splits(make_ids(50), 5, 1);
  ASSERT_EQ(folds.size(), 5u);
  for (const auto& f : folds) {
    EXPECT_EQ(f.test_ids.size(), 10u);
    EXPECT_EQ(f.train_ids.size(), 40u);
  }
}

TEST(KFold, SingletonFolds) {
  const auto folds = kfold_splits(make_ids(5), 5, 2);
  for (const auto& f : folds) EXPECT_EQ(f.test_ids.size(), 1u);
}

TEST(KFold, PartitionPropertyForManyShapes) {
  for (int n = 1; n <= 23; ++n) {
    for (int k = 2; k <= n; ++k) {
      const auto ids = make_ids(n);
      const auto folds = kfold_splits(ids, k, static_cast<std::uint64_t>(n * 31 + k));
      std::multiset<std::string> seen;
      std::size_t smallest = ids.size(), largest = 0;
      for (const auto& f : folds) {
        seen.insert(f.test_ids.begin(), f.test_ids.end());
        smallest = std::min(smallest, f.test_ids.size());
        largest = std::max(largest, f.test_ids.size());
        std::set<std::string> train(f.train_ids.begin(), f.train_ids.end());
        for (const auto& t : f.test_ids) ASSERT_FALSE(train.count(t));
        ASSERT_EQ(f.train_ids.size() + f.test_ids.size(), ids.size());
      }
      ASSERT_EQ(seen, std::multiset<std::string>(ids.begin(), ids.end())) << n << "/" << k;
      ASSERT_LE(largest - smallest, 1u);
    }
  }
  EXPECT_THROW(kfold_splits(make_ids(3), 4, 0), ContractError);
}

TEST(Synth, ZeroHeadsGivesEmptyAnnotations) {
  const CrowdSample s = synthesize_scene(1, 0, 64, 80, DensityProfile::uniform);
  EXPECT_EQ(s.annotations.count(), 0u);
  EXPECT_EQ(s.height(), 64);
  EXPECT_EQ(s.width(), 80);
}

TEST(Synth, ExactCount) {
  EXPECT_EQ(synthesize_scene(2, 100, 128, 128, DensityProfile::uniform).annotations.count(), 100u);
}

TEST(Synth, PerspectiveCrowdsTheTopThird) {
  const CrowdSample s = synthesize_scene(3, 300, 240, 320, DensityProfile::perspective);
  int top = 0, bottom = 0;
  for (const Point& p : s.annotations.points()) {
    const int band = static_cast<int>(p.y * 3.0 / 240);
    top += band == 0;
    bottom += band == 2;
  }
  EXPECT_GT(top, bottom);
}

TEST(Synth, SameSeedSameScene) {
  const CrowdSample a = synthesize_scene(4, 50, 96, 96, DensityProfile::perspective);
  const CrowdSample b = synthesize_scene(4, 50, 96, 96, DensityProfile::perspective);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.annotations, b.annotations);
  EXPECT_THROW(parse_profile("dense"), ContractError);
}

TEST(DensityExport, RawRoundTripIsBitExact) {
  std::mt19937_64 g(21);
  DensityMap d(test::random_grid<float>(7, 11, g, 0.0, 3.0), 8);
  const auto dir = test::scratch_dir("raw_density");
  write_density(d, dir / "m");
  const DensityMap r = read_density(dir / "m");
  EXPECT_EQ(r.values.values, d.values.values);
  EXPECT_EQ(r.scale, 8);
  EXPECT_EQ(r.height(), 7);
}

TEST(Images, PngRoundTripWithinQuantization) {
  const auto dir = test::scratch_dir("png");
  const CrowdSample s = synthesize_scene(5, 10, 24, 32, DensityProfile::uniform);
  save_image(s.image, dir / "x.png");
  const Tensor<float> back = load_image(dir / "x.png");
  ASSERT_EQ(back.shape(), s.image.shape());
  for (std::size_t i = 0; i < back.size(); ++i) ASSERT_NEAR(back[i], s.image[i], 0.5 / 255.0 / 0.224 + 1e-5);
  EXPECT_EQ((image_size(dir / "x.png")), (std::array<int, 2>{24, 32}));
  EXPECT_THROW(load_image(dir / "missing.png"), LoadError);
}

}  // namespace
}  // namespace msfa

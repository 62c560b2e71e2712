#include <cmath>
#include <fstream>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "msfanet/evaluation.hpp"
#include "support/fixtures.hpp"

namespace msfa {
namespace {

TEST(Count, ZeroMap) { EXPECT_EQ(count_from_density(DensityMap(5, 5)), 0.0); }

TEST(Count, SevenPointGroundTruth) {
  std::mt19937_64 rng(1);
  const HeadAnnotations ann(test::random_points(7, 80, 60, rng), 80, 60);
  EXPECT_NEAR(count_from_density(make_target(ann)), 7.0, 1e-3);
}

TEST(Count, MaskedMapCountsUnmaskedCells) {
  std::mt19937_64 rng(2);
  const DensityMap d(test::random_grid<float>(6, 8, rng), 8);
  RoiMask roi(6, 8, 0);
  double expected = 0.0;
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 4; ++x) {
      roi(y, x) = 1;
      expected += d(y, x);
    }
  }
  EXPECT_NEAR(count_from_density(apply_roi_mask(d, roi)), expected, 1e-6);
}

TEST(Metrics, PerfectPredictions) {
  const std::vector<std::pair<double, double>> p{{3, 3}, {10, 10}};
  const CountErrors e = compute_mae_mse(p);
  EXPECT_EQ(e.mae, 0.0);
  EXPECT_EQ(e.mse, 0.0);
}

TEST(Metrics, TwoPairHandArithmetic) {
  const std::vector<std::pair<double, double>> p{{10, 12}, {20, 17}};
  const CountErrors e = compute_mae_mse(p);
  EXPECT_DOUBLE_EQ(e.mae, 2.5);
  EXPECT_NEAR(e.mse, std::sqrt(6.5), 1e-12);
  EXPECT_NEAR(e.mse, 2.5495, 1e-4);
}

TEST(Metrics, SinglePairIdentity) {
  const std::vector<std::pair<double, double>> p{{42.0, 37.5}};
  const CountErrors e = compute_mae_mse(p);
  EXPECT_DOUBLE_EQ(e.mae, 4.5);
  EXPECT_DOUBLE_EQ(e.mse, 4.5);
  EXPECT_THROW(compute_mae_mse({}), ContractError);
}

TEST(Metrics, RandomPairsMatchFormula) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1000);
  std::vector<std::pair<double, double>> p(1000);
  for (auto& x : p) x = {u(rng), u(rng)};
  double a = 0, s = 0;
  for (const auto& [g, q] : p) {
    a += std::abs(g - q);
    s += (g - q) * (g - q);
  }
  const CountErrors e = compute_mae_mse(p);
  EXPECT_NEAR(e.mae, a / 1000, 1e-9);
  EXPECT_NEAR(e.mse, std::sqrt(s / 1000), 1e-9);
  EXPECT_LE(e.mae, e.mse);
}

TEST(Regions, PerfectPredictionHasNoBandError) {
  std::mt19937_64 rng(4);
  const DensityMap d(test::random_grid<float>(9, 5, rng), 8);
  const RegionErrors r = region_errors(d, d);
  for (double v : r.abs_errors) EXPECT_EQ(v, 0.0);
}

TEST(Regions, TopBandErrorStaysInFarBand) {
  std::mt19937_64 rng(5);
  const DensityMap gt(test::random_grid<float>(9, 5, rng), 8);
  DensityMap pred = gt;
  pred(0, 2) += 1.5f;
  pred(2, 4) += 0.5f;
  const RegionErrors r = region_errors(pred, gt);
  EXPECT_NEAR(r.abs_errors[0], 2.0, 1e-6);
  EXPECT_EQ(r.abs_errors[1], 0.0);
  EXPECT_EQ(r.abs_errors[2], 0.0);
}

TEST(Regions, BandSumsMatchExplicitRowRanges) {
  std::mt19937_64 rng(6);
  for (int h : {3, 4, 5, 10, 28, 31}) {
    const DensityMap gt(test::random_grid<float>(h, 7, rng), 8), pred(test::random_grid<float>(h, 7, rng), 8);
    const RegionErrors r = region_errors(pred, gt);
    const int cut1 = h / 3, cut2 = 2 * h / 3;  // integer thirds
    const int bounds[4] = {0, cut1, cut2, h};
    for (int b = 0; b < 3; ++b) {
      double g = 0, p = 0;
      for (int y = bounds[b]; y < bounds[b + 1]; ++y) {
        for (int x = 0; x < 7; ++x) {
          g += gt(y, x);
          p += pred(y, x);
        }
      }
      EXPECT_NEAR(r.gt_counts[b], g, 1e-6);
      EXPECT_NEAR(r.pred_counts[b], p, 1e-6);
    }
    EXPECT_NEAR(r.gt_counts[0] + r.gt_counts[1] + r.gt_counts[2], gt.sum(), 1e-5);
  }
  EXPECT_THROW(region_errors(DensityMap(2, 4), DensityMap(2, 4)), ContractError);
  EXPECT_THROW(region_errors(DensityMap(6, 4), DensityMap(5, 4)), ContractError);
}

TEST(Regions, ConfigValidation) {
  RegionConfig c{2, 1, 3};
  EXPECT_THROW(c.validate(), ContractError);
  EXPECT_EQ((RegionConfig{}.boundaries(28)), (std::array<int, 2>{9, 18}));
}

TEST(Ranking, PublishedExamples) {
  const std::vector<MethodRanks> t{{"MSFANet", {1, 1, 4, 1}}, {"ADSCNet", {2, 7, 1, std::nullopt}}};
  const auto rows = average_ranking(t);
  EXPECT_DOUBLE_EQ(rows[0].average, 1.75);
  EXPECT_NEAR(rows[1].average, 10.0 / 3.0, 1e-12);
  EXPECT_EQ(rows[1].datasets, 3);
}

TEST(Ranking, SingleDatasetKeepsItsRank) {
  const std::vector<MethodRanks> t{{"X", {std::nullopt, 6, std::nullopt, std::nullopt}}};
  EXPECT_DOUBLE_EQ(average_ranking(t)[0].average, 6.0);
  const std::vector<MethodRanks> none{{"Y", {std::nullopt, std::nullopt}}};
  EXPECT_THROW(average_ranking(none), ContractError);
}

TEST(Ranking, CsvHasTwoDecimalAverages) {
  const std::vector<MethodRanks> t{{"A", {2, 7, 1, std::nullopt}}, {"B", {1, std::nullopt, 4, 1}}};
  const std::vector<std::string> names{"S", "U", "Q", "W"};
  EXPECT_EQ(ranking_csv(t, names), "method,S,U,Q,W,avg_rank\nA,2,7,1,,3.33\nB,1,,4,1,2.00\n");
}

TEST(Ranking, ComparisonTableRowsThatAreConsistent) {
  for (const auto& row : test::comparison_table()) {
    if (row.ranks.method == "CAN") continue;  // printed average disagrees with its rank columns
    const std::vector<MethodRanks> one{row.ranks};
    EXPECT_NEAR(average_ranking(one)[0].average, row.printed_average, 0.005 + 1e-9) << row.ranks.method;
  }
}

TEST(Report, JsonRoundTrip) {
  std::vector<ImageResult> imgs{{"a", 10, 12, RegionErrors{{1, 2, 7}, {1, 3, 8}, {0, 1, 1}}},
                                {"b", 20, 17, RegionErrors{{5, 5, 10}, {4, 5, 8}, {1, 0, 2}}}};
  const EvalReport r = make_report(imgs);
  EXPECT_DOUBLE_EQ(r.mae, 2.5);
  ASSERT_TRUE(r.region_mae.has_value());
  EXPECT_DOUBLE_EQ((*r.region_mae)[2], 1.5);
  const nlohmann::json j = to_json(r);
  EXPECT_TRUE(j.contains("region_mae"));
  const EvalReport back = report_from_json(j);
  EXPECT_EQ(back.per_image.size(), 2u);
  EXPECT_DOUBLE_EQ(back.mse, r.mse);
  EXPECT_EQ(to_json(back), j);
}

TEST(Report, RegionsAbsentWithoutRequest) {
  const EvalReport r = make_report({{"a", 1, 2, std::nullopt}});
  EXPECT_FALSE(r.region_mae.has_value());
  EXPECT_FALSE(to_json(r).contains("region_mae"));
}

TEST(Evaluate, ResultsKeepInputOrderAcrossWorkerCounts) {
  const ModelConfig cfg = test::tiny_config(0.0625, 4);
  const auto params = init_parameters(cfg, test::overfit_init());
  std::vector<CrowdSample> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(synthesize_scene(300 + i, 5 + i, 40, 48, DensityProfile::perspective));
  EvalOptions one;
  one.regions = true;
  EvalOptions many = one;
  many.workers = 3;
  const EvalReport a = evaluate(samples, cfg, params, one);
  const EvalReport b = evaluate(samples, cfg, params, many);
  EXPECT_EQ(to_json(a), to_json(b));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(a.per_image[i].id, samples[i].id);
    EXPECT_NEAR(a.per_image[i].gt_count, static_cast<double>(samples[i].annotations.count()), 1e-3);
  }
  EXPECT_TRUE(a.region_mae.has_value());
}

TEST(Evaluate, RoiMasksBothSides) {
  const ModelConfig cfg = test::tiny_config(0.0625, 4);
  const auto params = init_parameters(cfg, test::overfit_init());
  CrowdSample s = synthesize_scene(9, 30, 32, 32, DensityProfile::uniform);
  s.roi = RoiMask(32, 32, 0);
  const auto [pred, gt] = predict_sample(s, cfg, params, EvalOptions{});
  EXPECT_EQ(pred.sum(), 0.0);
  EXPECT_EQ(gt.sum(), 0.0);
  EvalOptions no_roi;
  no_roi.apply_roi = false;
  EXPECT_NEAR(predict_sample(s, cfg, params, no_roi).second.sum(), 30.0, 1e-3);
}

TEST(Heatmap, ConstantMapIsUniform) {
  DensityMap d(4, 6);
  std::fill(d.values.values.begin(), d.values.values.end(), 0.7f);
  const auto dir = test::scratch_dir("heat_const");
  const HeatmapInfo info = export_heatmap(d, dir / "c.png");
  EXPECT_TRUE(info.degenerate);
  const cv::Mat img = cv::imread((dir / "c.png").string(), cv::IMREAD_COLOR);
  ASSERT_EQ(img.rows, 4);
  ASSERT_EQ(img.cols, 6);
  const cv::Vec3b first = img.at<cv::Vec3b>(0, 0);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 6; ++x) EXPECT_EQ(img.at<cv::Vec3b>(y, x), first);
  }
}

TEST(Heatmap, ZeroMapRecordsDegenerateRange) {
  const auto dir = test::scratch_dir("heat_zero");
  const HeatmapInfo info = export_heatmap(DensityMap(3, 3), dir / "z.png");
  EXPECT_TRUE(info.degenerate);
  EXPECT_EQ(info.min, 0.0);
  EXPECT_EQ(info.max, 0.0);
  std::ifstream in(dir / "z.png.json");
  const auto side = nlohmann::json::parse(in);
  EXPECT_EQ(side["degenerate"], true);
  EXPECT_EQ(side["max"], side["min"]);
}

TEST(Heatmap, RangeIsStretchedToFullScale) {
  DensityMap d(1, 3);
  d.values.values = {0.0f, 0.5f, 2.0f};
  const auto dir = test::scratch_dir("heat_range");
  const HeatmapInfo info = export_heatmap(d, dir / "r.png");
  EXPECT_FALSE(info.degenerate);
  EXPECT_DOUBLE_EQ(info.max, 2.0);
  const cv::Mat img = cv::imread((dir / "r.png").string(), cv::IMREAD_COLOR);
  EXPECT_NE(img.at<cv::Vec3b>(0, 0), img.at<cv::Vec3b>(0, 2));
  EXPECT_THROW(export_heatmap(d, "/nonexistent_dir/x.png"), ExportError);
}

TEST(Heatmap, FeatureChannelsAreCappedAndNamed) {
  std::mt19937_64 rng(7);
  const auto f = test::random_tensor<float>({5, 6, 6}, rng);
  const auto dir = test::scratch_dir("heat_feat");
  const auto files = export_feature_channels(f, "block2.out", dir, 3);
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "block2.out_c0.png");
  EXPECT_TRUE(std::filesystem::exists(dir / "block2.out_c2.png"));
  EXPECT_FALSE(std::filesystem::exists(dir / "block2.out_c3.png"));
}

}  // namespace
}  // namespace msfa

#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "msfanet/model.hpp"
#include "msfanet/training.hpp"
#include "support/fixtures.hpp"

namespace msfa {
namespace {

ParameterStore<float> random_params(const ModelConfig& cfg, std::uint64_t seed = 1) {
  InitOptions o;
  o.scheme = InitScheme::he_normal;
  o.seed = seed;
  return init_parameters(cfg, o);
}

TEST(Config, WidthsAndPadding) {
  const ModelConfig full;
  EXPECT_EQ(full.block_width(1), 64);
  EXPECT_EQ(full.block_width(5), 512);
  EXPECT_EQ(full.pad_multiple(), 112);
  const ModelConfig quarter = test::tiny_config(0.25, 7);
  EXPECT_EQ(quarter.block_width(1), 16);
  EXPECT_EQ(quarter.width(128), 32);
  ModelConfig no_skip;
  no_skip.enable_skipagg = false;
  EXPECT_EQ(no_skip.pad_multiple(), 16);
  EXPECT_EQ(block_output_stride(3), 8);
  EXPECT_EQ(block_output_stride(5), 16);
}

TEST(Config, ValidationRejectsBadShapes) {
  ModelConfig c;
  c.block_channels = {64, 128};
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.skip_targets = {2};
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.stem_window = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Backbone, FirstBlockHalvesResolution) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(1);
  const auto x = test::random_tensor<float>({3, 224, 224}, rng);
  const auto y = vgg_block_forward(x, 1, cfg, params);
  EXPECT_EQ(y.shape(), (std::vector<int>{16, 112, 112}));
}

TEST(Backbone, LastBlockKeepsResolution) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(2);
  const auto x = test::random_tensor<float>({128, 14, 14}, rng);
  EXPECT_EQ(vgg_block_forward(x, 5, cfg, params).shape(), (std::vector<int>{128, 14, 14}));
  EXPECT_THROW(vgg_block_forward(Tensor<float>({3, 14, 14}), 5, cfg, params), ContractError);
}

TEST(Backbone, ZeroInputZeroBiasGivesZero) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = init_parameters(cfg);
  const auto y = vgg_block_forward(Tensor<float>({3, 32, 32}), 1, cfg, params);
  for (float v : y.vec()) ASSERT_EQ(v, 0.0f);
}

TEST(ShortAgg, FusedShape) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(3);
  const auto x = test::random_tensor<float>({16, 112, 112}, rng);
  const auto out = vgg_block_forward(x, 2, cfg, params);
  EXPECT_EQ(out.shape(), (std::vector<int>{32, 56, 56}));
  EXPECT_EQ(short_agg(x, out, 2, params).shape(), (std::vector<int>{32, 56, 56}));
}

TEST(ShortAgg, ZeroProjectionIsIdentity) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  auto params = random_params(cfg);
  params.at("shortagg.block3.weight").fill(0.0f);
  std::mt19937_64 rng(4);
  const auto x = test::random_tensor<float>({32, 16, 16}, rng);
  const auto out = vgg_block_forward(x, 3, cfg, params);
  EXPECT_EQ(short_agg(x, out, 3, params), out);
}

TEST(ShortAgg, ZeroBlockPathLeavesStridedProjection) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  auto params = random_params(cfg);
  for (int j = 1; j <= 2; ++j) {
    params.at("backbone.conv2_" + std::to_string(j) + ".weight").fill(0.0f);
    params.at("backbone.conv2_" + std::to_string(j) + ".bias").fill(0.0f);
  }
  auto& ws = params.at("shortagg.block2.weight");  // (32, 16, 1, 1)
  ws.fill(0.0f);
  for (int c = 0; c < 16; ++c) ws.at(c, c, 0) = 1.0f;  // copy input channel c to output channel c
  std::mt19937_64 rng(5);
  const auto x = test::random_tensor<float>({16, 12, 10}, rng);
  const auto fused = short_agg(x, vgg_block_forward(x, 2, cfg, params), 2, params);
  ASSERT_EQ(fused.shape(), (std::vector<int>{32, 6, 5}));
  for (int c = 0; c < 32; ++c) {
    for (int y = 0; y < 6; ++y) {
      for (int xx = 0; xx < 5; ++xx) ASSERT_EQ(fused.at(c, y, xx), c < 16 ? x.at(c, 2 * y, 2 * xx) : 0.0f);
    }
  }
}

TEST(Stem, OutputIsHalfResolution) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(6);
  const auto x = test::random_tensor<float>({3, 224, 224}, rng);
  EXPECT_EQ(transformer_stem_forward(x, cfg, params).shape(), (std::vector<int>{32, 112, 112}));
  EXPECT_THROW(transformer_stem_forward(Tensor<float>({3, 100, 100}), cfg, params), ContractError);
}

TEST(SkipAgg, AdaptedShapes) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(7);
  const auto stem = test::random_tensor<float>({32, 112, 112}, rng);
  EXPECT_EQ(skip_agg_adapt(stem, 3, cfg, params).shape(), (std::vector<int>{64, 28, 28}));
  EXPECT_EQ(skip_agg_adapt(stem, 4, cfg, params).shape(), (std::vector<int>{128, 14, 14}));
  EXPECT_EQ(skip_agg_adapt(stem, 5, cfg, params).shape(), (std::vector<int>{128, 14, 14}));
}

TEST(SkipAgg, ZeroStemGivesZeroFeatures) {
  const ModelConfig cfg = test::tiny_config(0.25, 7);
  const auto params = random_params(cfg);
  const auto y = skip_agg_adapt(Tensor<float>({32, 112, 112}), 4, cfg, params);
  for (float v : y.vec()) ASSERT_EQ(v, 0.0f);
}

TEST(Model, DensityIsOneEighthScale) {
  const ModelConfig cfg = test::tiny_config(0.0625, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(8);
  const DensityMap d = model_forward(test::random_tensor<float>({3, 224, 224}, rng), cfg, params);
  EXPECT_EQ(d.height(), 28);
  EXPECT_EQ(d.width(), 28);
  EXPECT_EQ(d.scale, 8);
  for (float v : d.values.values) ASSERT_GE(v, 0.0f);
}

TEST(Model, NonSquareInputIsPaddedAndCropped) {
  const ModelConfig cfg = test::tiny_config(0.0625, 7);
  const auto params = random_params(cfg);
  std::mt19937_64 rng(9);
  const DensityMap d = model_forward(test::random_tensor<float>({3, 320, 480}, rng), cfg, params);
  EXPECT_EQ(d.height(), 40);
  EXPECT_EQ(d.width(), 60);
  const DensityMap odd = model_forward(test::random_tensor<float>({3, 50, 77}, rng), cfg, params);
  EXPECT_EQ(odd.height(), 7);
  EXPECT_EQ(odd.width(), 10);
}

TEST(Model, ParameterCountsGrowWithEachModule) {
  const ModelConfig base = apply_ablation(ModelConfig{}, Ablation::baseline);
  const ModelConfig sh = apply_ablation(ModelConfig{}, Ablation::sh);
  const ModelConfig full = apply_ablation(ModelConfig{}, Ablation::sh_sk);
  EXPECT_LT(parameter_count(base), parameter_count(sh));
  EXPECT_LT(parameter_count(sh), parameter_count(full));
  for (const auto& p : parameter_layout(base)) {
    EXPECT_FALSE(p.name.starts_with("shortagg") || p.name.starts_with("stem") || p.name.starts_with("skipagg"))
        << p.name;
  }
}

TEST(Model, BaselineCountMatchesLayerArithmetic) {
  // 13 backbone convs, three 3x3 regressor convs and the 4x4 transposed conv.
  const int ch[5] = {64, 128, 256, 512, 512}, n[5] = {2, 2, 3, 3, 3};
  std::size_t expected = 0;
  int in = 3;
  for (int b = 0; b < 5; ++b) {
    for (int j = 0; j < n[b]; ++j) {
      expected += static_cast<std::size_t>(ch[b]) * in * 9 + ch[b];
      in = ch[b];
    }
  }
  for (int c : {256, 128, 64}) {
    expected += static_cast<std::size_t>(c) * in * 9 + c;
    in = c;
  }
  expected += 64 * 16 + 1;
  EXPECT_EQ(parameter_count(apply_ablation(ModelConfig{}, Ablation::baseline)), expected);
  // ShortAgg adds one bias-free 1x1 conv per fused block.
  const std::size_t shortagg = 64 * 128 + 128 * 256 + 256 * 512 + 512 * 512;
  EXPECT_EQ(parameter_count(apply_ablation(ModelConfig{}, Ablation::sh)), expected + shortagg);
}

TEST(Model, ZeroedSkipAggMatchesShortAggOnlyModel) {
  ModelConfig full = test::tiny_config(0.0625, 7);
  ModelConfig sh = full;
  sh.enable_skipagg = false;
  const auto sh_params = random_params(sh, 4);
  auto full_params = random_params(full, 5);
  for (const auto& [name, t] : sh_params.tensors) full_params.at(name) = t;
  for (int b : {3, 4, 5}) full_params.at("skipagg.block" + std::to_string(b) + ".weight").fill(0.0f);
  std::mt19937_64 rng(10);
  const auto x = test::random_tensor<float>({3, 224, 224}, rng);  // a multiple of both paddings
  const auto a = forward(x, full, full_params);
  const auto b = forward(x, sh, sh_params);
  EXPECT_EQ(a, b);
}

TEST(Model, FeatureHooksReportEveryLayer) {
  const ModelConfig cfg = test::tiny_config(0.0625, 7);
  const auto params = random_params(cfg);
  std::vector<std::string> names;
  FeatureHook<float> hook = [&](const std::string& n, const Tensor<float>&) { names.push_back(n); };
  forward<float>(Tensor<float>({3, 112, 112}), cfg, params, nullptr, hook);
  const std::set<std::string> got(names.begin(), names.end());
  for (const char* n : {"stem.out", "block1.out", "block5.out", "backbone.conv3_3", "regressor.conv3", "density"}) {
    EXPECT_TRUE(got.count(n)) << n;
  }
}

TEST(Init, GaussianStdAndZeroBiases) {
  const ModelConfig cfg;  // full width: conv5_x layers hold 2.4M weights
  const auto params = init_parameters(cfg);
  const auto& w = params.at("backbone.conv4_2.weight");
  double sum = 0.0, sq = 0.0;
  for (float v : w.vec()) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w.size());
  const double std = std::sqrt(sq / n - (sum / n) * (sum / n));
  EXPECT_NEAR(std, 0.01, 0.05 * 0.01);
  for (const auto& [name, t] : params.tensors) {
    if (name.ends_with(".bias") && name.find(".norm") == std::string::npos) {
      for (float v : t.vec()) ASSERT_EQ(v, 0.0f) << name;
    }
  }
  EXPECT_EQ(params.tags.at("backbone.conv1_1.weight"), InitTag::gaussian);
}

TEST(Init, SameSeedIsBitIdentical) {
  const ModelConfig cfg = test::tiny_config(0.125);
  InitOptions o;
  o.seed = 42;
  EXPECT_EQ(init_parameters(cfg, o), init_parameters(cfg, o));
  InitOptions other = o;
  other.seed = 43;
  EXPECT_FALSE(init_parameters(cfg, o) == init_parameters(cfg, other));
}

TEST(Init, HeNormalKeepsOutputLayerSmall) {
  const ModelConfig cfg = test::tiny_config(0.125);
  const auto he = random_params(cfg, 1);
  const auto& out = he.at("regressor.upsample.weight");
  double sq = 0.0;
  for (float v : out.vec()) sq += static_cast<double>(v) * v;
  EXPECT_LT(std::sqrt(sq / out.size()), 0.02);
  const auto& hidden = he.at("backbone.conv3_1.weight");
  sq = 0.0;
  for (float v : hidden.vec()) sq += static_cast<double>(v) * v;
  const double fan_in = hidden.dim(1) * 9.0;
  EXPECT_NEAR(std::sqrt(sq / hidden.size()), std::sqrt(2.0 / fan_in), 0.15 * std::sqrt(2.0 / fan_in));
}

TEST(Init, PretrainedBackboneIsLoaded) {
  const ModelConfig cfg = test::tiny_config(0.125);
  const auto reference = random_params(cfg, 9);
  TensorMap archive;
  for (const auto& name : backbone_parameter_names(cfg)) archive[name] = reference.at(name);
  EXPECT_EQ(backbone_parameter_names(cfg).size(), 26u);
  const auto dir = test::scratch_dir("pretrained");
  save_tensor_archive(dir / "vgg.msfa", archive);
  InitOptions o;
  o.pretrained = dir / "vgg.msfa";
  const auto params = init_parameters(cfg, o);
  for (const auto& name : backbone_parameter_names(cfg)) {
    EXPECT_EQ(params.at(name), reference.at(name)) << name;
    EXPECT_EQ(params.tags.at(name), InitTag::pretrained);
  }
  EXPECT_EQ(params.tags.at("regressor.conv1.weight"), InitTag::gaussian);

  archive["backbone.conv2_1.weight"] = Tensor<float>({1, 1, 3, 3});
  archive.erase("backbone.conv5_3.bias");
  save_tensor_archive(dir / "bad.msfa", archive);
  o.pretrained = dir / "bad.msfa";
  try {
    init_parameters(cfg, o);
    FAIL() << "mismatched archive accepted";
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("backbone.conv2_1.weight"), std::string::npos) << msg;
    EXPECT_NE(msg.find("backbone.conv5_3.bias"), std::string::npos) << msg;
  }
}

TEST(TensorArchive, RoundTripAndTruncation) {
  std::mt19937_64 rng(11);
  TensorMap m{{"a", test::random_tensor<float>({2, 3}, rng)}, {"b.c", test::random_tensor<float>({4}, rng)}};
  std::stringstream ss;
  write_tensor_archive(ss, m);
  std::stringstream copy(ss.str());
  EXPECT_EQ(read_tensor_archive(copy), m);
  std::stringstream cut(ss.str().substr(0, ss.str().size() - 3));
  EXPECT_THROW(read_tensor_archive(cut), LoadError);
}

TEST(Gradients, DirectionalDerivativeMatchesForEveryTensor) {
  auto s = test::grad_check_setup();
  ParameterStore<double> grads = s.params.zeros_like();
  test::model_total_loss(s.cfg, s.params, s.image, s.gt, s.loss, &grads);
  std::mt19937_64 rng(12);
  for (auto& [name, t] : s.params.tensors) {
    const auto dir = test::random_tensor<double>(t.shape(), rng);
    double analytic = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) analytic += grads.at(name)[i] * dir[i];
    const Tensor<double> keep = t;
    const double h = 1e-6;  // 1e-5 steps can cross a ReLU or max-pool switch
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = keep[i] + h * dir[i];
    const double up = test::model_total_loss(s.cfg, s.params, s.image, s.gt, s.loss, nullptr);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = keep[i] - h * dir[i];
    const double down = test::model_total_loss(s.cfg, s.params, s.image, s.gt, s.loss, nullptr);
    t = keep;
    const double numeric = (up - down) / (2 * h);
    EXPECT_LE(std::abs(analytic - numeric), 1e-4 * std::max({std::abs(analytic), std::abs(numeric), 1e-8}))
        << name << ": analytic " << analytic << " numeric " << numeric;
  }
}

}  // namespace
}  // namespace msfa

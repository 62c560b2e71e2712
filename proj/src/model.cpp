#include "msfanet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "msfanet/nn.hpp"

namespace msfa {

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  MSFA_EXPECT(block_channels.size() == 5, "block_channels must have 5 entries");
  MSFA_EXPECT(convs_per_block.size() == 5, "convs_per_block must have 5 entries");
  for (int c : block_channels) MSFA_EXPECT(c > 0, "block channels must be positive");
  for (int n : convs_per_block) MSFA_EXPECT(n >= 1, "each block needs at least one convolution");
  std::set<int> seen;
  for (int t : skip_targets) {
    MSFA_EXPECT(t >= 3 && t <= 5, "skip targets must be within {3, 4, 5}");
    MSFA_EXPECT(seen.insert(t).second, "duplicate skip target");
  }
  MSFA_EXPECT(stem_window >= 1, "stem_window must be >= 1");
  MSFA_EXPECT(stem_heads >= 1, "stem_heads must be >= 1");
  MSFA_EXPECT(stem_mlp_ratio >= 1, "stem_mlp_ratio must be >= 1");
  MSFA_EXPECT(channel_multiplier > 0.0, "channel_multiplier must be positive");
  MSFA_EXPECT(upsample_kernel >= 2 && upsample_kernel % 2 == 0, "upsample_kernel must be even and >= 2");
  for (int c : regressor_channels) MSFA_EXPECT(c > 0, "regressor channels must be positive");
  if (enable_skipagg && width(stem_channels[0]) % stem_heads != 0) {
    throw ContractError("stem heads (" + std::to_string(stem_heads) + ") must divide stem width (" +
                        std::to_string(width(stem_channels[0])) + ")");
  }
}

int ModelConfig::width(int full) const {
  return std::max(1, static_cast<int>(std::lround(full * channel_multiplier)));
}

int ModelConfig::pad_multiple() const { return enable_skipagg ? std::lcm(16, 2 * stem_window) : 16; }

// ---------------------------------------------------------------------------
// Parameters

namespace {

std::string conv_name(int block, int j) {
  return "backbone.conv" + std::to_string(block) + "_" + std::to_string(j);
}

void add_conv(std::vector<ParamSpec>& out, const std::string& name, int cout, int cin, int k, bool bias, bool backbone) {
  out.push_back({name + ".weight", {cout, cin, k, k}, InitTag::gaussian, backbone, cin * k * k});
  if (bias) out.push_back({name + ".bias", {cout}, InitTag::zeros, backbone, 0});
}

void add_linear(std::vector<ParamSpec>& out, const std::string& name, int cout, int cin) {
  out.push_back({name + ".weight", {cout, cin}, InitTag::gaussian, false, cin});
  out.push_back({name + ".bias", {cout}, InitTag::zeros, false, 0});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& name, int c) {
  out.push_back({name + ".weight", {c}, InitTag::ones, false, 0});
  out.push_back({name + ".bias", {c}, InitTag::zeros, false, 0});
}

std::string stem_block(int index) { return "stem.swin" + std::to_string(index); }

bool has_skip(const ModelConfig& cfg, int block) {
  return cfg.enable_skipagg &&
         std::find(cfg.skip_targets.begin(), cfg.skip_targets.end(), block) != cfg.skip_targets.end();
}

int skip_stride(int target) { return block_output_stride(target) / 2; }

constexpr std::string_view kOutputLayerWeight = "regressor.upsample.weight";

}  // namespace

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  int cin = 3;
  for (int b = 1; b <= 5; ++b) {
    const int c = cfg.block_width(b);
    for (int j = 1; j <= cfg.convs_per_block[b - 1]; ++j) {
      add_conv(out, conv_name(b, j), c, cin, 3, true, true);
      cin = c;
    }
  }
  if (cfg.enable_shortagg) {
    for (int b = 2; b <= 5; ++b) {
      add_conv(out, "shortagg.block" + std::to_string(b), cfg.block_width(b), cfg.block_width(b - 1), 1, false, false);
    }
  }
  if (cfg.enable_skipagg) {
    const int e = cfg.width(cfg.stem_channels[0]);
    const int s = cfg.width(cfg.stem_channels[1]);
    const int m = cfg.stem_window;
    add_conv(out, "stem.embed", e, 3, 1, true, false);
    for (int i = 1; i <= 2; ++i) {
      const std::string p = stem_block(i);
      add_norm(out, p + ".norm1", e);
      add_linear(out, p + ".attn.qkv", 3 * e, e);
      out.push_back({p + ".attn.relative_position_bias", {(2 * m - 1) * (2 * m - 1), cfg.stem_heads},
                     InitTag::gaussian, false, 0});
      add_linear(out, p + ".attn.proj", e, e);
      add_norm(out, p + ".norm2", e);
      add_linear(out, p + ".mlp.fc1", cfg.stem_mlp_ratio * e, e);
      add_linear(out, p + ".mlp.fc2", e, cfg.stem_mlp_ratio * e);
    }
    add_conv(out, "stem.out", s, e, 3, true, false);
    for (int t : cfg.skip_targets) {
      add_conv(out, "skipagg.block" + std::to_string(t), cfg.block_width(t), s, 1, false, false);
    }
  }
  int rin = cfg.block_width(5);
  for (int k = 0; k < 3; ++k) {
    const int c = cfg.width(cfg.regressor_channels[k]);
    add_conv(out, "regressor.conv" + std::to_string(k + 1), c, rin, 3, true, false);
    rin = c;
  }
  // Transposed conv weights are (Cin, Cout, k, k).
  const int k = cfg.upsample_kernel;
  out.push_back({"regressor.upsample.weight", {rin, 1, k, k}, InitTag::gaussian, false, rin * k * k / 4});
  out.push_back({"regressor.upsample.bias", {1}, InitTag::zeros, false, 0});
  return out;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& p : parameter_layout(cfg)) n += Tensor<float>::count(p.shape);
  return n;
}

std::vector<std::string> backbone_parameter_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& p : parameter_layout(cfg)) {
    if (p.backbone) names.push_back(p.name);
  }
  return names;
}

ParameterStore<float> init_parameters(const ModelConfig& cfg, const InitOptions& opts) {
  const auto layout = parameter_layout(cfg);
  std::optional<TensorMap> pretrained;
  if (opts.pretrained) {
    pretrained = load_tensor_archive(*opts.pretrained);
    std::string problems;
    for (const auto& p : layout) {
      if (!p.backbone) continue;
      auto it = pretrained->find(p.name);
      if (it == pretrained->end()) {
        problems += "\n  " + p.name + ": missing";
      } else if (it->second.shape() != p.shape) {
        problems += "\n  " + p.name + ": expected " + shape_string(p.shape) + ", found " + shape_string(it->second.shape());
      }
    }
    if (!problems.empty()) throw LoadError("pretrained backbone does not match the model:" + problems);
  }

  Rng rng(opts.seed);
  ParameterStore<float> store;
  for (const auto& p : layout) {
    Tensor<float> t(p.shape);
    InitTag tag = p.init;
    if (pretrained && p.backbone) {
      t = pretrained->at(p.name);
      tag = InitTag::pretrained;
    } else if (p.init == InitTag::ones) {
      t.fill(1.0f);
    } else if (p.init == InitTag::gaussian) {
      const bool he = opts.scheme == InitScheme::he_normal && p.fan_in > 0 && p.name != kOutputLayerWeight;
      const double sd = he ? std::sqrt(2.0 / p.fan_in) : opts.std;
      std::normal_distribution<float> dist(0.0f, static_cast<float>(sd));
      for (float& v : t.vec()) v = dist(rng);
    }
    store.tensors.emplace(p.name, std::move(t));
    store.tags.emplace(p.name, tag);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Forward building blocks

namespace {

constexpr nn::ConvSpec kConv3{3, 1, 1};

template <typename T>
Tensor<T> conv_stack_forward(const Tensor<T>& x, const std::vector<std::string>& names, const ParameterStore<T>& params,
                             ConvStackRecord<T>* rec, const FeatureHook<T>& hook = {}) {
  Tensor<T> cur = x;
  if (rec) {
    rec->input = x;
    rec->outputs.clear();
  }
  for (const auto& name : names) {
    cur = nn::conv2d(cur, params.at(name + ".weight"), &params.at(name + ".bias"), kConv3);
    nn::relu_inplace(cur);
    if (hook) hook(name, cur);
    if (rec) rec->outputs.push_back(cur);
  }
  return cur;
}

template <typename T>
Tensor<T> conv_stack_backward(Tensor<T> dy, const ConvStackRecord<T>& rec, const std::vector<std::string>& names,
                              const ParameterStore<T>& params, ParameterStore<T>& grads, bool need_dx) {
  for (int j = static_cast<int>(names.size()) - 1; j >= 0; --j) {
    nn::relu_backward_inplace(rec.outputs[j], dy);
    const Tensor<T>& in = j == 0 ? rec.input : rec.outputs[j - 1];
    Tensor<T> dx;
    const bool want = j > 0 || need_dx;
    nn::conv2d_backward(in, params.at(names[j] + ".weight"), dy, kConv3, want ? &dx : nullptr,
                        grads.at(names[j] + ".weight"), &grads.at(names[j] + ".bias"));
    dy = std::move(dx);
  }
  return dy;
}

std::vector<std::string> block_conv_names(const ModelConfig& cfg, int block) {
  std::vector<std::string> names;
  for (int j = 1; j <= cfg.convs_per_block[block - 1]; ++j) names.push_back(conv_name(block, j));
  return names;
}

const std::vector<std::string>& regressor_names() {
  static const std::vector<std::string> names{"regressor.conv1", "regressor.conv2", "regressor.conv3"};
  return names;
}

nn::ConvSpec upsample_spec(const ModelConfig& cfg) { return {cfg.upsample_kernel, 2, (cfg.upsample_kernel - 2) / 2}; }

template <typename T>
attn::BlockGrads<T> stem_block_grads(ParameterStore<T>& g, int index) {
  const std::string p = stem_block(index);
  return {&g.at(p + ".norm1.weight"), &g.at(p + ".norm1.bias"),   &g.at(p + ".attn.qkv.weight"),
          &g.at(p + ".attn.qkv.bias"), &g.at(p + ".attn.relative_position_bias"),
          &g.at(p + ".attn.proj.weight"), &g.at(p + ".attn.proj.bias"), &g.at(p + ".norm2.weight"),
          &g.at(p + ".norm2.bias"),    &g.at(p + ".mlp.fc1.weight"),  &g.at(p + ".mlp.fc1.bias"),
          &g.at(p + ".mlp.fc2.weight"), &g.at(p + ".mlp.fc2.bias")};
}

attn::BlockSpec stem_spec(const ModelConfig& cfg, int index, bool mask_shifted) {
  return {cfg.stem_window, cfg.stem_heads, index == 2, mask_shifted};
}

}  // namespace

template <typename T>
attn::BlockWeights<T> stem_block_weights(const ParameterStore<T>& w, int index) {
  const std::string p = stem_block(index);
  return {&w.at(p + ".norm1.weight"), &w.at(p + ".norm1.bias"),   &w.at(p + ".attn.qkv.weight"),
          &w.at(p + ".attn.qkv.bias"), &w.at(p + ".attn.relative_position_bias"),
          &w.at(p + ".attn.proj.weight"), &w.at(p + ".attn.proj.bias"), &w.at(p + ".norm2.weight"),
          &w.at(p + ".norm2.bias"),    &w.at(p + ".mlp.fc1.weight"),  &w.at(p + ".mlp.fc1.bias"),
          &w.at(p + ".mlp.fc2.weight"), &w.at(p + ".mlp.fc2.bias")};
}

template <typename T>
Tensor<T> vgg_block_forward(const Tensor<T>& x, int block, const ModelConfig& cfg, const ParameterStore<T>& params,
                            ConvStackRecord<T>* record) {
  MSFA_EXPECT(block >= 1 && block <= 5, "block index must be in 1..5");
  const int expected_in = block == 1 ? 3 : cfg.block_width(block - 1);
  if (x.channels() != expected_in) {
    throw ContractError("block " + std::to_string(block) + " expects " + std::to_string(expected_in) +
                        " input channels, got " + std::to_string(x.channels()));
  }
  ConvStackRecord<T> local;
  ConvStackRecord<T>& rec = record ? *record : local;
  Tensor<T> y = conv_stack_forward(x, block_conv_names(cfg, block), params, &rec);
  rec.pooled = block < 5;
  if (rec.pooled) y = nn::max_pool2x2(y, rec.argmax);
  return y;
}

template <typename T>
Tensor<T> short_agg(const Tensor<T>& block_input, const Tensor<T>& block_output, int block,
                    const ParameterStore<T>& params) {
  MSFA_EXPECT(block >= 2 && block <= 5, "ShortAgg applies to blocks 2..5");
  const nn::ConvSpec spec{1, block < 5 ? 2 : 1, 0};
  Tensor<T> proj = nn::conv2d(block_input, params.at("shortagg.block" + std::to_string(block) + ".weight"),
                              static_cast<const Tensor<T>*>(nullptr), spec);
  if (proj.shape() != block_output.shape()) {
    throw ContractError("ShortAgg projection " + shape_string(proj.shape()) + " does not match block output " +
                        shape_string(block_output.shape()));
  }
  proj += block_output;
  return proj;
}

template <typename T>
Tensor<T> transformer_stem_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParameterStore<T>& params,
                                   ForwardTrace<T>* trace, bool mask_shifted) {
  MSFA_EXPECT(image.rank() == 3, "stem expects a (C, H, W) image");
  if (image.height() % (2 * cfg.stem_window) != 0 || image.width() % (2 * cfg.stem_window) != 0) {
    throw ContractError("stem input " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                        " must be divisible by 2 * window (" + std::to_string(2 * cfg.stem_window) + "); pad first");
  }
  ForwardTrace<T> local;
  ForwardTrace<T>& t = trace ? *trace : local;
  t.stem_embed = nn::conv2d(image, params.at("stem.embed.weight"), &params.at("stem.embed.bias"), nn::ConvSpec{1, 1, 0});
  t.stem_pooled = nn::avg_pool2x2(t.stem_embed);
  t.stem_swin1 = attn::block_forward(t.stem_pooled, stem_block_weights(params, 1), stem_spec(cfg, 1, mask_shifted), &t.swin1);
  t.stem_swin2 = attn::block_forward(t.stem_swin1, stem_block_weights(params, 2), stem_spec(cfg, 2, mask_shifted), &t.swin2);
  t.stem_conv = nn::conv2d(t.stem_swin2, params.at("stem.out.weight"), &params.at("stem.out.bias"), kConv3);
  t.stem_out = nn::bilinear_resize(t.stem_conv, image.height() / 2, image.width() / 2);
  return t.stem_out;
}

template <typename T>
Tensor<T> skip_agg_adapt(const Tensor<T>& stem_features, int target, const ModelConfig& cfg,
                         const ParameterStore<T>& params) {
  MSFA_EXPECT(target >= 3 && target <= 5, "SkipAgg targets are blocks 3..5");
  MSFA_EXPECT(stem_features.channels() == cfg.width(cfg.stem_channels[1]), "stem feature channel mismatch");
  return nn::conv2d(stem_features, params.at("skipagg.block" + std::to_string(target) + ".weight"),
                    static_cast<const Tensor<T>*>(nullptr), nn::ConvSpec{1, skip_stride(target), 0});
}

// ---------------------------------------------------------------------------
// Whole network

template <typename T>
Tensor<T> forward(const Tensor<T>& image, const ModelConfig& cfg, const ParameterStore<T>& params,
                  ForwardTrace<T>* trace, const FeatureHook<T>& hook) {
  cfg.validate();
  MSFA_EXPECT(image.rank() == 3 && image.channels() == 3, "model input must be (3, H, W)");
  ForwardTrace<T> local;
  ForwardTrace<T>& t = trace ? *trace : local;
  const int m = cfg.pad_multiple();
  t.input_h = image.height();
  t.input_w = image.width();
  t.padded_h = (image.height() + m - 1) / m * m;
  t.padded_w = (image.width() + m - 1) / m * m;
  t.padded_image = nn::reflect_pad(image, t.padded_h, t.padded_w);

  if (cfg.enable_skipagg) {
    transformer_stem_forward(t.padded_image, cfg, params, &t);
    if (hook) hook("stem.out", t.stem_out);
  }

  const Tensor<T>* x = &t.padded_image;
  for (int b = 1; b <= 5; ++b) {
    ConvStackRecord<T>& rec = t.blocks[b - 1];
    Tensor<T> y = conv_stack_forward(*x, block_conv_names(cfg, b), params, &rec, hook);
    rec.pooled = b < 5;
    if (rec.pooled) y = nn::max_pool2x2(y, rec.argmax);
    if (cfg.enable_shortagg && b >= 2) y = short_agg(*x, y, b, params);
    if (has_skip(cfg, b)) {
      Tensor<T> s = skip_agg_adapt(t.stem_out, b, cfg, params);
      if (s.shape() != y.shape()) {
        throw ContractError("SkipAgg output " + shape_string(s.shape()) + " does not match block " +
                            std::to_string(b) + " output " + shape_string(y.shape()));
      }
      y += s;
    }
    if (hook) hook("block" + std::to_string(b) + ".out", y);
    t.block_outputs[b - 1] = std::move(y);
    x = &t.block_outputs[b - 1];
  }

  Tensor<T> r = conv_stack_forward(*x, regressor_names(), params, &t.regressor, hook);
  t.density_padded = nn::conv_transpose2d(r, params.at("regressor.upsample.weight"),
                                          &params.at("regressor.upsample.bias"), upsample_spec(cfg));
  nn::relu_inplace(t.density_padded);
  Tensor<T> out = nn::crop(t.density_padded, (t.input_h + 7) / 8, (t.input_w + 7) / 8);
  if (hook) hook("density", out);
  return out;
}

template <typename T>
void backward(const Tensor<T>& d_density, const ModelConfig& cfg, const ParameterStore<T>& params,
              const ForwardTrace<T>& t, ParameterStore<T>& grads) {
  Tensor<T> dup = nn::zero_pad(d_density, t.density_padded.height(), t.density_padded.width());
  nn::relu_backward_inplace(t.density_padded, dup);
  Tensor<T> dr;
  nn::conv_transpose2d_backward(t.regressor.outputs.back(), params.at("regressor.upsample.weight"), dup,
                                upsample_spec(cfg), &dr, grads.at("regressor.upsample.weight"),
                                &grads.at("regressor.upsample.bias"));
  Tensor<T> dy = conv_stack_backward(std::move(dr), t.regressor, regressor_names(), params, grads, true);

  Tensor<T> dstem;
  if (cfg.enable_skipagg) dstem = Tensor<T>(t.stem_out.shape());

  for (int b = 5; b >= 1; --b) {
    const ConvStackRecord<T>& rec = t.blocks[b - 1];
    const Tensor<T>& x = b == 1 ? t.padded_image : t.block_outputs[b - 2];
    if (has_skip(cfg, b)) {
      Tensor<T> ds;
      nn::conv2d_backward(t.stem_out, params.at("skipagg.block" + std::to_string(b) + ".weight"), dy,
                          nn::ConvSpec{1, skip_stride(b), 0}, &ds,
                          grads.at("skipagg.block" + std::to_string(b) + ".weight"), static_cast<Tensor<T>*>(nullptr));
      dstem += ds;
    }
    Tensor<T> dx_short;
    if (cfg.enable_shortagg && b >= 2) {
      nn::conv2d_backward(x, params.at("shortagg.block" + std::to_string(b) + ".weight"), dy,
                          nn::ConvSpec{1, b < 5 ? 2 : 1, 0}, &dx_short,
                          grads.at("shortagg.block" + std::to_string(b) + ".weight"), static_cast<Tensor<T>*>(nullptr));
    }
    Tensor<T> df = rec.pooled ? nn::max_pool2x2_backward(dy, rec.argmax, rec.outputs.back().shape()) : std::move(dy);
    Tensor<T> dx = conv_stack_backward(std::move(df), rec, block_conv_names(cfg, b), params, grads, b > 1);
    if (b > 1) {
      if (!dx_short.empty()) dx += dx_short;
      dy = std::move(dx);
    }
  }

  if (cfg.enable_skipagg) {
    Tensor<T> dconv = nn::bilinear_resize_backward(dstem, t.stem_conv.height(), t.stem_conv.width());
    Tensor<T> dswin2;
    nn::conv2d_backward(t.stem_swin2, params.at("stem.out.weight"), dconv, kConv3, &dswin2, grads.at("stem.out.weight"),
                        &grads.at("stem.out.bias"));
    Tensor<T> dswin1 = attn::block_backward(dswin2, stem_block_weights(params, 2), stem_block_grads(grads, 2),
                                            stem_spec(cfg, 2, true), t.swin2);
    Tensor<T> dpooled = attn::block_backward(dswin1, stem_block_weights(params, 1), stem_block_grads(grads, 1),
                                             stem_spec(cfg, 1, true), t.swin1);
    Tensor<T> dembed = nn::avg_pool2x2_backward(dpooled, t.stem_embed.shape());
    nn::conv2d_backward(t.padded_image, params.at("stem.embed.weight"), dembed, nn::ConvSpec{1, 1, 0},
                        static_cast<Tensor<T>*>(nullptr), grads.at("stem.embed.weight"), &grads.at("stem.embed.bias"));
  }
}

DensityMap model_forward(const Tensor<float>& image, const ModelConfig& cfg, const ParameterStore<float>& params) {
  Tensor<float> d = forward(image, cfg, params);
  DensityMap out(d.height(), d.width(), 8);
  std::copy(d.vec().begin(), d.vec().end(), out.values.values.begin());
  return out;
}

#define MSFA_INSTANTIATE_MODEL(T)                                                                                   \
  template Tensor<T> forward(const Tensor<T>&, const ModelConfig&, const ParameterStore<T>&, ForwardTrace<T>*,       \
                             const FeatureHook<T>&);                                                                \
  template void backward(const Tensor<T>&, const ModelConfig&, const ParameterStore<T>&, const ForwardTrace<T>&,     \
                         ParameterStore<T>&);                                                                       \
  template Tensor<T> vgg_block_forward(const Tensor<T>&, int, const ModelConfig&, const ParameterStore<T>&,          \
                                       ConvStackRecord<T>*);                                                        \
  template Tensor<T> short_agg(const Tensor<T>&, const Tensor<T>&, int, const ParameterStore<T>&);                   \
  template Tensor<T> transformer_stem_forward(const Tensor<T>&, const ModelConfig&, const ParameterStore<T>&,        \
                                              ForwardTrace<T>*, bool);                                              \
  template Tensor<T> skip_agg_adapt(const Tensor<T>&, int, const ModelConfig&, const ParameterStore<T>&);            \
  template attn::BlockWeights<T> stem_block_weights(const ParameterStore<T>&, int);

MSFA_INSTANTIATE_MODEL(float)
MSFA_INSTANTIATE_MODEL(double)

}  // namespace msfa

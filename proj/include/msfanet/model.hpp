#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msfanet/crowd_data.hpp"
#include "msfanet/parameters.hpp"
#include "msfanet/window_attention.hpp"

namespace msfa {

/// Architecture hyperparameters. Channel counts are the full-width values;
/// `channel_multiplier` scales every width (rounded, at least 1) so tiny test
/// models share the same graph.
struct ModelConfig {
  std::vector<int> block_channels{64, 128, 256, 512, 512};
  std::vector<int> convs_per_block{2, 2, 3, 3, 3};
  std::vector<int> skip_targets{3, 4, 5};  // blocks receiving SkipAgg features
  std::array<int, 2> stem_channels{96, 128};
  int stem_window = 7;
  int stem_heads = 3;
  int stem_mlp_ratio = 4;
  std::array<int, 3> regressor_channels{256, 128, 64};
  int upsample_kernel = 4;  // transposed conv, stride 2
  bool enable_shortagg = true;
  bool enable_skipagg = true;
  double channel_multiplier = 1.0;

  void validate() const;
  int width(int full) const;
  int block_width(int block) const { return width(block_channels.at(static_cast<std::size_t>(block - 1))); }
  /// Padded input sides must be multiples of this.
  int pad_multiple() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Output stride of block `b` (1-based): 2, 4, 8, 16, 16.
constexpr int block_output_stride(int b) { return b >= 4 ? 16 : (1 << b); }

enum class InitScheme {
  gaussian,   // N(0, std^2) for every weight
  he_normal,  // N(0, 2 / fan_in) for hidden layers, N(0, std^2) for the output layer
};

struct InitOptions {
  InitScheme scheme = InitScheme::gaussian;
  double std = 0.01;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> pretrained;  // 13-layer backbone archive
};

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  InitTag init;  // gaussian weights, zero biases, unit norm scales
  bool backbone;
  int fan_in;
};

/// Every parameter the graph references, in creation order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);

/// Names of the 13 backbone convolutions expected in a pretrained archive:
/// backbone.conv{b}_{j}.weight / .bias for b = 1..5.
std::vector<std::string> backbone_parameter_names(const ModelConfig& cfg);

ParameterStore<float> init_parameters(const ModelConfig& cfg, const InitOptions& opts = {});

/// Called with a layer name and its output during the forward pass.
template <typename T>
using FeatureHook = std::function<void(const std::string& layer, const Tensor<T>& features)>;

template <typename T>
struct ConvStackRecord {
  Tensor<T> input;
  std::vector<Tensor<T>> outputs;  // post-ReLU output of each conv
  std::vector<std::uint32_t> argmax;
  bool pooled = false;
};

/// Intermediate values kept for the backward pass.
template <typename T>
struct ForwardTrace {
  int input_h = 0, input_w = 0;
  int padded_h = 0, padded_w = 0;
  std::array<ConvStackRecord<T>, 5> blocks;
  std::array<Tensor<T>, 5> block_outputs;
  Tensor<T> padded_image;
  Tensor<T> stem_embed, stem_pooled, stem_swin1, stem_swin2, stem_conv, stem_out;
  attn::BlockCache<T> swin1, swin2;
  ConvStackRecord<T> regressor;
  Tensor<T> density_padded;  // post-ReLU output of the transposed conv
};

/// Runs the network on a normalized (3, H, W) image and returns the
/// (1, ceil(H/8), ceil(W/8)) density. The image is reflect-padded to
/// cfg.pad_multiple() and the output cropped back.
template <typename T>
Tensor<T> forward(const Tensor<T>& image, const ModelConfig& cfg, const ParameterStore<T>& params,
                  ForwardTrace<T>* trace = nullptr, const FeatureHook<T>& hook = {});

/// Back-propagates dL/d(density) and accumulates into `grads`.
template <typename T>
void backward(const Tensor<T>& d_density, const ModelConfig& cfg, const ParameterStore<T>& params,
              const ForwardTrace<T>& trace, ParameterStore<T>& grads);

DensityMap model_forward(const Tensor<float>& image, const ModelConfig& cfg, const ParameterStore<float>& params);

// Building blocks, exposed for testing.

/// Conv3x3 + ReLU stack of block `b`, then 2x2 max pool for b < 5.
template <typename T>
Tensor<T> vgg_block_forward(const Tensor<T>& x, int block, const ModelConfig& cfg, const ParameterStore<T>& params,
                            ConvStackRecord<T>* record = nullptr);

/// Block output plus the strided 1x1 projection of the block input.
template <typename T>
Tensor<T> short_agg(const Tensor<T>& block_input, const Tensor<T>& block_output, int block,
                    const ParameterStore<T>& params);

/// 1x1 embed -> 2x2 avg pool -> regular window block -> shifted window block
/// -> 3x3 conv -> bilinear resize to half the input size.
template <typename T>
Tensor<T> transformer_stem_forward(const Tensor<T>& image, const ModelConfig& cfg, const ParameterStore<T>& params,
                                   ForwardTrace<T>* trace = nullptr, bool mask_shifted = true);

/// Strided 1x1 projection of stride-2 stem features onto block `target`.
template <typename T>
Tensor<T> skip_agg_adapt(const Tensor<T>& stem_features, int target, const ModelConfig& cfg,
                         const ParameterStore<T>& params);

template <typename T>
attn::BlockWeights<T> stem_block_weights(const ParameterStore<T>& params, int index);

}  // namespace msfa

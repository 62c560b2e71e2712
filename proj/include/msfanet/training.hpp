#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msfanet/crowd_data.hpp"
#include "msfanet/losses.hpp"
#include "msfanet/model.hpp"
#include "msfanet/parameters.hpp"
#include "msfanet/rng.hpp"

namespace msfa {

/// The four model variants of the ablation study.
enum class Ablation { baseline, sh, sh_sk, sh_sk_ploss };

Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);
/// Switches ShortAgg / SkipAgg on or off to match the variant.
ModelConfig apply_ablation(ModelConfig cfg, Ablation a);
/// Euclidean loss for the first three variants, the combined loss for the last.
Objective objective_for(Ablation a);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-5;
  int batch_size = 8;
  int iterations = 0;
  std::uint64_t seed = 0;
  LossConfig loss;
  Ablation ablation = Ablation::sh_sk_ploss;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  int crops_per_image = 4;   // draws per source image in one epoch
  AdamConfig adam;
  bool log_wall_time = true;  // false writes wall_ms = 0 for byte-stable logs

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainingPair {
  std::string id;
  Tensor<float> image;  // normalized (3, H, W)
  DensityMap target;    // 1/8 scale, ceil(H/8) x ceil(W/8)
};

/// Indexed training data. `sample` may consume draws from `rng` for
/// augmentation; it must not keep state between calls.
class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual std::size_t size() const = 0;
  virtual TrainingPair sample(std::size_t index, Rng& rng) const = 0;
};

/// Samples held in memory. With augmentation on, each draw is
/// scale -> crop -> mirror followed by target generation; with it off the
/// stored images and their targets are returned unchanged.
class InMemorySource final : public DataSource {
 public:
  InMemorySource(std::vector<CrowdSample> samples, std::optional<AugmentationConfig> augmentation,
                 double sigma = kDefaultSigma);

  std::size_t size() const override { return samples_.size(); }
  TrainingPair sample(std::size_t index, Rng& rng) const override;

 private:
  std::vector<CrowdSample> samples_;
  std::vector<DensityMap> targets_;
  std::optional<AugmentationConfig> augmentation_;
  double sigma_;
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  ModelConfig model;
  TrainConfig train;
  ParameterStore<float> params;
  ParameterStore<float> adam_m;
  ParameterStore<float> adam_v;
  int iteration = 0;  // completed optimizer steps
  Rng rng;            // data order and augmentation draws
  std::vector<std::uint32_t> epoch_order;
  std::uint64_t epoch_position = 0;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// Fresh state: parameters from `init`, zero moments, data RNG seeded from
/// train.seed.
TrainState make_train_state(const ModelConfig& model, const TrainConfig& train, const InitOptions& init);

struct LossRecord {
  int iteration = 0;  // 1-based step whose pre-update batch loss is `value`
  std::string objective;
  double value = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

/// One NDJSON line: {"iteration","objective","value","lr","wall_ms"}.
std::string to_json_line(const LossRecord& r);

struct TrainHooks {
  std::function<void(const LossRecord&)> on_record;
  std::optional<std::filesystem::path> checkpoint_dir;  // ckpt_<iteration>.msfa every checkpoint_every steps
};

/// Thrown when the batch loss is NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int iteration, double lr, std::vector<std::string> batch_ids, double value);
  int iteration;
  double lr;
  std::vector<std::string> batch_ids;
  double value;
};

/// Runs Adam from state.iteration up to state.train.iterations.
void train(TrainState& state, const DataSource& data, const TrainHooks& hooks = {});

/// Loss and parameter gradient of one batch, without updating anything.
double batch_loss_and_grad(const ModelConfig& model, const ParameterStore<float>& params,
                           const std::vector<TrainingPair>& batch, Objective objective, const LossConfig& loss,
                           ParameterStore<float>* grads);

void adam_step(ParameterStore<float>& params, const ParameterStore<float>& grads, ParameterStore<float>& m,
               ParameterStore<float>& v, int step, double lr, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "MSFACKPT" | u32 version | u64 header_len | header JSON |
//   tensor archive (param/*, adam_m/*, adam_v/*) | "MSFAEND."
//
// The header holds both configs, the iteration counter and the data RNG state.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Reads and validates the whole file before returning; throws LoadError on
/// truncation, bad version or parameter shapes that disagree with the config.
TrainState load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace msfa

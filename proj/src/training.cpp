#include "msfanet/training.hpp"

#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "msfanet/errors.hpp"

namespace msfa {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Variants and configuration

Ablation parse_ablation(const std::string& name) {
  if (name == "baseline") return Ablation::baseline;
  if (name == "sh") return Ablation::sh;
  if (name == "sh_sk") return Ablation::sh_sk;
  if (name == "sh_sk_ploss") return Ablation::sh_sk_ploss;
  throw ContractError("unknown ablation '" + name + "' (expected baseline, sh, sh_sk or sh_sk_ploss)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::sh: return "sh";
    case Ablation::sh_sk: return "sh_sk";
    case Ablation::sh_sk_ploss: return "sh_sk_ploss";
  }
  return "unknown";
}

ModelConfig apply_ablation(ModelConfig cfg, Ablation a) {
  cfg.enable_shortagg = a != Ablation::baseline;
  cfg.enable_skipagg = a == Ablation::sh_sk || a == Ablation::sh_sk_ploss;
  return cfg;
}

Objective objective_for(Ablation a) { return a == Ablation::sh_sk_ploss ? Objective::total : Objective::euclidean; }

void TrainConfig::validate() const {
  MSFA_EXPECT(learning_rate > 0.0, "learning_rate must be > 0");
  MSFA_EXPECT(batch_size >= 1, "batch_size must be >= 1");
  MSFA_EXPECT(iterations >= 0, "iterations must be >= 0");
  MSFA_EXPECT(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  MSFA_EXPECT(crops_per_image >= 1, "crops_per_image must be >= 1");
  MSFA_EXPECT(adam.beta1 >= 0.0 && adam.beta1 < 1.0, "adam beta1 must be in [0, 1)");
  MSFA_EXPECT(adam.beta2 >= 0.0 && adam.beta2 < 1.0, "adam beta2 must be in [0, 1)");
  MSFA_EXPECT(adam.epsilon > 0.0, "adam epsilon must be > 0");
  loss.validate();
}

// ---------------------------------------------------------------------------
// Data

InMemorySource::InMemorySource(std::vector<CrowdSample> samples, std::optional<AugmentationConfig> augmentation,
                               double sigma)
    : samples_(std::move(samples)), augmentation_(std::move(augmentation)), sigma_(sigma) {
  MSFA_EXPECT(sigma_ > 0.0, "sigma must be > 0");
  if (augmentation_) {
    augmentation_->validate();
  } else {
    targets_.reserve(samples_.size());
    for (const auto& s : samples_) targets_.push_back(make_target(s.annotations, sigma_, 8));
  }
}

TrainingPair InMemorySource::sample(std::size_t index, Rng& rng) const {
  MSFA_EXPECT(index < samples_.size(), "sample index out of range");
  if (!augmentation_) return {samples_[index].id, samples_[index].image, targets_[index]};
  CrowdSample s = augment(samples_[index], *augmentation_, rng);
  DensityMap target = make_target(s.annotations, sigma_, 8);
  return {std::move(s.id), std::move(s.image), std::move(target)};
}

// ---------------------------------------------------------------------------
// Optimization

TrainState make_train_state(const ModelConfig& model, const TrainConfig& train, const InitOptions& init) {
  train.validate();
  TrainState s;
  s.model = model;
  s.train = train;
  s.params = init_parameters(model, init);
  s.adam_m = s.params.zeros_like();
  s.adam_v = s.params.zeros_like();
  s.rng = Rng(derive_seed(train.seed, 0xDA7A));
  return s;
}

std::string to_json_line(const LossRecord& r) {
  json j;
  j["iteration"] = r.iteration;
  j["objective"] = r.objective;
  j["value"] = r.value;
  j["lr"] = r.lr;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

namespace {

std::string describe_non_finite(int iteration, double lr, const std::vector<std::string>& ids, double value) {
  std::ostringstream os;
  os << "non-finite loss " << value << " at iteration " << iteration << " (lr " << lr << "), batch:";
  for (const auto& id : ids) os << ' ' << id;
  return os.str();
}

}  // namespace

NonFiniteLoss::NonFiniteLoss(int it, double rate, std::vector<std::string> ids, double v)
    : std::runtime_error(describe_non_finite(it, rate, ids, v)),
      iteration(it),
      lr(rate),
      batch_ids(std::move(ids)),
      value(v) {}

double batch_loss_and_grad(const ModelConfig& model, const ParameterStore<float>& params,
                           const std::vector<TrainingPair>& batch, Objective objective, const LossConfig& loss,
                           ParameterStore<float>* grads) {
  MSFA_EXPECT(!batch.empty(), "empty batch");
  // Both losses are means of per-sample terms, so samples are processed one at
  // a time and their gradients scaled by 1/K.
  const double inv_k = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& pair : batch) {
    ForwardTrace<float> trace;
    Tensor<float> out = forward(pair.image, model, params, grads ? &trace : nullptr);
    if (out.height() != pair.target.height() || out.width() != pair.target.width()) {
      throw ContractError("target for '" + pair.id + "' is " + std::to_string(pair.target.height()) + "x" +
                          std::to_string(pair.target.width()) + ", model output is " + std::to_string(out.height()) +
                          "x" + std::to_string(out.width()));
    }
    Grid<float> pred(out.height(), out.width());
    pred.values = out.vec();
    std::vector<Grid<float>> g;
    total += objective_loss<float>(objective, std::span(&pred, 1), std::span(&pair.target.values, 1), loss,
                                   grads ? &g : nullptr) * inv_k;
    if (grads) {
      Tensor<float> d({1, out.height(), out.width()});
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(g[0].values[i] * inv_k);
      backward(d, model, params, trace, *grads);
    }
  }
  return total;
}

void adam_step(ParameterStore<float>& params, const ParameterStore<float>& grads, ParameterStore<float>& m,
               ParameterStore<float>& v, int step, double lr, const AdamConfig& cfg) {
  MSFA_EXPECT(step >= 1, "adam step counter starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, step);
  const double c2 = 1.0 - std::pow(cfg.beta2, step);
  for (auto& [name, p] : params.tensors) {
    const Tensor<float>& g = grads.at(name);
    Tensor<float>& mt = m.at(name);
    Tensor<float>& vt = v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * gi * gi;
      mt[i] = static_cast<float>(mi);
      vt[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
    }
  }
}

namespace {

std::size_t next_index(TrainState& s, std::size_t n) {
  if (s.epoch_position >= s.epoch_order.size()) {
    s.epoch_order.clear();
    for (int r = 0; r < s.train.crops_per_image; ++r) {
      for (std::size_t i = 0; i < n; ++i) s.epoch_order.push_back(static_cast<std::uint32_t>(i));
    }
    std::shuffle(s.epoch_order.begin(), s.epoch_order.end(), s.rng);
    s.epoch_position = 0;
  }
  const std::uint32_t idx = s.epoch_order[s.epoch_position++];
  MSFA_EXPECT(idx < n, "data source shrank since the checkpoint was written");
  return idx;
}

}  // namespace

void train(TrainState& state, const DataSource& data, const TrainHooks& hooks) {
  state.train.validate();
  state.model.validate();
  MSFA_EXPECT(state.train.iterations == 0 || data.size() > 0, "training needs at least one sample");
  const Objective objective = objective_for(state.train.ablation);
  const auto start = std::chrono::steady_clock::now();
  ParameterStore<float> grads = state.params.zeros_like();

  while (state.iteration < state.train.iterations) {
    std::vector<TrainingPair> batch;
    batch.reserve(static_cast<std::size_t>(state.train.batch_size));
    for (int b = 0; b < state.train.batch_size; ++b) batch.push_back(data.sample(next_index(state, data.size()), state.rng));

    grads.fill(0.0f);
    const double value = batch_loss_and_grad(state.model, state.params, batch, objective, state.train.loss, &grads);
    const int step = state.iteration + 1;
    if (!std::isfinite(value)) {
      std::vector<std::string> ids;
      for (const auto& p : batch) ids.push_back(p.id);
      throw NonFiniteLoss(step, state.train.learning_rate, std::move(ids), value);
    }
    adam_step(state.params, grads, state.adam_m, state.adam_v, step, state.train.learning_rate, state.train.adam);
    state.iteration = step;

    if (hooks.on_record) {
      LossRecord r{step, to_string(objective), value, state.train.learning_rate, 0.0};
      if (state.train.log_wall_time) {
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      hooks.on_record(r);
    }
    if (hooks.checkpoint_dir && state.train.checkpoint_every > 0 && step % state.train.checkpoint_every == 0) {
      save_checkpoint(state, *hooks.checkpoint_dir / ("ckpt_" + std::to_string(step) + ".msfa"));
    }
  }
}

// ---------------------------------------------------------------------------
// Config serialization

json model_config_to_json(const ModelConfig& c) {
  return json{{"block_channels", c.block_channels},
              {"convs_per_block", c.convs_per_block},
              {"skip_targets", c.skip_targets},
              {"stem_channels", c.stem_channels},
              {"stem_window", c.stem_window},
              {"stem_heads", c.stem_heads},
              {"stem_mlp_ratio", c.stem_mlp_ratio},
              {"regressor_channels", c.regressor_channels},
              {"upsample_kernel", c.upsample_kernel},
              {"enable_shortagg", c.enable_shortagg},
              {"enable_skipagg", c.enable_skipagg},
              {"channel_multiplier", c.channel_multiplier}};
}

namespace {

template <typename V>
void read_field(const json& j, const char* key, V& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw SchemaError(prefix + key, e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("model", "expected an object");
  ModelConfig c;
  const std::string p = "model.";
  read_field(j, "block_channels", c.block_channels, p);
  read_field(j, "convs_per_block", c.convs_per_block, p);
  read_field(j, "skip_targets", c.skip_targets, p);
  read_field(j, "stem_channels", c.stem_channels, p);
  read_field(j, "stem_window", c.stem_window, p);
  read_field(j, "stem_heads", c.stem_heads, p);
  read_field(j, "stem_mlp_ratio", c.stem_mlp_ratio, p);
  read_field(j, "regressor_channels", c.regressor_channels, p);
  read_field(j, "upsample_kernel", c.upsample_kernel, p);
  read_field(j, "enable_shortagg", c.enable_shortagg, p);
  read_field(j, "enable_skipagg", c.enable_skipagg, p);
  read_field(j, "channel_multiplier", c.channel_multiplier, p);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"iterations", c.iterations},
              {"seed", c.seed},
              {"loss", {{"alpha", c.loss.alpha}, {"window", c.loss.window}, {"stride", c.loss.stride}}},
              {"ablation", to_string(c.ablation)},
              {"checkpoint_every", c.checkpoint_every},
              {"crops_per_image", c.crops_per_image},
              {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
              {"log_wall_time", c.log_wall_time}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("train", "expected an object");
  TrainConfig c;
  const std::string p = "train.";
  read_field(j, "learning_rate", c.learning_rate, p);
  read_field(j, "batch_size", c.batch_size, p);
  read_field(j, "iterations", c.iterations, p);
  read_field(j, "seed", c.seed, p);
  read_field(j, "checkpoint_every", c.checkpoint_every, p);
  read_field(j, "crops_per_image", c.crops_per_image, p);
  read_field(j, "log_wall_time", c.log_wall_time, p);
  if (j.contains("ablation")) {
    std::string name;
    read_field(j, "ablation", name, p);
    try {
      c.ablation = parse_ablation(name);
    } catch (const ContractError& e) {
      throw SchemaError(p + "ablation", e.what());
    }
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    if (!l.is_object()) throw SchemaError(p + "loss", "expected an object");
    read_field(l, "alpha", c.loss.alpha, p + "loss.");
    read_field(l, "window", c.loss.window, p + "loss.");
    read_field(l, "stride", c.loss.stride, p + "loss.");
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    if (!a.is_object()) throw SchemaError(p + "adam", "expected an object");
    read_field(a, "beta1", c.adam.beta1, p + "adam.");
    read_field(a, "beta2", c.adam.beta2, p + "adam.");
    read_field(a, "epsilon", c.adam.epsilon, p + "adam.");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::array<char, 8> kCheckpointMagic{'M', 'S', 'F', 'A', 'C', 'K', 'P', 'T'};
constexpr std::array<char, 8> kCheckpointEnd{'M', 'S', 'F', 'A', 'E', 'N', 'D', '.'};

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw LoadError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

const std::array<std::pair<const char*, ParameterStore<float> TrainState::*>, 3> kSections{{
    {"param/", &TrainState::params},
    {"adam_m/", &TrainState::adam_m},
    {"adam_v/", &TrainState::adam_v},
}};

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  json header{{"model", model_config_to_json(state.model)},
              {"train", train_config_to_json(state.train)},
              {"iteration", state.iteration},
              {"rng", rng_state(state.rng)},
              {"epoch_order", state.epoch_order},
              {"epoch_position", state.epoch_position}};
  json tags = json::object();
  for (const auto& [name, tag] : state.params.tags) tags[name] = to_string(tag);
  header["init_tags"] = tags;
  const std::string text = header.dump();

  std::string blob(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_le(blob, kCheckpointVersion, 4);
  put_le(blob, text.size(), 8);
  blob += text;

  TensorMap tensors;
  for (const auto& [prefix, member] : kSections) {
    for (const auto& [name, t] : (state.*member).tensors) tensors.emplace(prefix + name, t);
  }
  std::ostringstream archive;
  write_tensor_archive(archive, tensors);
  blob += archive.str();
  blob.append(kCheckpointEnd.begin(), kCheckpointEnd.end());

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ExportError("cannot open " + tmp.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    out.flush();
    if (!out) throw ExportError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ExportError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < kCheckpointMagic.size() || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), blob.begin())) {
    throw LoadError(path.string() + " is not a checkpoint");
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto version = static_cast<std::uint32_t>(get_le(blob, pos, 4));
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t header_len = get_le(blob, pos, 8);
  if (header_len > blob.size() - pos) throw LoadError("checkpoint truncated in header");
  if (blob.size() < pos + header_len + kCheckpointEnd.size() ||
      !std::equal(kCheckpointEnd.begin(), kCheckpointEnd.end(), blob.end() - kCheckpointEnd.size())) {
    throw LoadError("checkpoint truncated (end marker missing)");
  }

  TrainState s;
  json header;
  try {
    header = json::parse(blob.substr(pos, header_len));
    s.model = model_config_from_json(header.at("model"));
    s.train = train_config_from_json(header.at("train"));
    s.iteration = header.at("iteration").get<int>();
    restore_rng_state(s.rng, header.at("rng").get<std::string>());
    s.epoch_order = header.at("epoch_order").get<std::vector<std::uint32_t>>();
    s.epoch_position = header.at("epoch_position").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint header is invalid: ") + e.what());
  } catch (const SchemaError& e) {
    throw LoadError(std::string("checkpoint header is invalid: ") + e.what());
  }
  pos += header_len;

  std::istringstream archive(blob.substr(pos, blob.size() - pos - kCheckpointEnd.size()));
  TensorMap tensors = read_tensor_archive(archive);

  std::vector<ParamSpec> layout;
  try {
    layout = parameter_layout(s.model);
  } catch (const ContractError& e) {
    throw LoadError(std::string("checkpoint model config is invalid: ") + e.what());
  }
  std::string problems;
  for (const auto& [prefix, member] : kSections) {
    ParameterStore<float>& store = s.*member;
    for (const auto& spec : layout) {
      auto it = tensors.find(prefix + spec.name);
      if (it == tensors.end()) {
        problems += "\n  " + std::string(prefix) + spec.name + ": missing";
        continue;
      }
      if (it->second.shape() != spec.shape) {
        problems += "\n  " + std::string(prefix) + spec.name + ": expected " + shape_string(spec.shape) + ", found " +
                    shape_string(it->second.shape());
        continue;
      }
      store.tensors.emplace(spec.name, std::move(it->second));
      tensors.erase(it);
      InitTag tag = spec.init;
      if (header.contains("init_tags") && header["init_tags"].contains(spec.name)) {
        const std::string t = header["init_tags"][spec.name].get<std::string>();
        for (InitTag c : {InitTag::pretrained, InitTag::gaussian, InitTag::ones, InitTag::zeros}) {
          if (to_string(c) == t) tag = c;
        }
      }
      store.tags.emplace(spec.name, tag);
    }
  }
  for (const auto& [name, _] : tensors) problems += "\n  " + name + ": not part of the model";
  if (!problems.empty()) throw LoadError("checkpoint parameters do not match its model config:" + problems);
  return s;
}

}  // namespace msfa

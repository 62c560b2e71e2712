#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msfanet/crowd_data.hpp"
#include "msfanet/evaluation.hpp"
#include "msfanet/model.hpp"
#include "msfanet/training.hpp"

namespace msfa::cli {

/// Process exit codes.
enum ExitCode : int { kOk = 0, kValidationError = 1, kRuntimeError = 2 };

/// Environment variable overriding the manifest's output directory.
inline constexpr const char* kOutputRootEnv = "MSFANET_OUTPUT_ROOT";
inline constexpr int kManifestVersion = 1;

/// One or more problems found while validating user input.
class ValidationFailed : public std::runtime_error {
 public:
  explicit ValidationFailed(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct EvalSettings {
  bool regions = false;
  RegionConfig region_config;
  bool apply_roi = true;
  bool heatmaps = false;
  int kfold = 0;  // 0 = plain evaluation
};

struct InitSettings {
  InitScheme scheme = InitScheme::gaussian;
  double std = 0.01;
  std::optional<std::filesystem::path> pretrained;
};

/// Everything that affects an experiment. Relative paths in the file are
/// resolved against the manifest's directory.
struct ExperimentManifest {
  int version = kManifestVersion;
  std::filesystem::path data_root;
  std::filesystem::path output_dir;
  ModelConfig model;
  TrainConfig train;
  std::optional<AugmentationConfig> augmentation = AugmentationConfig{};  // nullopt disables augmentation
  double sigma = kDefaultSigma;
  InitSettings init;
  EvalSettings eval;
};

/// Parses a manifest document. Collects every problem (unknown version,
/// bad types, invalid values, missing paths) before throwing ValidationFailed.
ExperimentManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir,
                                  bool check_paths = true);
ExperimentManifest load_manifest(const std::filesystem::path& path, bool check_paths = true);
/// Fully resolved manifest with every default spelled out and absolute paths.
nlohmann::json manifest_to_json(const ExperimentManifest& m);

/// Flag > environment > manifest.
std::filesystem::path resolve_output_root(const std::optional<std::string>& flag, const ExperimentManifest* manifest);

/// Sorted list of `*.ann.json` sidecars in `dir` (non-recursive).
std::vector<std::filesystem::path> list_sidecars(const std::filesystem::path& dir);

/// Loads every sample of a dataset directory in sidecar order.
std::vector<CrowdSample> load_dataset(const std::filesystem::path& dir, std::ostream& log, int* clamped_total = nullptr);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msfa::cli

#include "msfanet/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "msfanet/errors.hpp"

namespace msfa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string s = "validation failed:";
  for (const auto& p : problems) s += "\n  - " + p;
  return s;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes `content` unless the file already holds exactly those bytes.
/// Returns true when the file was (re)written.
bool write_if_changed(const fs::path& path, const std::string& content) {
  std::error_code ec;
  if (fs::exists(path, ec)) {
    std::ifstream in(path, std::ios::binary);
    const std::string old{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (old == content) return false;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw ExportError("cannot write " + path.string());
  return true;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ExportError("cannot create directory " + dir.string() + ": " + ec.message());
}

fs::path absolute_from(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

/// Reports keys of `doc` that do not appear in `reference`, recursing into objects.
void unknown_keys(const json& doc, const json& reference, const std::string& prefix, std::vector<std::string>& problems) {
  if (!doc.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    if (!reference.contains(key)) {
      problems.push_back("unknown field '" + prefix + key + "'");
    } else {
      unknown_keys(value, reference[key], prefix + key + ".", problems);
    }
  }
}

std::string init_scheme_name(InitScheme s) { return s == InitScheme::he_normal ? "he_normal" : "gaussian"; }

}  // namespace

ValidationFailed::ValidationFailed(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

// ---------------------------------------------------------------------------
// Manifest

ExperimentManifest parse_manifest(const json& doc, const fs::path& base_dir, bool check_paths) {
  std::vector<std::string> problems;
  ExperimentManifest m;
  if (!doc.is_object()) throw ValidationFailed({"manifest must be a JSON object"});

  static const std::set<std::string> kKnown{"version", "paths", "model", "train", "augmentation",
                                            "sigma",   "init",  "eval"};
  for (const auto& [key, _] : doc.items()) {
    if (!kKnown.count(key)) problems.push_back("unknown field '" + key + "'");
  }

  auto guarded = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const SchemaError& e) {
      problems.push_back(e.what());
    } catch (const ContractError& e) {
      problems.push_back(e.what());
    } catch (const json::exception& e) {
      problems.push_back(e.what());
    }
  };

  if (!doc.contains("version")) {
    problems.push_back("missing field 'version'");
  } else {
    guarded([&] {
      m.version = doc.at("version").get<int>();
      if (m.version != kManifestVersion) {
        problems.push_back("unsupported manifest version " + std::to_string(m.version) + " (expected " +
                           std::to_string(kManifestVersion) + ")");
      }
    });
  }

  // Paths.
  if (!doc.contains("paths") || !doc["paths"].is_object()) {
    problems.push_back("missing object 'paths'");
  } else {
    const json& p = doc["paths"];
    if (!p.contains("data_root") || !p["data_root"].is_string()) {
      problems.push_back("paths.data_root: missing or not a string");
    } else {
      m.data_root = absolute_from(base_dir, p["data_root"].get<std::string>());
      if (check_paths && !fs::is_directory(m.data_root)) {
        problems.push_back("paths.data_root: directory does not exist: " + m.data_root.string());
      }
    }
    if (p.contains("output_dir")) {
      if (!p["output_dir"].is_string()) {
        problems.push_back("paths.output_dir: not a string");
      } else {
        m.output_dir = absolute_from(base_dir, p["output_dir"].get<std::string>());
      }
    }
  }

  const json section_keys{
      {"paths", {{"data_root", 0}, {"output_dir", 0}}},
      {"augmentation",
       {{"enabled", 0}, {"profile", 0}, {"crop_size", 0}, {"scales", 0}, {"mirror", 0}, {"longest_side_cap", 0}}},
      {"init", {{"scheme", 0}, {"std", 0}, {"pretrained", 0}}},
      {"eval", {{"regions", 0}, {"region_bounds", 0}, {"apply_roi", 0}, {"heatmaps", 0}, {"kfold", 0}}}};
  for (const auto& [section, keys] : section_keys.items()) {
    if (doc.contains(section)) unknown_keys(doc[section], keys, section + ".", problems);
  }
  if (doc.contains("model")) unknown_keys(doc["model"], model_config_to_json(ModelConfig{}), "model.", problems);
  if (doc.contains("train")) unknown_keys(doc["train"], train_config_to_json(TrainConfig{}), "train.", problems);
  if (doc.contains("model")) guarded([&] { m.model = model_config_from_json(doc["model"]); });
  guarded([&] { m.model.validate(); });
  if (doc.contains("train")) guarded([&] { m.train = train_config_from_json(doc["train"]); });
  guarded([&] { m.train.validate(); });

  if (doc.contains("sigma")) {
    guarded([&] {
      m.sigma = doc["sigma"].get<double>();
      if (!(m.sigma > 0.0)) problems.push_back("sigma: must be > 0");
    });
  }

  if (doc.contains("augmentation")) {
    const json& a = doc["augmentation"];
    guarded([&] {
      if (a.is_null() || (a.contains("enabled") && !a["enabled"].get<bool>())) {
        m.augmentation.reset();
        return;
      }
      if (!a.is_object()) throw SchemaError("augmentation", "expected an object or null");
      AugmentationConfig c;
      if (a.contains("profile")) {
        const std::string prof = a["profile"].get<std::string>();
        if (prof == "large") {
          c = AugmentationConfig::large_image_profile();
        } else if (prof != "default") {
          throw SchemaError("augmentation.profile", "expected 'default' or 'large', got '" + prof + "'");
        }
      }
      if (a.contains("crop_size")) c.crop_size = a["crop_size"].get<int>();
      if (a.contains("scales")) c.scales = a["scales"].get<std::vector<double>>();
      if (a.contains("mirror")) c.mirror = a["mirror"].get<bool>();
      if (a.contains("longest_side_cap")) {
        if (a["longest_side_cap"].is_null()) {
          c.longest_side_cap.reset();
        } else {
          c.longest_side_cap = a["longest_side_cap"].get<int>();
        }
      }
      c.validate();
      m.augmentation = c;
    });
  }

  if (doc.contains("init")) {
    const json& i = doc["init"];
    guarded([&] {
      if (!i.is_object()) throw SchemaError("init", "expected an object");
      if (i.contains("scheme")) {
        const std::string s = i["scheme"].get<std::string>();
        if (s == "gaussian") {
          m.init.scheme = InitScheme::gaussian;
        } else if (s == "he_normal") {
          m.init.scheme = InitScheme::he_normal;
        } else {
          throw SchemaError("init.scheme", "expected 'gaussian' or 'he_normal', got '" + s + "'");
        }
      }
      if (i.contains("std")) m.init.std = i["std"].get<double>();
      if (!(m.init.std > 0.0)) throw SchemaError("init.std", "must be > 0");
      if (i.contains("pretrained") && !i["pretrained"].is_null()) {
        m.init.pretrained = absolute_from(base_dir, i["pretrained"].get<std::string>());
        if (check_paths && !fs::is_regular_file(*m.init.pretrained)) {
          problems.push_back("init.pretrained: file does not exist: " + m.init.pretrained->string());
        }
      }
    });
  }

  if (doc.contains("eval")) {
    const json& e = doc["eval"];
    guarded([&] {
      if (!e.is_object()) throw SchemaError("eval", "expected an object");
      if (e.contains("regions")) m.eval.regions = e["regions"].get<bool>();
      if (e.contains("apply_roi")) m.eval.apply_roi = e["apply_roi"].get<bool>();
      if (e.contains("heatmaps")) m.eval.heatmaps = e["heatmaps"].get<bool>();
      if (e.contains("kfold")) m.eval.kfold = e["kfold"].get<int>();
      if (m.eval.kfold != 0 && m.eval.kfold < 2) throw SchemaError("eval.kfold", "must be 0 or >= 2");
      if (e.contains("region_bounds")) {
        const auto b = e["region_bounds"].get<std::array<int, 3>>();
        m.eval.region_config = {b[0], b[1], b[2]};
        try {
          m.eval.region_config.validate();
        } catch (const ContractError& err) {
          throw SchemaError("eval.region_bounds", err.what());
        }
      }
    });
  }

  if (!problems.empty()) throw ValidationFailed(std::move(problems));
  return m;
}

ExperimentManifest load_manifest(const fs::path& path, bool check_paths) {
  if (!fs::is_regular_file(path)) throw ValidationFailed({"manifest not found: " + path.string()});
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationFailed({"manifest " + path.string() + " is not valid JSON: " + e.what()});
  }
  return parse_manifest(doc, fs::absolute(path).parent_path(), check_paths);
}

json manifest_to_json(const ExperimentManifest& m) {
  json aug = nullptr;
  if (m.augmentation) {
    aug = json{{"enabled", true},
               {"crop_size", m.augmentation->crop_size},
               {"scales", m.augmentation->scales},
               {"mirror", m.augmentation->mirror},
               {"longest_side_cap", m.augmentation->longest_side_cap ? json(*m.augmentation->longest_side_cap) : json()}};
  }
  return json{
      {"version", m.version},
      {"paths", {{"data_root", m.data_root.string()}, {"output_dir", m.output_dir.string()}}},
      {"model", model_config_to_json(m.model)},
      {"train", train_config_to_json(m.train)},
      {"augmentation", aug},
      {"sigma", m.sigma},
      {"init",
       {{"scheme", init_scheme_name(m.init.scheme)},
        {"std", m.init.std},
        {"pretrained", m.init.pretrained ? json(m.init.pretrained->string()) : json()}}},
      {"eval",
       {{"regions", m.eval.regions},
        {"region_bounds", {m.eval.region_config.far_end, m.eval.region_config.mid_end, m.eval.region_config.denominator}},
        {"apply_roi", m.eval.apply_roi},
        {"heatmaps", m.eval.heatmaps},
        {"kfold", m.eval.kfold}}},
  };
}

fs::path resolve_output_root(const std::optional<std::string>& flag, const ExperimentManifest* manifest) {
  if (flag && !flag->empty()) return fs::absolute(*flag).lexically_normal();
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return fs::absolute(env).lexically_normal();
  if (manifest && !manifest->output_dir.empty()) return manifest->output_dir;
  return {};
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<fs::path> list_sidecars(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.ends_with(kSidecarSuffix)) out.push_back(entry.path());
  }
  if (ec) throw LoadError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<CrowdSample> load_dataset(const fs::path& dir, std::ostream& log, int* clamped_total) {
  std::vector<CrowdSample> samples;
  int clamped = 0;
  for (const auto& sc : list_sidecars(dir)) {
    LoadedSample ls = load_annotations(sc);
    if (ls.clamped_points > 0) {
      log << "warning: " << sc.filename().string() << ": " << ls.clamped_points << " point(s) clamped to the image\n";
    }
    clamped += ls.clamped_points;
    samples.push_back(std::move(ls.sample));
  }
  if (clamped_total) *clamped_total = clamped;
  return samples;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(digest[i]);
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct GlobalOptions {
  std::optional<std::string> manifest;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  bool dry_run = false;
  std::optional<std::string> output_root;
};

std::optional<ExperimentManifest> maybe_manifest(const GlobalOptions& g) {
  if (!g.manifest) return std::nullopt;
  return load_manifest(*g.manifest);
}

/// Runs `fn(i)` for i in [0, n) on `workers` threads; the first exception wins.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int t = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (t == 1) {
    loop();
  } else {
    std::vector<std::jthread> pool;
    for (int k = 0; k < t; ++k) pool.emplace_back(loop);
  }
  if (failure) std::rethrow_exception(failure);
}

// --- prepare ---------------------------------------------------------------

struct PrepareArgs {
  std::optional<std::string> data_root;
  std::optional<std::string> out;
  std::optional<double> sigma;
};

constexpr int kPrepareFormat = 1;

int cmd_prepare(const GlobalOptions& g, const PrepareArgs& a, std::ostream& out, std::ostream& err) {
  const auto manifest = maybe_manifest(g);
  std::vector<std::string> problems;
  fs::path data_root;
  if (a.data_root) {
    data_root = fs::absolute(*a.data_root).lexically_normal();
  } else if (manifest) {
    data_root = manifest->data_root;
  } else {
    problems.push_back("prepare needs --data-root or a manifest");
  }
  if (!data_root.empty() && !fs::is_directory(data_root)) {
    problems.push_back("data root does not exist: " + data_root.string());
  }
  const double sigma = a.sigma ? *a.sigma : (manifest ? manifest->sigma : kDefaultSigma);
  if (!(sigma > 0.0)) problems.push_back("--sigma must be > 0");
  if (!problems.empty()) throw ValidationFailed(problems);

  fs::path out_dir;
  if (a.out) {
    out_dir = fs::absolute(*a.out).lexically_normal();
  } else if (fs::path root = resolve_output_root(g.output_root, manifest ? &*manifest : nullptr); !root.empty()) {
    out_dir = root / "gt";
  } else {
    out_dir = data_root / "gt";
  }
  ensure_dir(out_dir);

  const auto sidecars = list_sidecars(data_root);
  std::map<std::string, std::string> previous_hash;
  const fs::path index_path = out_dir / "index.json";
  if (fs::is_regular_file(index_path)) {
    try {
      const json old = json::parse(read_file(index_path));
      for (const auto& e : old.at("samples")) previous_hash[e.at("id").get<std::string>()] = e.at("hash").get<std::string>();
    } catch (const std::exception&) {
      previous_hash.clear();  // unreadable index: regenerate everything
    }
  }

  struct Outcome {
    json entry;
    bool written = false;
    std::string error;
  };
  std::vector<Outcome> outcomes(sidecars.size());
  std::ostringstream sigma_repr;
  sigma_repr << std::setprecision(17) << sigma;

  parallel_for(sidecars.size(), g.workers, [&](std::size_t i) {
    Outcome& o = outcomes[i];
    const fs::path& sc_path = sidecars[i];
    try {
      const std::string sc_text = read_file(sc_path);
      const AnnotationSidecar sc = parse_sidecar(sc_text);
      const fs::path image_path = sc_path.parent_path() / sc.image;
      const std::string image_bytes = read_file(image_path);
      const std::string id = sidecar_id(sc_path);
      const std::string hash = sha256_hex("msfanet-gt-v" + std::to_string(kPrepareFormat) + '\0' + sigma_repr.str() +
                                          '\0' + sc_text + '\0' + image_bytes);
      const fs::path base = out_dir / (id + ".gt");
      fs::path bin = base, hdr = base;
      bin += ".bin";
      hdr += ".json";

      const auto [h, w] = image_size(image_path);
      LoadedSample ls = make_sample(sc, Tensor<float>({3, h, w}), id);
      const DensityMap target = make_target(ls.sample.annotations, sigma, 8);

      auto it = previous_hash.find(id);
      if (it == previous_hash.end() || it->second != hash || !fs::exists(bin) || !fs::exists(hdr)) {
        write_density(target, base);
        o.written = true;
      }
      o.entry = json{{"id", id},
                     {"sidecar", sc_path.filename().string()},
                     {"image", sc.image},
                     {"height", h},
                     {"width", w},
                     {"count", ls.sample.annotations.count()},
                     {"clamped_points", ls.clamped_points},
                     {"gt", base.filename().string()},
                     {"gt_height", target.height()},
                     {"gt_width", target.width()},
                     {"gt_sum", target.sum()},
                     {"hash", hash}};
    } catch (const std::exception& e) {
      o.error = e.what();
    }
  });

  json samples = json::array();
  int written = 0, failed = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!outcomes[i].error.empty()) {
      err << "error: " << sidecars[i].filename().string() << ": " << outcomes[i].error << '\n';
      ++failed;
      continue;
    }
    written += outcomes[i].written ? 1 : 0;
    samples.push_back(outcomes[i].entry);
  }
  const json index{{"version", kPrepareFormat}, {"sigma", sigma}, {"factor", 8}, {"samples", samples}};
  const bool index_written = write_if_changed(index_path, index.dump(2) + "\n");
  const int ok = static_cast<int>(samples.size());
  out << "prepare: " << sidecars.size() << " sidecar(s), " << written << " written, " << (ok - written)
      << " up to date, " << failed << " failed" << (index_written ? ", index updated" : ", index unchanged") << '\n';
  return failed > 0 ? kValidationError : kOk;
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int samples = 10;
  std::string profile = "uniform";
  std::string heads = "100";
  std::string size = "224x224";
};

int cmd_synth(const GlobalOptions& g, const SynthArgs& a, std::ostream& out) {
  std::vector<std::string> problems;
  if (a.samples < 0) problems.push_back("--samples must be >= 0");
  DensityProfile profile = DensityProfile::uniform;
  try {
    profile = parse_profile(a.profile);
  } catch (const ContractError& e) {
    problems.push_back(e.what());
  }
  int lo = 0, hi = 0, height = 0, width = 0;
  {
    const auto colon = a.heads.find(':');
    try {
      lo = std::stoi(a.heads.substr(0, colon));
      hi = colon == std::string::npos ? lo : std::stoi(a.heads.substr(colon + 1));
      if (lo < 0 || hi < lo) problems.push_back("--heads must be N or LO:HI with 0 <= LO <= HI");
    } catch (const std::exception&) {
      problems.push_back("--heads must be N or LO:HI, got '" + a.heads + "'");
    }
    const auto x = a.size.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument("size");
      height = std::stoi(a.size.substr(0, x));
      width = std::stoi(a.size.substr(x + 1));
      if (height < 1 || width < 1) problems.push_back("--size must be positive");
    } catch (const std::exception&) {
      problems.push_back("--size must be HxW, got '" + a.size + "'");
    }
  }
  if (!problems.empty()) throw ValidationFailed(problems);

  const std::uint64_t seed = g.seed.value_or(0);
  const fs::path dir = fs::absolute(a.out).lexically_normal();
  ensure_dir(dir);
  std::vector<json> entries(static_cast<std::size_t>(a.samples));

  parallel_for(static_cast<std::size_t>(a.samples), g.workers, [&](std::size_t i) {
    Rng count_rng(derive_seed(seed, 1'000'000 + i));
    const int count = uniform_int(count_rng, lo, hi);
    const std::uint64_t scene_seed = derive_seed(seed, i);
    CrowdSample s = synthesize_scene(scene_seed, count, height, width, profile);
    std::ostringstream id;
    id << "synth_" << std::setw(4) << std::setfill('0') << i;
    const std::string image_name = id.str() + ".png";
    save_image(s.image, dir / image_name);
    json pts = json::array();
    std::array<int, 3> bands{};
    for (const Point& p : s.annotations.points()) {
      pts.push_back({p.x, p.y});
      ++bands[static_cast<std::size_t>(std::min(2, static_cast<int>(p.y * 3.0 / height)))];
    }
    const json sidecar{{"image", image_name}, {"points", pts}};
    std::ofstream(dir / (id.str() + kSidecarSuffix)) << sidecar.dump() << '\n';
    entries[i] = json{{"id", id.str()},
                      {"seed", scene_seed},
                      {"count", count},
                      {"band_counts", {{"far", bands[0]}, {"mid", bands[1]}, {"near", bands[2]}}}};
  });

  const json index{{"seed", seed},          {"profile", to_string(profile)}, {"height", height},
                   {"width", width},        {"heads", a.heads},              {"samples", entries}};
  std::ofstream(dir / "synth_index.json") << index.dump(2) << '\n';
  out << "synth: wrote " << a.samples << " sample(s) to " << dir.string() << '\n';
  return kOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> ablation;
  std::optional<int> iterations;
  std::optional<std::string> resume;
};

struct ResolvedRun {
  ExperimentManifest manifest;
  fs::path output_root;
};

ResolvedRun resolve_training(const GlobalOptions& g, const TrainArgs& a) {
  if (!g.manifest) throw ValidationFailed({"train needs --manifest"});
  std::vector<std::string> problems;
  ExperimentManifest m;
  try {
    m = load_manifest(*g.manifest);
  } catch (const ValidationFailed& e) {
    problems = e.problems();
  }
  if (a.ablation) {
    try {
      m.train.ablation = parse_ablation(*a.ablation);
    } catch (const ContractError& e) {
      problems.push_back(std::string("--ablation: ") + e.what());
    }
  }
  if (a.iterations) {
    if (*a.iterations < 0) problems.push_back("--iterations must be >= 0");
    m.train.iterations = *a.iterations;
  }
  if (!problems.empty()) throw ValidationFailed(problems);
  if (g.seed) m.train.seed = *g.seed;
  m.model = apply_ablation(m.model, m.train.ablation);
  m.model.validate();
  fs::path root = resolve_output_root(g.output_root, &m);
  if (root.empty()) throw ValidationFailed({"no output directory: set paths.output_dir, --output-root or " + std::string(kOutputRootEnv)});
  m.output_dir = root;
  return {m, root};
}

InitOptions init_options(const ExperimentManifest& m) {
  InitOptions o;
  o.scheme = m.init.scheme;
  o.std = m.init.std;
  o.seed = m.train.seed;
  o.pretrained = m.init.pretrained;
  return o;
}

std::optional<AugmentationConfig> augmentation_for(const ExperimentManifest& m) {
  auto aug = m.augmentation;
  if (aug) aug->rng_seed = m.train.seed;
  return aug;
}

std::vector<std::string> config_differences(const json& a, const json& b) {
  std::vector<std::string> diffs;
  for (const auto& [key, value] : a.items()) {
    if (!b.contains(key) || b[key] != value) {
      diffs.push_back(key + ": " + value.dump() + " vs " + (b.contains(key) ? b[key].dump() : std::string("missing")));
    }
  }
  return diffs;
}

int cmd_train(const GlobalOptions& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto [m, root] = resolve_training(g, a);
  if (g.dry_run) {
    const json report{{"manifest", manifest_to_json(m)},
                      {"parameter_count", parameter_count(m.model)},
                      {"objective", to_string(objective_for(m.train.ablation))}};
    out << report.dump(2) << '\n';
    return kOk;
  }
  if (g.workers > 1) err << "note: training runs single-worker; --workers applies to prepare, synth and eval\n";

  std::vector<CrowdSample> samples = load_dataset(m.data_root, err);
  if (samples.empty()) throw ValidationFailed({"no '*" + std::string(kSidecarSuffix) + "' samples in " + m.data_root.string()});
  InMemorySource source(std::move(samples), augmentation_for(m), m.sigma);

  TrainState state;
  if (a.resume) {
    state = load_checkpoint(*a.resume);
    const auto diffs = config_differences(model_config_to_json(m.model), model_config_to_json(state.model));
    if (!diffs.empty()) {
      std::vector<std::string> problems{"checkpoint " + *a.resume + " was trained with a different model config:"};
      problems.insert(problems.end(), diffs.begin(), diffs.end());
      throw ValidationFailed(problems);
    }
    state.train.iterations = m.train.iterations;
  } else {
    state = make_train_state(m.model, m.train, init_options(m));
  }

  ensure_dir(root);
  ensure_dir(root / "checkpoints");
  std::ofstream(root / "manifest.resolved.json") << manifest_to_json(m).dump(2) << '\n';
  std::ofstream log(root / "loss_log.ndjson", a.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw ExportError("cannot open loss log in " + root.string());

  TrainHooks hooks;
  hooks.checkpoint_dir = root / "checkpoints";
  hooks.on_record = [&](const LossRecord& r) { log << to_json_line(r) << '\n'; };
  train(state, source, hooks);
  save_checkpoint(state, root / "final.msfa");
  out << "train: " << to_string(state.train.ablation) << ", " << state.iteration << " iteration(s), checkpoint "
      << (root / "final.msfa").string() << '\n';
  return kOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> checkpoint;
  std::optional<std::string> data;
  bool regions = false;
  bool heatmaps = false;
  bool no_roi = false;
  std::optional<std::string> report;
  int kfold = 0;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << '\n';
  if (!f) throw ExportError("cannot write " + path.string());
}

int cmd_eval_kfold(const GlobalOptions& g, const EvalArgs& a, std::ostream& out, std::ostream& err) {
  if (!g.manifest) throw ValidationFailed({"--kfold needs --manifest (the training configuration)"});
  auto [m, root] = resolve_training(g, TrainArgs{});
  const int k = a.kfold;
  const fs::path data = a.data ? fs::absolute(*a.data) : m.data_root;
  std::vector<CrowdSample> samples = load_dataset(data, err);
  if (static_cast<int>(samples.size()) < k) {
    throw ValidationFailed({"--kfold " + std::to_string(k) + " needs at least " + std::to_string(k) + " samples, found " +
                            std::to_string(samples.size())});
  }
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ids.push_back(samples[i].id);
    by_id[samples[i].id] = i;
  }
  const auto folds = kfold_splits(ids, k, m.train.seed);
  EvalOptions eo;
  eo.regions = a.regions || m.eval.regions;
  eo.region_config = m.eval.region_config;
  eo.apply_roi = !a.no_roi && m.eval.apply_roi;
  eo.sigma = m.sigma;
  eo.workers = g.workers;

  json fold_reports = json::array();
  double mae_sum = 0.0, mse_sum = 0.0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<CrowdSample> train_set, test_set;
    for (const auto& id : folds[f].train_ids) train_set.push_back(samples[by_id[id]]);
    for (const auto& id : folds[f].test_ids) test_set.push_back(samples[by_id[id]]);
    InMemorySource source(std::move(train_set), augmentation_for(m), m.sigma);
    TrainState state = make_train_state(m.model, m.train, init_options(m));
    train(state, source);
    const EvalReport r = evaluate(test_set, m.model, state.params, eo);
    mae_sum += r.mae;
    mse_sum += r.mse;
    json jr = to_json(r);
    jr["fold"] = f;
    jr["train_ids"] = folds[f].train_ids;
    jr["test_ids"] = folds[f].test_ids;
    fold_reports.push_back(jr);
    out << "fold " << f + 1 << "/" << k << ": MAE " << r.mae << ", MSE " << r.mse << '\n';
  }
  const json report{{"k", k},
                    {"seed", m.train.seed},
                    {"mean_mae", mae_sum / k},
                    {"mean_mse", mse_sum / k},
                    {"folds", fold_reports}};
  ensure_dir(root);
  const fs::path path = a.report ? fs::path(*a.report) : root / "kfold_report.json";
  write_json(path, report);
  out << "kfold: mean MAE " << mae_sum / k << ", mean MSE " << mse_sum / k << " -> " << path.string() << '\n';
  return kOk;
}

int cmd_eval(const GlobalOptions& g, const EvalArgs& a, std::ostream& out, std::ostream& err) {
  if (a.kfold != 0) {
    if (a.kfold < 2) throw ValidationFailed({"--kfold must be >= 2"});
    return cmd_eval_kfold(g, a, out, err);
  }
  const auto manifest = maybe_manifest(g);
  std::vector<std::string> problems;
  if (!a.checkpoint) problems.push_back("eval needs --checkpoint");
  else if (!fs::is_regular_file(*a.checkpoint)) problems.push_back("checkpoint not found: " + *a.checkpoint);
  fs::path data;
  if (a.data) data = fs::absolute(*a.data).lexically_normal();
  else if (manifest) data = manifest->data_root;
  else problems.push_back("eval needs --data or a manifest");
  if (!data.empty() && !fs::is_directory(data)) problems.push_back("data directory does not exist: " + data.string());
  if (!problems.empty()) throw ValidationFailed(problems);

  const TrainState state = load_checkpoint(*a.checkpoint);
  if (manifest) {
    const ModelConfig expected = apply_ablation(manifest->model, state.train.ablation);
    const auto diffs = config_differences(model_config_to_json(expected), model_config_to_json(state.model));
    if (!diffs.empty()) {
      std::vector<std::string> msg{"checkpoint model config does not match the manifest:"};
      msg.insert(msg.end(), diffs.begin(), diffs.end());
      throw ValidationFailed(msg);
    }
  }

  EvalOptions eo;
  eo.regions = a.regions || (manifest && manifest->eval.regions);
  if (manifest) eo.region_config = manifest->eval.region_config;
  eo.apply_roi = !a.no_roi && (!manifest || manifest->eval.apply_roi);
  eo.sigma = manifest ? manifest->sigma : kDefaultSigma;
  eo.workers = g.workers;

  std::vector<CrowdSample> samples = load_dataset(data, err);
  if (samples.empty()) throw ValidationFailed({"no '*" + std::string(kSidecarSuffix) + "' samples in " + data.string()});
  const EvalReport report = evaluate(samples, state.model, state.params, eo);

  fs::path root = resolve_output_root(g.output_root, manifest ? &*manifest : nullptr);
  if (root.empty()) root = fs::absolute(*a.checkpoint).parent_path();
  ensure_dir(root);
  const fs::path report_path = a.report ? fs::absolute(*a.report) : root / "eval_report.json";
  write_json(report_path, to_json(report));

  if (a.heatmaps || (manifest && manifest->eval.heatmaps)) {
    const fs::path dir = root / "heatmaps";
    ensure_dir(dir);
    parallel_for(samples.size(), g.workers, [&](std::size_t i) {
      const auto [pred, gt] = predict_sample(samples[i], state.model, state.params, eo);
      export_heatmap(pred, dir / (samples[i].id + "_density.png"));
      write_density(pred, dir / (samples[i].id + "_density"));
    });
  }

  out << "eval: " << report.per_image.size() << " image(s), MAE " << report.mae << ", MSE " << report.mse;
  if (report.region_mae) {
    out << ", region MAE far " << (*report.region_mae)[0] << " mid " << (*report.region_mae)[1] << " near "
        << (*report.region_mae)[2];
  }
  out << " -> " << report_path.string() << '\n';
  return kOk;
}

// --- visualize -------------------------------------------------------------

struct VisualizeArgs {
  std::string checkpoint;
  std::string input;
  std::string out;
  std::vector<std::string> layers;
  int max_channels = 8;
};

int cmd_visualize(const VisualizeArgs& a, std::ostream& out) {
  std::vector<std::string> problems;
  if (!fs::is_regular_file(a.checkpoint)) problems.push_back("checkpoint not found: " + a.checkpoint);
  if (!fs::is_regular_file(a.input)) problems.push_back("input not found: " + a.input);
  if (a.max_channels < 1) problems.push_back("--max-channels must be >= 1");
  if (!problems.empty()) throw ValidationFailed(problems);

  const TrainState state = load_checkpoint(a.checkpoint);
  CrowdSample sample;
  if (a.input.ends_with(".json")) {
    sample = load_annotations(a.input).sample;
  } else {
    sample.image = load_image(a.input);
    sample.id = fs::path(a.input).stem().string();
  }
  std::vector<std::string> wanted = a.layers;
  if (wanted.empty()) {
    wanted = {"block1.out", "block2.out", "block3.out", "block4.out", "block5.out"};
    if (state.model.enable_skipagg) wanted.push_back("stem.out");
  }
  std::map<std::string, Tensor<float>> captured;
  std::vector<std::string> seen;
  FeatureHook<float> hook = [&](const std::string& layer, const Tensor<float>& f) {
    seen.push_back(layer);
    if (std::find(wanted.begin(), wanted.end(), layer) != wanted.end()) captured[layer] = f;
  };
  Tensor<float> d = forward<float>(sample.image, state.model, state.params, nullptr, hook);
  std::vector<std::string> missing;
  for (const auto& w : wanted) {
    if (!captured.count(w)) missing.push_back(w);
  }
  if (!missing.empty()) {
    std::string avail;
    for (const auto& s : seen) avail += (avail.empty() ? "" : ", ") + s;
    std::vector<std::string> msg;
    for (const auto& w : missing) msg.push_back("unknown layer '" + w + "'");
    msg.push_back("available layers: " + avail);
    throw ValidationFailed(msg);
  }

  const fs::path dir = fs::absolute(a.out);
  ensure_dir(dir);
  DensityMap density(d.height(), d.width(), 8);
  density.values.values = d.vec();
  export_heatmap(density, dir / (sample.id + "_density.png"));
  write_density(density, dir / (sample.id + "_density"));
  std::size_t files = 1;
  for (const auto& [layer, f] : captured) files += export_feature_channels(f, layer, dir, a.max_channels).size();
  out << "visualize: count " << density.sum() << ", " << files << " heatmap(s) in " << dir.string() << '\n';
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dispatcher

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Crowd counting with multi-scale feature aggregation"};
  app.name("msfanet");
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--manifest", g.manifest, "Experiment manifest (JSON)");
  app.add_option("--seed", g.seed, "Seed overriding the manifest");
  app.add_option("--workers", g.workers, "Worker threads for prepare, synth and eval")->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", g.dry_run, "Resolve and print the configuration without running");
  app.add_option("--output-root", g.output_root, std::string("Output directory (overrides ") + kOutputRootEnv + " and the manifest)");

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "Generate 1/8-scale ground-truth density maps");
  prepare->add_option("--data-root", pa.data_root, "Directory of *.ann.json sidecars");
  prepare->add_option("--out", pa.out, "Output directory for density maps and index.json");
  prepare->add_option("--sigma", pa.sigma, "Gaussian spread in pixels");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--samples", sa.samples, "Number of scenes");
  synth->add_option("--profile", sa.profile, "uniform or perspective");
  synth->add_option("--heads", sa.heads, "Heads per scene: N or LO:HI");
  synth->add_option("--size", sa.size, "Scene size HxW");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train one model variant");
  train_cmd->add_option("--ablation", ta.ablation, "baseline, sh, sh_sk or sh_sk_ploss");
  train_cmd->add_option("--iterations", ta.iterations, "Override train.iterations");
  train_cmd->add_option("--resume", ta.resume, "Checkpoint to continue from");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
  eval->add_option("--data", ea.data, "Dataset directory (defaults to the manifest's data root)");
  eval->add_flag("--regions", ea.regions, "Add far/mid/near band errors");
  eval->add_flag("--heatmaps", ea.heatmaps, "Export predicted density heatmaps");
  eval->add_flag("--no-roi", ea.no_roi, "Ignore ROI masks");
  eval->add_option("--report", ea.report, "Report path");
  eval->add_option("--kfold", ea.kfold, "Cross-validate with k folds (trains from scratch)");

  VisualizeArgs va;
  auto* vis = app.add_subcommand("visualize", "Export density and feature heatmaps for one image");
  vis->add_option("--checkpoint", va.checkpoint, "Checkpoint file")->required();
  vis->add_option("--input", va.input, "Image or *.ann.json sidecar")->required();
  vis->add_option("--out", va.out, "Output directory")->required();
  vis->add_option("--layers", va.layers, "Layer names (block<k>.out, backbone.conv<k>_<j>, stem.out, regressor.conv<k>, density)")
      ->delimiter(',');
  vis->add_option("--max-channels", va.max_channels, "Channels exported per layer");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(g, pa, out, err);
    if (synth->parsed()) return cmd_synth(g, sa, out);
    if (train_cmd->parsed()) return cmd_train(g, ta, out, err);
    if (eval->parsed()) return cmd_eval(g, ea, out, err);
    if (vis->parsed()) return cmd_visualize(va, out);
  } catch (const ValidationFailed& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const SchemaError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kValidationError;
}

}  // namespace msfa::cli

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "scedit/diffusion.hpp"
#include "scedit/training.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"

namespace scedit {

enum class TunerMode { kNone, kSc, kCsc };

struct DiffusionConfig {
  int num_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  BetaSchedule schedule = BetaSchedule::kScaledLinear;
  int sample_steps = 50;
  double guide_scale = 1.0;
  double eta = 0.0;
  std::uint64_t seed = 0;

  NoiseSchedule make() const;
  DdimOptions ddim() const;
};

struct TunerSection {
  TunerMode mode = TunerMode::kNone;
  TunerConfig tuner;
  std::vector<std::string> conditions;
  std::vector<double> alphas;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::string dir;  // import from here when set, otherwise generate
  int count = 512;
  int val_count = 128;
  int size = 32;
  std::uint64_t seed = 0;
};

struct IoConfig {
  std::string out_dir;
  std::string base_checkpoint;
  std::string tuner_checkpoint;
  int log_every = 50;
  int checkpoint_every = 0;
};

struct RunConfig {
  UNetConfig model;
  DiffusionConfig diffusion;
  TunerSection tuner;
  TrainConfig train;
  DataConfig data;
  IoConfig io;
};

// Strict parse: unknown keys and wrong types raise ConfigError naming the key
// path (e.g. "train.lr"). Missing keys take their defaults.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

// Full document with every default filled in.
nlohmann::ordered_json to_json(const RunConfig& cfg);

// Applies SCEDIT_SEED (when set) to the train and sampling seeds.
void apply_seed_override(RunConfig& cfg);

AdapterKind parse_adapter_kind(const std::string& name);
const char* adapter_kind_name(AdapterKind kind);

}  // namespace scedit

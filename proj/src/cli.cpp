#include "scedit/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "scedit/checkpoint.hpp"
#include "scedit/conditions.hpp"
#include "scedit/config.hpp"
#include "scedit/diagnostics.hpp"
#include "scedit/errors.hpp"
#include "scedit/image_io.hpp"
#include "scedit/training.hpp"

namespace scedit {

namespace {

namespace fs = std::filesystem;

void write_resolved(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream f(dir / "resolved_config.json");
  if (!f) throw IoError("cannot write " + (dir / "resolved_config.json").string());
  f << to_json(cfg).dump(2) << '\n';
}

std::optional<TunerStack> build_stack(const RunConfig& cfg, const UNet& unet) {
  const auto layout = unet.skip_layout(cfg.data.size, cfg.data.size);
  switch (cfg.tuner.mode) {
    case TunerMode::kNone:
      return std::nullopt;
    case TunerMode::kSc:
      return TunerStack::sc(layout, cfg.tuner.tuner, cfg.tuner.seed, unet.dtype());
    case TunerMode::kCsc: {
      auto stack = TunerStack::csc(layout, cfg.tuner.tuner, cfg.tuner.conditions, cfg.model.time_embed_dim,
                                   cfg.tuner.seed, unet.dtype());
      if (!cfg.tuner.alphas.empty()) blend_conditions(stack, cfg.tuner.alphas);
      return stack;
    }
  }
  return std::nullopt;
}

// Train split first, validation split after it.
std::pair<ToyDataset, ToyDataset> load_data(const RunConfig& cfg, const std::vector<std::string>& types) {
  ToyDataset all;
  if (!cfg.data.dir.empty()) {
    all = import_dataset(cfg.data.dir);
    if (all.size != cfg.data.size) {
      throw ConfigError("data.size: " + std::to_string(cfg.data.size) + " but the dataset holds " +
                        std::to_string(all.size) + "px images");
    }
  } else {
    all = gen_toy_dataset(cfg.data.count + cfg.data.val_count, cfg.data.size, cfg.data.seed, types);
  }
  ToyDataset train = all, val = all;
  train.samples.clear();
  val.samples.clear();
  const std::size_t n_train = std::min<std::size_t>(static_cast<std::size_t>(cfg.data.count), all.samples.size());
  for (std::size_t i = 0; i < all.samples.size(); ++i) {
    (i < n_train ? train : val).samples.push_back(all.samples[i]);
  }
  return {std::move(train), std::move(val)};
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not an integer");
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not a number");
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct SampleRequest {
  int count = 8;
  std::string labels;
  std::string out;
  std::optional<double> guide_scale;
};

Tensor sample_images(const RunConfig& cfg, const UNet& unet, const TunerStack* stack,
                     const std::vector<std::string>& types, const SampleRequest& req) {
  if (req.count < 1) throw ConfigError("--count must be >= 1");
  std::optional<ToyBatch> batch;
  if (!types.empty()) {
    RunConfig probe = cfg;
    probe.data.count = req.count;
    probe.data.val_count = 0;
    const auto data = load_data(probe, types).first;
    if (static_cast<int>(data.samples.size()) < req.count) {
      throw ConfigError("--count exceeds the available condition samples");
    }
    std::vector<int> idx(static_cast<std::size_t>(req.count));
    for (int i = 0; i < req.count; ++i) idx[i] = i;
    batch = make_batch(data, idx, types, unet.dtype());
  }
  std::vector<int> labels;
  if (!req.labels.empty()) {
    labels = parse_int_list(req.labels, "--labels");
    if (static_cast<int>(labels.size()) != req.count) throw ConfigError("--labels needs one label per image");
  } else if (cfg.model.num_labels > 0) {
    for (int i = 0; i < req.count; ++i) labels.push_back(i % cfg.model.num_labels);
  }
  DdimOptions opts = cfg.diffusion.ddim();
  if (req.guide_scale) opts.guide_scale = *req.guide_scale;
  const ScEditModel model(unet, stack);
  const NoiseSchedule schedule = cfg.diffusion.make();
  const int S = cfg.data.size;
  return ddim_sample(model.noise_model(batch ? &batch->conds : nullptr), schedule,
                     {req.count, cfg.model.in_channels, S, S}, opts, labels, unet.dtype());
}

void write_samples(const Tensor& images, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_image_grid(path, images, std::min<int>(8, static_cast<int>(images.dim(0))));
}

RunConfig read_config(const std::string& path) {
  RunConfig cfg = load_run_config(path);
  apply_seed_override(cfg);
  return cfg;
}

void load_base(const RunConfig& cfg, const std::string& override_path, UNet& unet) {
  const std::string path = !override_path.empty() ? override_path : cfg.io.base_checkpoint;
  if (!path.empty()) load_checkpoint(path, &unet, nullptr);
}

int run_train(const std::string& config_path, std::ostream& out) {
  RunConfig cfg = read_config(config_path);
  if (cfg.io.out_dir.empty()) throw ConfigError("io.out_dir: required key missing");
  if (cfg.tuner.mode == TunerMode::kNone && cfg.train.freeze_backbone) {
    throw ConfigError("train.freeze_backbone: must be false when tuner.mode is none");
  }
  const fs::path dir = cfg.io.out_dir;
  write_resolved(cfg, dir);

  UNet unet(cfg.model);
  load_base(cfg, "", unet);
  auto stack = build_stack(cfg, unet);
  if (!cfg.io.tuner_checkpoint.empty()) {
    if (!stack) throw ConfigError("io.tuner_checkpoint: tuner.mode is none");
    load_checkpoint(cfg.io.tuner_checkpoint, nullptr, &*stack);
  }
  const auto [train, val] = load_data(cfg, cfg.tuner.conditions);
  const NoiseSchedule schedule = cfg.diffusion.make();
  Trainer trainer(unet, stack ? &*stack : nullptr, schedule, cfg.train);

  const fs::path ckpt = dir / (stack ? "tuner.sced" : "model.sced");
  auto save = [&](const fs::path& path) {
    save_checkpoint(path, unet, stack ? &*stack : nullptr,
                    stack ? CheckpointScope::kTunerOnly : CheckpointScope::kAll);
  };
  std::ofstream csv(dir / "loss.csv");
  if (!csv) throw IoError("cannot write " + (dir / "loss.csv").string());
  csv << "step,loss\n";
  fit(trainer, train, cfg.train.steps, [&](int step, double loss) {
    csv << fmt::format("{},{:.9g}\n", step + 1, loss);
    if (cfg.io.log_every > 0 && (step + 1) % cfg.io.log_every == 0) {
      out << fmt::format("step {} loss {:.6f}\n", step + 1, loss);
    }
    if (cfg.io.checkpoint_every > 0 && (step + 1) % cfg.io.checkpoint_every == 0) {
      save(dir / fmt::format("step-{}.sced", step + 1));
    }
  });
  save(ckpt);
  out << "checkpoint " << ckpt.string() << '\n';
  if (!val.samples.empty()) {
    const ScEditModel model(unet, stack ? &*stack : nullptr);
    const double v = evaluate_loss(model, schedule, val, cfg.tuner.conditions, cfg.train.batch_size,
                                   cfg.data.seed + 1, cfg.train.blank_conditions);
    out << fmt::format("validation loss {:.6f}\n", v);
  }
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skip-connection tuning for diffusion U-Nets"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train a backbone or a tuner stack");
  train->add_option("--config", config_path, "Run config (JSON)")->required();

  SampleRequest sreq;
  std::string checkpoint, tuner_path;
  auto* sample = app.add_subcommand("sample", "Sample a PNG grid with DDIM");
  sample->add_option("--config", config_path)->required();
  sample->add_option("--checkpoint", checkpoint, "Backbone checkpoint");
  sample->add_option("--tuner", tuner_path, "Tuner-only checkpoint");
  sample->add_option("--out", sreq.out)->required();
  sample->add_option("--count", sreq.count);
  sample->add_option("--labels", sreq.labels, "Comma-separated class ids");
  sample->add_option("--guide-scale", sreq.guide_scale);

  std::string ablate_out;
  int probe_count = 64, probe_t = 500, dump_channels = 0;
  std::uint64_t probe_seed = 0;
  auto* ablate = app.add_subcommand("ablate", "Skip-removal sweep with per-block statistics");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--checkpoint", checkpoint);
  ablate->add_option("--out-dir", ablate_out)->required();
  ablate->add_option("--probe", probe_count, "Probe batch size");
  ablate->add_option("--t", probe_t, "Probe timestep");
  ablate->add_option("--seed", probe_seed);
  ablate->add_option("--dump-channels", dump_channels, "Feature-map PNGs per block");

  std::vector<std::string> tuners;
  std::string alphas_text;
  SampleRequest creq;
  auto* compose = app.add_subcommand("compose", "Blend single-condition tuners and sample");
  compose->add_option("--config", config_path)->required();
  compose->add_option("--checkpoint", checkpoint);
  compose->add_option("--tuner", tuners, "Tuner-only checkpoint, one per condition")->required();
  compose->add_option("--alphas", alphas_text, "Comma-separated branch weights");
  compose->add_option("--out", creq.out)->required();
  compose->add_option("--count", creq.count);
  compose->add_option("--labels", creq.labels);
  compose->add_option("--guide-scale", creq.guide_scale);

  std::string layout = "sd15", indexes_text, adapter = "linear_adapter";
  int ratio = 1, kernel = 1;
  auto* count = app.add_subcommand("count-params", "Tuner parameter count for a skip layout");
  count->add_option("--layout", layout, "sd15 or toy")->check(CLI::IsMember({"sd15", "toy"}));
  count->add_option("--config", config_path, "Model config for --layout toy");
  count->add_option("--ratio", ratio);
  count->add_option("--indexes", indexes_text, "Comma-separated decoder indexes (default all)");
  count->add_option("--adapter", adapter);
  count->add_option("--kernel", kernel);

  int data_count = 512, data_size = 32;
  std::uint64_t data_seed = 0;
  std::string data_out, data_types = "edge,color,mask";
  auto* make_data = app.add_subcommand("make-data", "Generate and export the toy dataset");
  make_data->add_option("--count", data_count);
  make_data->add_option("--size", data_size);
  make_data->add_option("--seed", data_seed);
  make_data->add_option("--conditions", data_types);
  make_data->add_option("--out", data_out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return run_train(config_path, out);

    if (*sample) {
      RunConfig cfg = read_config(config_path);
      UNet unet(cfg.model);
      load_base(cfg, checkpoint, unet);
      auto stack = build_stack(cfg, unet);
      const std::string tpath = !tuner_path.empty() ? tuner_path : cfg.io.tuner_checkpoint;
      if (!tpath.empty()) {
        if (!stack) throw ConfigError("--tuner given but tuner.mode is none");
        load_checkpoint(tpath, nullptr, &*stack);
      }
      const Tensor images = sample_images(cfg, unet, stack ? &*stack : nullptr, cfg.tuner.conditions, sreq);
      write_samples(images, sreq.out);
      write_resolved(cfg, fs::path(sreq.out).parent_path().empty() ? fs::path(".") : fs::path(sreq.out).parent_path());
      out << "wrote " << sreq.out << '\n';
      return kExitOk;
    }

    if (*compose) {
      RunConfig cfg = read_config(config_path);
      if (cfg.tuner.conditions.size() != tuners.size()) {
        throw ConfigError("tuner.conditions: " + std::to_string(cfg.tuner.conditions.size()) +
                          " condition types for " + std::to_string(tuners.size()) + " tuners");
      }
      UNet unet(cfg.model);
      load_base(cfg, checkpoint, unet);
      const auto layout = unet.skip_layout(cfg.data.size, cfg.data.size);
      std::vector<TunerStack> singles;
      for (std::size_t m = 0; m < tuners.size(); ++m) {
        auto single = TunerStack::csc(layout, cfg.tuner.tuner, {cfg.tuner.conditions[m]},
                                      cfg.model.time_embed_dim, cfg.tuner.seed, unet.dtype());
        load_checkpoint(tuners[m], nullptr, &single);
        singles.push_back(std::move(single));
      }
      TunerStack stack = TunerStack::compose(singles);
      std::vector<double> alphas = !alphas_text.empty() ? parse_double_list(alphas_text, "--alphas") : cfg.tuner.alphas;
      if (!alphas.empty()) blend_conditions(stack, alphas);
      const Tensor images = sample_images(cfg, unet, &stack, cfg.tuner.conditions, creq);
      write_samples(images, creq.out);
      out << "wrote " << creq.out << '\n';
      return kExitOk;
    }

    if (*ablate) {
      RunConfig cfg = read_config(config_path);
      UNet unet(cfg.model);
      load_base(cfg, checkpoint, unet);
      const NoiseSchedule schedule = cfg.diffusion.make();
      RunConfig probe_cfg = cfg;
      probe_cfg.data.count = probe_count;
      probe_cfg.data.val_count = 0;
      const auto data = load_data(probe_cfg, {}).first;
      std::vector<int> idx(data.samples.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      const ToyBatch batch = make_batch(data, idx, {}, unet.dtype());
      ProbeBatch probe = make_probe(batch.x0, probe_t, schedule, probe_seed);
      if (cfg.model.num_labels > 0) probe.labels = batch.labels;

      InferenceGuard no_record;
      const int n = unet.num_skips();
      std::vector<AblationReport> reports;
      for (int dropped = 0; dropped <= n; ++dropped) {
        std::vector<int> keep;
        for (int j = dropped; j < n; ++j) keep.push_back(j);
        reports.push_back(ablate_skips(unet, probe, keep));
        if (dump_channels > 0) dump_feature_maps(fs::path(ablate_out) / "maps", reports.back(), dump_channels);
      }
      fs::create_directories(ablate_out);
      write_ablation_csv(fs::path(ablate_out) / "ablation.csv", reports);
      write_resolved(cfg, ablate_out);
      const auto& full = reports.front().final_variance;
      const auto& none = reports.back().final_variance;
      int lower = 0;
      for (std::size_t i = 0; i < full.size(); ++i) lower += none[i] < full[i];
      out << fmt::format("final-block variance lower without skips on {}/{} probes\n", lower, full.size());
      return kExitOk;
    }

    if (*count) {
      TunerConfig tc;
      tc.kind = parse_adapter_kind(adapter);
      tc.hidden_ratio = ratio;
      tc.conv_kernel = tc.kind == AdapterKind::kLinear ? 1 : kernel;
      if (!indexes_text.empty()) tc.active_indexes = parse_int_list(indexes_text, "--indexes");
      std::vector<int> channels;
      if (layout == "sd15") {
        channels = sd15_layout();
      } else {
        if (config_path.empty()) throw ConfigError("--layout toy needs --config");
        const RunConfig cfg = read_config(config_path);
        for (const auto& s : skip_layout(cfg.model, cfg.data.size, cfg.data.size)) channels.push_back(s.channels);
        std::reverse(channels.begin(), channels.end());
      }
      out << count_params(channels, tc) << '\n';
      return kExitOk;
    }

    if (*make_data) {
      const auto data = gen_toy_dataset(data_count, data_size, data_seed, split(data_types));
      export_dataset(data, data_out);
      out << "wrote " << data.samples.size() << " samples to " << data_out << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error (" << static_cast<int>(e.code()) << "): " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace scedit

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scedit/cli.hpp"
#include "scedit/conditions.hpp"

using namespace scedit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "scedit_tests" / "cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path write_json(const fs::path& path, const json& doc) {
  std::ofstream f(path);
  f << doc.dump(2);
  return path;
}

json small_config(const fs::path& out_dir) {
  return json{
      {"model", {{"levels", 2}, {"base_channels", 8}, {"channel_mult", {1, 2}}, {"norm_groups", 4},
                 {"time_embed_dim", 16}, {"num_labels", 12}, {"seed", 1}}},
      {"diffusion", {{"sample_steps", 3}, {"seed", 2}}},
      {"train", {{"steps", 3}, {"batch_size", 2}, {"lr", 1e-3}, {"seed", 3}}},
      {"data", {{"count", 6}, {"val_count", 2}, {"size", 8}, {"seed", 4}}},
      {"io", {{"out_dir", out_dir.string()}, {"log_every", 1}}},
  };
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("count-params prints the sd15 figure") {
  const auto r = run({"count-params", "--layout", "sd15", "--ratio", "1"});
  CHECK(r.code == kExitOk);
  CHECK(r.out == "19680000\n");
}

TEST_CASE("usage errors") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"count-params", "--layout", "sd21"}).code == kExitUsage);
  CHECK(run({"count-params", "--help"}).code == kExitOk);
}

TEST_CASE("config errors exit 2 and name the key") {
  const fs::path dir = scratch("config_errors");
  json missing = small_config(dir);
  missing["io"].erase("out_dir");
  auto r = run({"train", "--config", write_json(dir / "missing-key.json", missing).string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("io.out_dir") != std::string::npos);

  json unknown = small_config(dir);
  unknown["train"]["lrr"] = 1.0;
  r = run({"train", "--config", write_json(dir / "unknown.json", unknown).string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("train.lrr") != std::string::npos);

  json typed = small_config(dir);
  typed["model"]["levels"] = "two";
  r = run({"train", "--config", write_json(dir / "typed.json", typed).string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("model.levels") != std::string::npos);

  r = run({"train", "--config", (dir / "absent.json").string()});
  CHECK(r.code == kExitIo);
}

TEST_CASE("make-data exports an importable dataset") {
  const fs::path dir = scratch("make_data");
  const auto r = run({"make-data", "--count", "5", "--size", "8", "--seed", "2", "--conditions", "edge",
                      "--out", (dir / "set").string()});
  REQUIRE(r.code == kExitOk);
  const auto data = import_dataset(dir / "set");
  CHECK(data.samples.size() == 5);
  CHECK(data.condition_types == std::vector<std::string>{"edge"});
  const auto ref = gen_toy_dataset(5, 8, 2, {"edge"});
  for (std::size_t i = 0; i < 5; ++i) CHECK(data.samples[i].image.bit_equal(ref.samples[i].image));
}

TEST_CASE("train, sample and rerun from the resolved config") {
  const fs::path dir = scratch("train");
  json base = small_config(dir / "base");
  base["train"]["freeze_backbone"] = false;
  auto r = run({"train", "--config", write_json(dir / "base.json", base).string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(fs::exists(dir / "base" / "model.sced"));
  CHECK(r.out.find("validation loss") != std::string::npos);

  json sc = small_config(dir / "sc");
  sc["tuner"] = {{"mode", "sc"}, {"seed", 5}};
  sc["io"]["base_checkpoint"] = (dir / "base" / "model.sced").string();
  r = run({"train", "--config", write_json(dir / "sc.json", sc).string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const std::string loss = slurp(dir / "sc" / "loss.csv");
  const std::string ckpt = slurp(dir / "sc" / "tuner.sced");
  CHECK(loss.starts_with("step,loss\n"));
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 4);

  const fs::path resolved = dir / "sc" / "resolved_config.json";
  const json doc = json::parse(slurp(resolved));
  CHECK(doc["train"]["weight_decay"] == 0.01);
  CHECK(doc["tuner"]["mode"] == "sc");
  r = run({"train", "--config", resolved.string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(slurp(dir / "sc" / "loss.csv") == loss);
  CHECK(slurp(dir / "sc" / "tuner.sced") == ckpt);

  const fs::path png = dir / "samples" / "grid.png";
  r = run({"sample", "--config", resolved.string(), "--tuner", (dir / "sc" / "tuner.sced").string(), "--out",
           png.string(), "--count", "2"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const std::string first = slurp(png);
  CHECK(first.substr(1, 3) == "PNG");
  r = run({"sample", "--config", (dir / "samples" / "resolved_config.json").string(), "--tuner",
           (dir / "sc" / "tuner.sced").string(), "--out", png.string(), "--count", "2"});
  REQUIRE(r.code == kExitOk);
  CHECK(slurp(png) == first);

  r = run({"sample", "--config", resolved.string(), "--tuner", (dir / "base" / "model.sced").string(), "--out",
           png.string()});
  CHECK(r.code == kExitIo);
}

TEST_CASE("compose at an endpoint matches single-condition sampling") {
  const fs::path dir = scratch("compose");
  std::vector<fs::path> tuners;
  for (const std::string cond : {"edge", "color"}) {
    json cfg = small_config(dir / cond);
    cfg["tuner"] = {{"mode", "csc"}, {"conditions", {cond}}, {"seed", 6}};
    cfg["train"]["lr"] = 1e-2;
    const auto r = run({"train", "--config", write_json(dir / (cond + ".json"), cfg).string()});
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    tuners.push_back(dir / cond / "tuner.sced");
  }

  json single = small_config(dir / "unused");
  single["tuner"] = {{"mode", "csc"}, {"conditions", {"edge"}}, {"seed", 6}};
  auto r = run({"sample", "--config", write_json(dir / "single.json", single).string(), "--tuner",
                tuners[0].string(), "--out", (dir / "single.png").string(), "--count", "2"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);

  json both = single;
  both["tuner"]["conditions"] = {"edge", "color"};
  const auto both_path = write_json(dir / "both.json", both);
  r = run({"compose", "--config", both_path.string(), "--tuner", tuners[0].string(), "--tuner",
           tuners[1].string(), "--alphas", "1,0", "--out", (dir / "endpoint.png").string(), "--count", "2"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(slurp(dir / "endpoint.png") == slurp(dir / "single.png"));

  r = run({"compose", "--config", both_path.string(), "--tuner", tuners[0].string(), "--tuner",
           tuners[1].string(), "--alphas", "1,1", "--out", (dir / "mid.png").string(), "--count", "2"});
  REQUIRE(r.code == kExitOk);
  CHECK(slurp(dir / "mid.png") != slurp(dir / "single.png"));

  r = run({"compose", "--config", both_path.string(), "--tuner", tuners[0].string(), "--tuner",
           tuners[1].string(), "--alphas", "0,0", "--out", (dir / "bad.png").string()});
  CHECK(r.code == kExitConfig);
}

TEST_CASE("ablate writes the sweep") {
  const fs::path dir = scratch("ablate");
  const json cfg = small_config(dir);
  const auto r = run({"ablate", "--config", write_json(dir / "cfg.json", cfg).string(), "--out-dir",
                      (dir / "report").string(), "--probe", "4", "--dump-channels", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(fs::exists(dir / "report" / "ablation.csv"));
  CHECK(fs::exists(dir / "report" / "resolved_config.json"));
  CHECK(fs::exists(dir / "report" / "maps"));
  CHECK(r.out.find("/4 probes") != std::string::npos);
}

}  // TEST_SUITE

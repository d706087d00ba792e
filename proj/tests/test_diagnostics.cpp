#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>
#include <vector>

#include "scedit/autograd.hpp"
#include "scedit/diagnostics.hpp"
#include "scedit/errors.hpp"
#include "scedit/ops.hpp"
#include "scedit/training.hpp"
#include "support.hpp"

using namespace scedit;
namespace fs = std::filesystem;

namespace {

ProbeBatch probe_for(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor x0 = Tensor::uniform({n, 3, 16, 16}, rng, -1.0, 1.0);
  return make_probe(x0, 500, make_schedule(1000, 1e-4, 0.02), seed + 1);
}

void randomize(const ParamList& params, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.assign(Tensor::randn(t.shape(), rng, sd, t.dtype()));
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("diagnostics") {

TEST_CASE("keeping every skip reproduces the plain forward") {
  const UNet net(testing::toy_unet_config());
  const ProbeBatch probe = probe_for(2, 1);
  InferenceGuard guard;
  const auto keep = all_indexes(net.num_skips());
  const auto report = ablate_skips(net, probe, keep);
  CHECK(report.output.bit_equal(net.predict_noise(probe.x_t, probe.steps)));
  CHECK(report.mask_bits() == std::string(static_cast<std::size_t>(net.num_skips()), '1'));
  CHECK(report.blocks.size() == report.trace.block_outputs.size());
  CHECK(report.final_variance.size() == 2);
  for (const auto& b : report.blocks) {
    CHECK(b.variance >= 0.0);
    std::int64_t total = 0;
    for (auto c : b.histogram) total += c;
    CHECK(total == 2LL * b.shape.channels * b.shape.height * b.shape.width);
  }
}

TEST_CASE("dropping skips equals a zero scalar gate inside the concat") {
  const UNet net(testing::toy_unet_config());
  const ProbeBatch probe = probe_for(2, 2);
  InferenceGuard guard;
  const std::vector<int> keep{0, 2, 5};
  const auto report = ablate_skips(net, probe, keep);
  const Tensor emb = net.embed(probe.steps, {});
  auto enc = net.encode(probe.x_t, emb);
  const SkipEditor gate = [&](int j, const Tensor& s) {
    const bool kept = std::find(keep.begin(), keep.end(), j) != keep.end();
    return ops::mul_scalar(s, kept ? 1.0 : 0.0);
  };
  const Tensor gated = net.decode(enc.bottleneck, enc.skips, emb, gate);
  CHECK(testing::max_abs_diff(report.output, gated) == 0.0);
  CHECK(report.mask_bits() == "101001");

  const std::vector<int> none{};
  CHECK(testing::max_abs_diff(ablate_skips(net, probe, none).output, report.output) > 0.0);
  const std::vector<int> bad{6};
  CHECK_THROWS_AS(ablate_skips(net, probe, bad), ConfigError);
}

TEST_CASE("a dropped skip disconnects its tuner") {
  const UNet net(testing::toy_unet_config());
  const auto stack = TunerStack::sc(net.skip_layout(16, 16), TunerConfig{}, 3);
  randomize(stack.parameters(), 4, 0.1);
  const auto params = freeze_backbone(net, &stack);
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  const ProbeBatch probe = probe_for(2, 5);
  const std::vector<int> keep{0, 1, 2, 4, 5};
  const auto report = ablate_skips(net, probe, keep, &stack);
  backward(ops::mse_loss(report.output, Tensor::zeros(report.output.shape())), leaves);
  for (const auto& p : params) {
    CAPTURE(p.name);
    double mag = 0.0;
    for (double g : p.tensor.grad().to_vector()) mag += std::abs(g);
    if (p.name.starts_with("sc.tuner.3.")) {
      CHECK(mag == 0.0);
    } else {
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("csv layout and stable reruns") {
  const UNet net(testing::toy_unet_config());
  const ProbeBatch probe = probe_for(3, 6);
  InferenceGuard guard;
  auto sweep = [&] {
    std::vector<AblationReport> reports;
    const int n = net.num_skips();
    for (int dropped = 0; dropped <= n; ++dropped) {
      std::vector<int> keep;
      for (int j = dropped; j < n; ++j) keep.push_back(j);
      reports.push_back(ablate_skips(net, probe, keep));
    }
    return reports;
  };
  const fs::path dir = fs::temp_directory_path() / "scedit_tests";
  fs::create_directories(dir);
  const auto first = sweep();
  write_ablation_csv(dir / "a.csv", first);
  write_ablation_csv(dir / "b.csv", sweep());
  const std::string text = slurp(dir / "a.csv");
  CHECK(text == slurp(dir / "b.csv"));

  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  CHECK(header.starts_with("mask,block,channels,height,width,variance,h00,h01,"));
  CHECK(header.ends_with(",h63"));
  int rows = 0;
  for (std::string line; std::getline(in, line);) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 5 + kHistogramBins);
  }
  CHECK(rows == (net.num_skips() + 1) * static_cast<int>(first.front().blocks.size()));
}

TEST_CASE("feature map dump names files by mask, block and channel") {
  const UNet net(testing::toy_unet_config());
  const ProbeBatch probe = probe_for(1, 7);
  InferenceGuard guard;
  const std::vector<int> keep{1};
  const auto report = ablate_skips(net, probe, keep);
  const fs::path dir = fs::temp_directory_path() / "scedit_tests" / "maps";
  fs::remove_all(dir);
  dump_feature_maps(dir, report, 2);
  CHECK(fs::exists(dir / "mask-010000_block-0_ch-0.png"));
  CHECK(fs::exists(dir / "mask-010000_block-5_ch-1.png"));
  CHECK(std::distance(fs::directory_iterator(dir), fs::directory_iterator()) ==
        2 * static_cast<long>(report.blocks.size()));
}

TEST_CASE("efficiency report") {
  const UNet net(testing::toy_unet_config());
  for (auto kind : {AdapterKind::kLinear, AdapterKind::kConv}) {
    TunerConfig tc;
    tc.kind = kind;
    const auto stack = TunerStack::sc(net.skip_layout(16, 16), tc, 8);
    std::vector<int> channels;
    for (const auto& s : stack.decoder_layout()) channels.push_back(s.channels);
    const Shape shape{2, 3, 16, 16};
    const auto a = efficiency_report(net, &stack, shape, nullptr, 1, 1);
    const auto b = efficiency_report(net, &stack, shape, nullptr, 1, 1);
    CHECK(a.trainable_params == count_params(channels, tc));
    CHECK(a.retained_decoupled < a.retained_full);
    CHECK(a.retained_decoupled > 0);
    CHECK(a.trainable_params == b.trainable_params);
    CHECK(a.retained_decoupled == b.retained_decoupled);
    CHECK(a.retained_full == b.retained_full);
    CHECK(a.ms_per_step > 0.0);
  }
  const auto csc = TunerStack::csc(net.skip_layout(16, 16), TunerConfig{}, {"edge"}, net.config().time_embed_dim, 9);
  std::mt19937_64 rng(2);
  ConditionSet conds{{"edge"}, {Tensor::uniform({2, 1, 16, 16}, rng, -1.0, 1.0)}};
  const auto r = efficiency_report(net, &csc, {2, 3, 16, 16}, &conds, 1, 1);
  CHECK(r.trainable_params == total_elements(csc.parameters()));
  CHECK(r.retained_decoupled < r.retained_full);
}

}  // TEST_SUITE

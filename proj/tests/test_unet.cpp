#include <doctest.h>

#include <random>
#include <vector>

#include "scedit/autograd.hpp"
#include "scedit/errors.hpp"
#include "scedit/ops.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"
#include "support.hpp"

using namespace scedit;

namespace {

std::vector<UNetConfig> config_matrix() {
  std::vector<UNetConfig> out{testing::tiny_unet_config(), testing::toy_unet_config(),
                              testing::sd_like_config()};
  UNetConfig deep = testing::tiny_unet_config();
  deep.levels = 3;
  deep.channel_mult = {1, 1, 2};
  deep.blocks_per_level = 2;
  deep.attn_levels = {};
  out.push_back(deep);
  return out;
}

}  // namespace

TEST_SUITE("unet") {

TEST_CASE("static skip layout equals what encode produces") {
  for (const auto& cfg : config_matrix()) {
    const UNet net(cfg);
    const int size = 16;
    std::mt19937_64 rng(1);
    const Tensor x = Tensor::randn({1, cfg.in_channels, size, size}, rng);
    const std::vector<int> steps{5};
    InferenceGuard guard;
    const auto enc = net.encode(x, net.embed(steps, {}));
    CHECK(static_cast<int>(enc.skips.size()) == skip_count(cfg));
    CHECK(net.num_skips() == skip_count(cfg));
    CHECK(enc.skips.layout() == skip_layout(cfg, size, size));
    CHECK(skip_count(cfg) == 1 + cfg.levels * cfg.blocks_per_level + (cfg.levels - 1));
  }
}

TEST_CASE("sd-like skip multiset in push order") {
  const auto layout = skip_layout(testing::sd_like_config(), 16, 16);
  std::vector<int> channels;
  for (const auto& s : layout) channels.push_back(s.channels * 80);
  CHECK(channels == std::vector<int>{320, 320, 320, 320, 640, 640, 640, 1280, 1280, 1280, 1280, 1280});
  std::vector<int> decoder(channels.rbegin(), channels.rend());
  CHECK(decoder == sd15_layout());
}

TEST_CASE("encode is deterministic and records nothing in inference mode") {
  const UNet net(testing::toy_unet_config());
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::randn({2, 3, 16, 16}, rng);
  const std::vector<int> steps{3, 700};
  InferenceGuard guard;
  const Tensor emb = net.embed(steps, {});
  const auto a = net.encode(x, emb);
  const auto b = net.encode(x, emb);
  REQUIRE(a.skips.size() == b.skips.size());
  for (std::size_t i = 0; i < a.skips.size(); ++i) {
    CHECK(a.skips.tensors()[i].bit_equal(b.skips.tensors()[i]));
    CHECK(graph_node_count(a.skips.tensors()[i]) == 0);
  }
  CHECK(a.bottleneck.bit_equal(b.bottleneck));
}

TEST_CASE("indivisible spatial size is a configuration error") {
  const UNet net(testing::toy_unet_config());
  const Tensor x = Tensor::zeros({1, 3, 10, 10});
  const std::vector<int> steps{1};
  CHECK_THROWS_AS(net.predict_noise(x, steps), ConfigError);
}

TEST_CASE("skip bundle pops the deepest output first") {
  SkipBundle bundle;
  for (int c : {1, 2, 3}) bundle.push(Tensor::zeros({1, c, 1, 1}));
  CHECK(bundle.pop().dim(1) == 3);
  CHECK(bundle.pop().dim(1) == 2);
  CHECK(bundle.pop().dim(1) == 1);
  CHECK(bundle.empty());
}

TEST_CASE("decode without edits equals the plain forward") {
  const UNet net(testing::toy_unet_config());
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({2, 3, 16, 16}, rng);
  const std::vector<int> steps{10, 400};
  const std::vector<int> labels{4, 7};
  InferenceGuard guard;
  const Tensor ref = net.predict_noise(x, steps, labels);
  CHECK(ref.shape() == x.shape());

  const Tensor emb = net.embed(steps, labels);
  auto enc = net.encode(x, emb);
  const SkipEditor passthrough = [](int, const Tensor& s) { return s; };
  CHECK(net.decode(enc.bottleneck, enc.skips, emb, passthrough).bit_equal(ref));
  CHECK(decode_with_tuners(net, enc.bottleneck, enc.skips, emb, nullptr, nullptr).bit_equal(ref));

  const auto stack = TunerStack::sc(net.skip_layout(16, 16), TunerConfig{}, 5);
  CHECK(decode_with_tuners(net, enc.bottleneck, enc.skips, emb, &stack, nullptr).bit_equal(ref));
}

TEST_CASE("decode rejects a skip edit with the wrong channel count") {
  const UNet net(testing::toy_unet_config());
  const Tensor x = Tensor::zeros({1, 3, 16, 16});
  const std::vector<int> steps{1};
  InferenceGuard guard;
  const Tensor emb = net.embed(steps, {});
  auto enc = net.encode(x, emb);
  const SkipEditor bad = [](int j, const Tensor& s) {
    return j == 2 ? Tensor::zeros({s.dim(0), s.dim(1) + 1, s.dim(2), s.dim(3)}) : s;
  };
  try {
    net.decode(enc.bottleneck, enc.skips, emb, bad);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
}

TEST_CASE("zeroing every skip changes the output") {
  const UNet net(testing::toy_unet_config());
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::randn({1, 3, 16, 16}, rng);
  const std::vector<int> steps{100};
  InferenceGuard guard;
  const Tensor emb = net.embed(steps, {});
  auto enc = net.encode(x, emb);
  const Tensor full = net.decode(enc.bottleneck, enc.skips, emb);
  const SkipEditor zero = [](int, const Tensor& s) { return Tensor::zeros(s.shape(), s.dtype()); };
  CHECK(testing::max_abs_diff(full, net.decode(enc.bottleneck, enc.skips, emb, zero)) > 0.0);
}

TEST_CASE("labels") {
  const UNet net(testing::toy_unet_config());
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({2, 3, 16, 16}, rng);
  const std::vector<int> steps{10, 20};
  InferenceGuard guard;
  const std::vector<int> nulls{-1, -1};
  CHECK(net.predict_noise(x, steps).bit_equal(net.predict_noise(x, steps, nulls)));
  const std::vector<int> labelled{0, 11};
  CHECK(testing::max_abs_diff(net.predict_noise(x, steps), net.predict_noise(x, steps, labelled)) > 0.0);
  const std::vector<int> bad{0, 12};
  CHECK_THROWS_AS(net.predict_noise(x, steps, bad), ConfigError);
}

TEST_CASE("f64 conversion keeps values") {
  UNet net(testing::tiny_unet_config());
  const auto before = net.parameters();
  std::vector<std::vector<double>> values;
  for (const auto& p : before) values.push_back(p.tensor.to_vector());
  net.to(DType::kF64);
  const auto after = net.parameters();
  REQUIRE(after.size() == values.size());
  for (std::size_t i = 0; i < after.size(); ++i) {
    CHECK(after[i].tensor.dtype() == DType::kF64);
    CHECK(after[i].tensor.to_vector() == values[i]);
  }
}

}  // TEST_SUITE

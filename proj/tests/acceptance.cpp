// Acceptance gate: one PASS/FAIL line per criterion.
//
//   scedit_acceptance [--only <key>]...

#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "scedit/autograd.hpp"
#include "scedit/checkpoint.hpp"
#include "scedit/conditions.hpp"
#include "scedit/config.hpp"
#include "scedit/diagnostics.hpp"
#include "scedit/diffusion.hpp"
#include "scedit/errors.hpp"
#include "scedit/grad_check.hpp"
#include "scedit/ops.hpp"
#include "scedit/training.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"
#include "support.hpp"

using namespace scedit;
namespace fs = std::filesystem;

namespace {

const fs::path kData = SCEDIT_TEST_DATA;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void expect(bool ok, std::string what) {
    if (!ok) pass = false;
    notes.push_back(fmt::format("{} {}", ok ? "ok  " : "FAIL", what));
  }
  void note(std::string what) { notes.push_back("     " + std::move(what)); }
};

struct Reference {
  RunConfig cfg;
  UNet unet;
  NoiseSchedule schedule;
  ToyDataset train, val;
};

Reference& reference() {
  static Reference* ref = [] {
    RunConfig cfg = load_run_config(kData / "reference_config.json");
    auto* r = new Reference{cfg, UNet(cfg.model), cfg.diffusion.make(), {}, {}};
    load_checkpoint(kData / "reference.sced", &r->unet, nullptr);
    const ToyDataset all = gen_toy_dataset(cfg.data.count + cfg.data.val_count, cfg.data.size, cfg.data.seed);
    r->train = all;
    r->val = all;
    r->train.samples.assign(all.samples.begin(), all.samples.begin() + cfg.data.count);
    r->val.samples.assign(all.samples.begin() + cfg.data.count, all.samples.end());
    return r;
  }();
  return *ref;
}

int size() { return reference().cfg.data.size; }

std::vector<int> iota(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}

void randomize(const ParamList& params, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.assign(Tensor::randn(t.shape(), rng, sd, t.dtype()));
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

Outcome parameter_counts() {
  Outcome o;
  const auto layout = sd15_layout();
  struct Row {
    int ratio;
    std::vector<int> indexes;
    std::int64_t expect;
  };
  for (const auto& row : {Row{1, {}, 19680000}, Row{10, {}, 1976640}, Row{5, {}, 3943680},
                          Row{1, {0, 11}, 3484800}, Row{1, {0, 3, 6, 9, 11}, 7790080}}) {
    TunerConfig tc;
    tc.hidden_ratio = row.ratio;
    tc.active_indexes = row.indexes;
    const auto got = count_params(layout, tc);
    o.expect(got == row.expect, fmt::format("ratio {} indexes [{}]: {} (expected {})", row.ratio,
                                            fmt::join(row.indexes, ","), got, row.expect));
  }
  return o;
}

Outcome zero_init_identity() {
  Outcome o;
  auto& ref = reference();
  const int n = 4;
  const auto idx = iota(n);
  const std::vector<std::string> types{"edge", "color"};
  const ToyBatch batch = make_batch(ref.val, idx, types);
  const std::vector<int> labels{0, 3, 6, 9};
  DdimOptions opts = ref.cfg.diffusion.ddim();
  opts.steps = 50;
  opts.seed = 17;
  const Shape shape{n, 3, size(), size()};
  const auto layout = ref.unet.skip_layout(size(), size());

  const Tensor base = ddim_sample(ScEditModel(ref.unet, nullptr).noise_model(nullptr), ref.schedule, shape, opts, labels);
  for (auto kind : {AdapterKind::kLinear, AdapterKind::kConv}) {
    TunerConfig tc;
    tc.kind = kind;
    const auto sc = TunerStack::sc(layout, tc, 1);
    const Tensor s = ddim_sample(ScEditModel(ref.unet, &sc).noise_model(nullptr), ref.schedule, shape, opts, labels);
    o.expect(s.bit_equal(base), fmt::format("sc {} tuner, 50 DDIM steps", adapter_kind_name(kind)));
  }
  const auto csc = TunerStack::csc(layout, TunerConfig{}, types, ref.cfg.model.time_embed_dim, 2);
  const Tensor c = ddim_sample(ScEditModel(ref.unet, &csc).noise_model(&batch.conds), ref.schedule, shape, opts, labels);
  o.expect(c.bit_equal(base), "csc tuner on edge+color, 50 DDIM steps");
  return o;
}

Outcome encoder_decoupling() {
  Outcome o;
  auto& ref = reference();
  const auto layout = ref.unet.skip_layout(size(), size());
  const auto idx = iota(4);
  struct Case {
    const char* name;
    bool controllable;
    AdapterKind kind;
    std::vector<std::string> conds;
  };
  const std::vector<Case> cases{{"sc linear", false, AdapterKind::kLinear, {}},
                                {"sc conv", false, AdapterKind::kConv, {}},
                                {"csc edge linear", true, AdapterKind::kLinear, {"edge"}},
                                {"csc edge+color single conv", true, AdapterKind::kSingleConv, {"edge", "color"}}};
  for (const auto& c : cases) {
    TunerConfig tc;
    tc.kind = c.kind;
    const auto stack = c.controllable ? TunerStack::csc(layout, tc, c.conds, ref.cfg.model.time_embed_dim, 3)
                                      : TunerStack::sc(layout, tc, 3);
    randomize(stack.parameters(), 4, 0.05);
    const auto trainable = freeze_backbone(ref.unet, &stack);
    const ToyBatch batch = make_batch(ref.train, idx, c.conds);
    std::mt19937_64 rng(5);
    const Tensor eps = Tensor::randn(batch.x0.shape(), rng);
    const std::vector<int> t{10, 250, 600, 990};
    std::vector<int> steps(t);
    for (int& s : steps) s -= 1;
    const Tensor x_t = q_sample(ref.schedule, batch.x0, t, eps);
    const ScEditModel model(ref.unet, &stack);
    std::vector<Tensor> ensure;
    for (const auto& p : trainable) ensure.push_back(p.tensor);

    auto run = [&](bool decouple, std::int64_t& retained) {
      for (auto& p : ensure) p.clear_grad();
      const Tensor loss = ops::mse_loss(model.predict_noise(x_t, steps, batch.labels, &batch.conds, decouple), eps);
      retained = retained_activation_elements(loss);
      backward(loss, ensure);
      std::vector<Tensor> g;
      for (const auto& p : ensure) g.push_back(p.grad().clone());
      return g;
    };
    std::int64_t kept_dec = 0, kept_full = 0;
    const auto dec = run(true, kept_dec);
    std::vector<Tensor> full;
    {
      GradModeGuard all(GradMode::kRecordAll);
      full = run(false, kept_full);
    }
    bool same = dec.size() == full.size();
    for (std::size_t i = 0; same && i < dec.size(); ++i) same = dec[i].bit_equal(full[i]);
    o.expect(same, fmt::format("{}: {} tuner gradients bit-identical", c.name, dec.size()));
    o.expect(kept_dec < kept_full, fmt::format("{}: retained {} vs {} elements ({:.1f}% saved)", c.name, kept_dec,
                                               kept_full, 100.0 * (1.0 - double(kept_dec) / double(kept_full))));
  }
  return o;
}

Outcome gradient_correctness() {
  Outcome o;
  double worst = 0.0;
  std::string worst_name;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    for (const auto& c : testing::primitive_cases(seed)) {
      const auto r = grad_check(
          [&](std::span<const Tensor> in) {
            return testing::weighted_sum(ops::primitive_forward(c.kind, in, c.attrs), seed);
          },
          c.inputs, c.eps);
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        worst_name = c.name;
      }
    }
  }
  o.expect(worst < 1e-4, fmt::format("all {} primitives, 3 seeds: max rel error {:.3g} ({})",
                                     ops::all_primitives().size(), worst, worst_name));

  const UNet net(testing::tiny_unet_config(), DType::kF64);
  const auto params = net.parameters();
  set_trainable(params, true);
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  std::mt19937_64 rng(9);
  const Tensor x0 = Tensor::randn({2, 2, 8, 8}, rng, 1.0, DType::kF64);
  const Tensor eps = Tensor::randn({2, 2, 8, 8}, rng, 1.0, DType::kF64);
  const auto schedule = make_schedule(100, 1e-4, 0.02);
  const std::vector<int> t{30, 80};
  const std::vector<int> labels{2, -1};
  const NoiseModel model = [&](const Tensor& x, std::span<const int> s, std::span<const int> l) {
    return net.predict_noise(x, s, l);
  };
  const auto loss = [&] { return loss_simple(model, schedule, x0, t, eps, labels); };
  const auto rich = grad_check_leaves(loss, leaves, 1e-3, Difference::kRichardson);
  o.expect(rich.max_rel_error < 1e-4,
           fmt::format("tiny U-Net loss, {} parameters, Richardson h=1e-3: max rel error {:.3g} ({})",
                       total_elements(params), rich.max_rel_error, params[rich.input].name));
  const auto central = grad_check_leaves(loss, leaves, 1e-4);
  o.note(fmt::format("tiny U-Net loss, central eps=1e-4 (reference only): max rel error {:.3g} at {} "
                     "(analytic {:.3g}, numeric {:.3g})",
                     central.max_rel_error, params[central.input].name, central.analytic, central.numeric));
  const std::vector<Tensor> xs{x0};
  const auto rx = grad_check(
      [&](std::span<const Tensor> in) { return loss_simple(model, schedule, in[0], t, eps, labels); }, xs, 1e-4);
  o.expect(rx.max_rel_error < 1e-4, fmt::format("tiny U-Net loss wrt x0, central eps=1e-4: max rel error {:.3g}",
                                                rx.max_rel_error));
  return o;
}

Outcome diffusion_correctness() {
  Outcome o;
  const auto s = reference().schedule;
  const int n = 100000;
  std::mt19937_64 rng(21);
  const Tensor x0 = Tensor::full({n, 1}, 0.7, DType::kF64);
  for (int t : {1, 250, 500, 1000}) {
    const Tensor eps = Tensor::randn({n, 1}, rng, 1.0, DType::kF64);
    const auto v = q_sample(s, x0, t, eps).to_vector();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n - 1;
    const double ab = s.alpha_bar_at(t);
    const double ev = 1.0 - ab;
    const double em = std::sqrt(ab) * 0.7;
    const double se_m = std::sqrt(ev / n), se_v = ev * std::sqrt(2.0 / (n - 1));
    o.expect(std::abs(mean - em) < 3 * se_m && std::abs(var - ev) < 3 * se_v,
             fmt::format("t={}: mean {:.6f} vs {:.6f} ({:.2f} SE), var {:.6f} vs {:.6f} ({:.2f} SE)", t, mean, em,
                         std::abs(mean - em) / se_m, var, ev, std::abs(var - ev) / se_v));
  }

  std::mt19937_64 r2(22);
  const Tensor img = Tensor::uniform({4, 3, 16, 16}, r2, -1.0, 1.0);
  const Tensor eps = Tensor::randn(img.shape(), r2);
  const Tensor x_T = q_sample(s, img, s.num_steps, eps);
  const NoiseModel oracle = [&](const Tensor&, std::span<const int>, std::span<const int>) { return eps; };
  const Tensor out = ddim_sample_from(oracle, s, x_T, DdimOptions{.steps = 1}, {});
  const double ab = s.alpha_bar_at(s.num_steps);
  const auto xv = img.to_vector(), ov = out.to_vector(), tv = x_T.to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double bound = 2.0 * FLT_EPSILON * (std::abs(tv[i]) / std::sqrt(ab) + std::abs(xv[i]));
    worst = std::max(worst, std::abs(ov[i] - xv[i]) / bound);
  }
  o.expect(worst <= 1.0, fmt::format("one-step DDIM inversion: worst error {:.2f} of the f32 round-off bound", worst));

  bool exact = true;
  for (auto kind : {BetaSchedule::kLinear, BetaSchedule::kScaledLinear}) {
    const auto k = make_schedule(1000, 0.00085, 0.012, kind);
    for (int t = 1; t <= k.num_steps; ++t) exact &= k.alpha_bar_at(t) == k.alpha_bar_at(t - 1) * k.alpha[t - 1];
  }
  o.expect(exact, "alpha_bar(t) == alpha_bar(t-1) * alpha(t) exactly in f64, both schedules, t=1..1000");
  return o;
}

Outcome training_efficacy() {
  Outcome o;
  auto& ref = reference();
  const auto layout = ref.unet.skip_layout(size(), size());
  const int eval_batch = 16;
  const std::uint64_t eval_seed = 404;

  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 8;
  tc.seed = 1;
  tc.weight_decay = 0.0;

  const double base = evaluate_loss(ScEditModel(ref.unet, nullptr), ref.schedule, ref.val, {}, eval_batch, eval_seed);
  {
    const auto sc = TunerStack::sc(layout, TunerConfig{}, 5);
    Trainer trainer(ref.unet, &sc, ref.schedule, tc);
    const auto t0 = std::chrono::steady_clock::now();
    const auto losses = fit(trainer, ref.train, 500);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double tuned = evaluate_loss(ScEditModel(ref.unet, &sc), ref.schedule, ref.val, {}, eval_batch, eval_seed);
    o.expect(tuned < base, fmt::format("sc tuner, 500 steps: validation loss {:.6f} vs frozen base {:.6f} ({:.1f}s)",
                                       tuned, base, secs));
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) {
      head += losses[i] / 50;
      tail += losses[losses.size() - 1 - i] / 50;
    }
    o.note(fmt::format("sc training loss, first 50 steps {:.6f}, last 50 steps {:.6f}", head, tail));
  }

  const std::vector<std::string> edge{"edge"};
  double cond = 0.0, uncond = 0.0;
  for (bool blank_run : {false, true}) {
    const auto csc = TunerStack::csc(layout, TunerConfig{}, edge, ref.cfg.model.time_embed_dim, 6);
    TrainConfig cc = tc;
    cc.seed = 2;
    cc.blank_conditions = blank_run;
    Trainer trainer(ref.unet, &csc, ref.schedule, cc);
    const auto t0 = std::chrono::steady_clock::now();
    fit(trainer, ref.train, 2000);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double v = evaluate_loss(ScEditModel(ref.unet, &csc), ref.schedule, ref.val, edge, eval_batch, eval_seed,
                                   blank_run);
    (blank_run ? uncond : cond) = v;
    o.note(fmt::format("csc {} tuner, 2000 steps: validation loss {:.6f} ({:.1f}s)",
                       blank_run ? "blank-condition" : "edge-conditioned", v, secs));
  }
  o.expect(cond < uncond, fmt::format("edge-conditioned {:.6f} < blank-condition {:.6f}", cond, uncond));
  return o;
}

Outcome composition() {
  Outcome o;
  auto& ref = reference();
  const auto layout = ref.unet.skip_layout(size(), size());
  const int emb = ref.cfg.model.time_embed_dim;
  auto a = TunerStack::csc(layout, TunerConfig{}, {"edge"}, emb, 7);
  auto b = TunerStack::csc(layout, TunerConfig{}, {"color"}, emb, 8);
  randomize(a.parameters(), 9, 0.05);
  randomize(b.parameters(), 10, 0.05);
  auto both = TunerStack::compose({a, b});
  const auto idx = iota(2);
  const ToyBatch batch = make_batch(ref.val, idx, {"edge", "color"});
  const ToyBatch only_edge = make_batch(ref.val, idx, {"edge"});
  const ToyBatch only_color = make_batch(ref.val, idx, {"color"});
  DdimOptions opts;
  opts.steps = 10;
  opts.seed = 31;
  const Shape shape{2, 3, size(), size()};
  const std::vector<int> labels{1, 7};
  auto sample = [&](const TunerStack& s, const ConditionSet& c) {
    return ddim_sample(ScEditModel(ref.unet, &s).noise_model(&c), ref.schedule, shape, opts, labels);
  };

  const std::vector<double> first{1.0, 0.0}, second{0.0, 1.0};
  blend_conditions(both, first);
  o.expect(sample(both, batch.conds).bit_equal(sample(a, only_edge.conds)), "alpha (1,0) reproduces the edge tuner");
  blend_conditions(both, second);
  o.expect(sample(both, batch.conds).bit_equal(sample(b, only_color.conds)), "alpha (0,1) reproduces the color tuner");

  const std::vector<double> raw{3.0, 1.0};
  blend_conditions(both, raw);
  const double sum = both.alphas()[0] + both.alphas()[1];
  bool rejects = false;
  try {
    both.set_alphas({0.4, 0.4});
  } catch (const ConfigError&) {
    rejects = true;
  }
  bool zero_rejected = false;
  try {
    const std::vector<double> zeros{0.0, 0.0};
    blend_conditions(both, zeros);
  } catch (const ConfigError&) {
    zero_rejected = true;
  }
  o.expect(std::abs(sum - 1.0) < 1e-12 && both.alphas()[0] == 0.75 && rejects && zero_rejected,
           "weights normalize to sum 1; unnormalized and all-zero weights rejected");

  // Single-condition skip edit against a hand expansion evaluated per pixel in f64.
  auto one = TunerStack::csc(layout, TunerConfig{}, {"edge"}, emb, 11, DType::kF64);
  randomize(one.parameters(), 12, 0.3);
  double worst = 0.0;
  std::mt19937_64 rng(13);
  for (int j = 0; j < static_cast<int>(one.decoder_layout().size()); ++j) {
    const auto& info = one.decoder_layout()[j];
    const Tensor x = Tensor::randn({1, info.channels, info.height, info.width}, rng, 1.0, DType::kF64);
    const Tensor c = Tensor::randn(x.shape(), rng, 1.0, DType::kF64);
    const std::vector<Tensor> cs{c};
    const auto got = csc_tuner_apply(one, j, x, cs).to_vector();
    const Adapter& t = one.branches()[0].tuners.at(j);
    const auto wd = t.down.weight.to_vector(), bd = t.down.bias.to_vector();
    const auto wu = t.up.weight.to_vector(), bu = t.up.bias.to_vector();
    const int C = info.channels, H = static_cast<int>(wd.size()) / C, P = info.height * info.width;
    const auto xv = x.to_vector(), cv = c.to_vector();
    for (int p = 0; p < P; ++p) {
      std::vector<double> hidden(static_cast<std::size_t>(H));
      for (int h = 0; h < H; ++h) {
        double acc = bd[h];
        for (int k = 0; k < C; ++k) acc += wd[h * C + k] * (xv[k * P + p] + cv[k * P + p]);
        const double g = 0.5 * acc * (1.0 + std::tanh(std::sqrt(2.0 / std::acos(-1.0)) * (acc + 0.044715 * acc * acc * acc)));
        hidden[h] = g;
      }
      for (int k = 0; k < C; ++k) {
        double acc = bu[k];
        for (int h = 0; h < H; ++h) acc += wu[k * H + h] * hidden[h];
        const double expect = acc + cv[k * P + p] + xv[k * P + p];
        worst = std::max(worst, std::abs(got[k * P + p] - expect) / (1.0 + std::abs(expect)));
      }
    }
  }
  o.expect(worst < 1e-12, fmt::format("single-condition edit vs hand expansion, every decoder index: max error {:.3g}",
                                      worst));
  return o;
}

Outcome skip_methodology() {
  Outcome o;
  auto& ref = reference();
  const int n = 64;
  const ToyBatch batch = make_batch(ref.val, iota(n), {});
  ProbeBatch probe = make_probe(batch.x0, 500, ref.schedule, 41);
  probe.labels = batch.labels;
  const int skips = ref.unet.num_skips();
  {
    InferenceGuard guard;
    const auto full = ablate_skips(ref.unet, probe, all_indexes(skips));
    o.expect(full.output.bit_equal(ref.unet.predict_noise(probe.x_t, probe.steps, probe.labels)),
             "keep=all is bit-identical to the plain forward");
    const std::vector<int> none{};
    const auto bare = ablate_skips(ref.unet, probe, none);
    int lower = 0;
    for (int i = 0; i < n; ++i) lower += bare.final_variance[i] < full.final_variance[i];
    double mf = 0.0, mb = 0.0;
    for (int i = 0; i < n; ++i) {
      mf += full.final_variance[i] / n;
      mb += bare.final_variance[i] / n;
    }
    o.expect(lower >= static_cast<int>(std::ceil(0.9 * n)),
             fmt::format("reference model, t=500: final-block variance lower without skips on {}/{} probes "
                         "(mean {:.4f} vs {:.4f})",
                         lower, n, mb, mf));
  }

  const auto stack = TunerStack::sc(ref.unet.skip_layout(size(), size()), TunerConfig{}, 42);
  randomize(stack.parameters(), 43, 0.05);
  const auto params = freeze_backbone(ref.unet, &stack);
  std::vector<Tensor> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  ProbeBatch small = make_probe(make_batch(ref.val, iota(2), {}).x0, 500, ref.schedule, 44);
  bool disconnected = true, others_live = true;
  for (int dropped = 0; dropped < skips; ++dropped) {
    std::vector<int> keep;
    for (int j = 0; j < skips; ++j)
      if (j != dropped) keep.push_back(j);
    for (auto& l : leaves) l.clear_grad();
    const auto r = ablate_skips(ref.unet, small, keep, &stack);
    backward(ops::sum(ops::mul(r.output, r.output)), leaves);
    const std::string prefix = fmt::format("sc.tuner.{}.", dropped);
    for (const auto& p : params) {
      double mag = 0.0;
      for (double g : p.tensor.grad().to_vector()) mag += std::abs(g);
      if (p.name.starts_with(prefix)) {
        disconnected &= mag == 0.0;
      } else {
        others_live &= mag > 0.0;
      }
    }
  }
  o.expect(disconnected && others_live,
           fmt::format("dropping skip j zeroes tuner-j gradients exactly, for all {} indexes", skips));
  return o;
}

Outcome serialization() {
  Outcome o;
  auto& ref = reference();
  const fs::path dir = fs::temp_directory_path() / "scedit_acceptance";
  fs::create_directories(dir);
  const auto layout = ref.unet.skip_layout(size(), size());
  const auto stack = TunerStack::sc(layout, TunerConfig{}, 51);
  randomize(stack.parameters(), 52, 0.05);

  save_checkpoint(dir / "a.sced", ref.unet, &stack, CheckpointScope::kAll);
  UNetConfig other = ref.cfg.model;
  other.seed += 1;
  UNet copy(other);
  auto copy_stack = TunerStack::sc(layout, TunerConfig{}, 53);
  load_checkpoint(dir / "a.sced", &copy, &copy_stack);
  save_checkpoint(dir / "b.sced", copy, &copy_stack, CheckpointScope::kAll);
  const std::string a = slurp(dir / "a.sced"), b = slurp(dir / "b.sced");
  o.expect(!a.empty() && a == b, fmt::format("save -> load -> save byte-identical ({} bytes)", a.size()));

  save_checkpoint(dir / "tuner.sced", ref.unet, &stack, CheckpointScope::kTunerOnly);
  UNet fresh(ref.cfg.model);
  load_checkpoint(kData / "reference.sced", &fresh, nullptr);
  auto loaded = TunerStack::sc(fresh.skip_layout(size(), size()), TunerConfig{}, 54);
  load_checkpoint(dir / "tuner.sced", nullptr, &loaded);
  DdimOptions opts;
  opts.steps = 20;
  opts.seed = 55;
  const std::vector<int> labels{2, 5, 8};
  const Shape shape{3, 3, size(), size()};
  const Tensor want = ddim_sample(ScEditModel(ref.unet, &stack).noise_model(nullptr), ref.schedule, shape, opts, labels);
  const Tensor got = ddim_sample(ScEditModel(fresh, &loaded).noise_model(nullptr), ref.schedule, shape, opts, labels);
  o.expect(got.bit_equal(want), fmt::format("tuner-only checkpoint ({} bytes) on a fresh backbone: samples bit-identical",
                                            fs::file_size(dir / "tuner.sced")));
  return o;
}

struct Criterion {
  const char* key;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only;
  for (int i = 1; i + 1 < argc; i += 2) {
    if (std::string(argv[i]) == "--only") only.emplace_back(argv[i + 1]);
  }
  const std::vector<Criterion> criteria{
      {"param-count", "Parameter-count reproduction", parameter_counts},
      {"zero-init", "Zero-init identity", zero_init_identity},
      {"decoupling", "Encoder decoupling", encoder_decoupling},
      {"gradients", "Gradient correctness", gradient_correctness},
      {"diffusion", "Diffusion correctness", diffusion_correctness},
      {"training", "Training efficacy", training_efficacy},
      {"composition", "Composition contracts", composition},
      {"skip-ablation", "Skip-removal methodology", skip_methodology},
      {"serialization", "Serialization", serialization},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.key) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.expect(false, fmt::format("exception: {}", e.what()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %s [%s] (%.1fs)\n", out.pass ? "PASS" : "FAIL", c.title, c.key, secs);
    for (const auto& n : out.notes) std::printf("        %s\n", n.c_str());
    std::fflush(stdout);
    failed += !out.pass;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}

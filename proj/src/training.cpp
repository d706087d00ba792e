#include "scedit/training.hpp"

#include <cmath>

#include "scedit/autograd.hpp"
#include "scedit/errors.hpp"
#include "scedit/ops.hpp"

namespace scedit {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw ConfigError("train.cfg_dropout must be in [0, 1]");
}

AdamW::AdamW(ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.lr),
      wd_(cfg.weight_decay),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, t_);
  const double bc2 = 1.0 - std::pow(b2_, t_);
  const double decay = 1.0 - lr_ * wd_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    std::vector<double> g = p.has_grad() ? p.grad().to_vector()
                                         : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0);
    auto& m = m_[i];
    auto& v = v_[i];
    visit_dtype(p.dtype(), [&]<class T>() {
      auto w = p.mutable_data<T>();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
        double x = static_cast<double>(w[k]) * decay;
        x -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
        w[k] = static_cast<T>(x);
      }
    });
  }
}

void AdamW::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
}

ParamList freeze_backbone(const UNet& unet, const TunerStack* stack) {
  set_trainable(unet.parameters(), false);
  if (stack == nullptr) return {};
  ParamList tuned = stack->parameters();
  set_trainable(tuned, true);
  return tuned;
}

namespace {

ParamList trainable_params(const UNet& unet, const TunerStack* stack, const TrainConfig& cfg) {
  if (cfg.freeze_backbone) {
    if (stack == nullptr) throw ConfigError("a frozen backbone needs a tuner stack to train");
    return freeze_backbone(unet, stack);
  }
  ParamList all = unet.parameters();
  if (stack != nullptr) {
    auto tuned = stack->parameters();
    all.insert(all.end(), tuned.begin(), tuned.end());
  }
  set_trainable(all, true);
  return all;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

int first_non_finite(const Tensor& a, const Tensor& b) {
  const std::int64_t N = a.dim(0);
  const std::int64_t per = a.numel() / N;
  const auto va = a.to_vector();
  const auto vb = b.to_vector();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t k = n * per; k < (n + 1) * per; ++k) {
      if (!std::isfinite(va[k]) || !std::isfinite(vb[k])) return static_cast<int>(n);
    }
  }
  return -1;
}

}  // namespace

ConditionSet blank(const ConditionSet& conds) {
  ConditionSet out;
  out.types = conds.types;
  for (const auto& m : conds.maps) out.maps.push_back(Tensor::zeros(m.shape(), m.dtype()));
  return out;
}

Trainer::Trainer(const UNet& unet, const TunerStack* stack, const NoiseSchedule& schedule, TrainConfig cfg)
    : model_(unet, stack),
      schedule_(schedule),
      cfg_((cfg.validate(), cfg)),
      optimizer_(trainable_params(unet, stack, cfg_), cfg_),
      timestep_rng_(stream_seed(cfg_.seed, 1)),
      noise_rng_(stream_seed(cfg_.seed, 2)),
      dropout_rng_(stream_seed(cfg_.seed, 3)),
      data_rng_(stream_seed(cfg_.seed, 4)) {
  if (stack != nullptr && stack->controllable()) {
    for (const auto& b : stack->branches()) condition_types_.push_back(b.condition);
  }
}

std::vector<int> Trainer::draw_batch_indexes(int dataset_size) {
  if (dataset_size < 1) throw ConfigError("training dataset is empty");
  std::uniform_int_distribution<int> pick(0, dataset_size - 1);
  std::vector<int> idx(static_cast<std::size_t>(cfg_.batch_size));
  for (int& i : idx) i = pick(data_rng_);
  return idx;
}

double Trainer::train_step(const ToyBatch& batch) {
  const std::int64_t N = batch.x0.dim(0);
  const DType dtype = model_.unet().dtype();
  const Tensor x0 = batch.x0.to(dtype);

  std::uniform_int_distribution<int> pick_t(1, schedule_.num_steps);
  std::vector<int> t(static_cast<std::size_t>(N));
  for (int& v : t) v = pick_t(timestep_rng_);
  const Tensor eps = Tensor::randn(x0.shape(), noise_rng_, 1.0, dtype);

  std::vector<int> labels;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::int64_t i = 0; i < N; ++i) {
    const bool drop = unit(dropout_rng_) < cfg_.cfg_dropout;
    if (model_.unet().config().num_labels > 0) labels.push_back(drop ? -1 : batch.labels.at(i));
  }

  const Tensor x_t = q_sample(schedule_, x0, t, eps);
  std::vector<int> steps(t);
  for (int& v : steps) v -= 1;
  ConditionSet conds = cfg_.blank_conditions ? blank(batch.conds) : batch.conds;
  for (auto& m : conds.maps) m = m.to(dtype);

  optimizer_.zero_grad();
  const bool decouple = cfg_.freeze_backbone && cfg_.decouple_encoder;
  const Tensor pred = model_.predict_noise(x_t, steps, labels, &conds, decouple);
  const Tensor loss = ops::mse_loss(pred, eps);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    const int bad = first_non_finite(pred, x0);
    throw NumericError("non-finite loss at step " + std::to_string(optimizer_.steps_taken() + 1) +
                       ", batch index " + std::to_string(bad < 0 ? 0 : bad) +
                       " (t=" + std::to_string(t[bad < 0 ? 0 : bad]) + ")");
  }
  last_retained_ = retained_activation_elements(loss);
  std::vector<Tensor> ensure;
  for (const auto& p : trainable()) ensure.push_back(p.tensor);
  backward(loss, ensure);
  optimizer_.step();
  return value;
}

std::vector<double> fit(Trainer& trainer, const ToyDataset& data, int steps,
                        const std::function<void(int, double)>& on_step) {
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const auto idx = trainer.draw_batch_indexes(static_cast<int>(data.samples.size()));
    const ToyBatch batch = make_batch(data, idx, trainer.condition_types());
    losses.push_back(trainer.train_step(batch));
    if (on_step) on_step(s, losses.back());
  }
  return losses;
}

double evaluate_loss(const ScEditModel& model, const NoiseSchedule& schedule, const ToyDataset& data,
                     const std::vector<std::string>& condition_types, int batch_size,
                     std::uint64_t seed, bool blank_conditions, DType dtype) {
  if (data.samples.empty()) throw ConfigError("evaluation dataset is empty");
  if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
  InferenceGuard no_record;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_t(1, schedule.num_steps);
  const int total = static_cast<int>(data.samples.size());
  double acc = 0.0;
  for (int start = 0; start < total; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(total, start + batch_size); ++i) idx.push_back(i);
    ToyBatch b = make_batch(data, idx, condition_types, dtype);
    std::vector<int> t(idx.size());
    for (int& v : t) v = pick_t(rng);
    const Tensor eps = Tensor::randn(b.x0.shape(), rng, 1.0, dtype);
    const Tensor x_t = q_sample(schedule, b.x0, t, eps);
    std::vector<int> steps(t);
    for (int& v : steps) v -= 1;
    std::vector<int> labels;
    if (model.unet().config().num_labels > 0) labels = b.labels;
    const ConditionSet conds = blank_conditions ? blank(b.conds) : b.conds;
    const Tensor pred = model.predict_noise(x_t, steps, labels, &conds, true);
    acc += ops::mse_loss(pred, eps).item() * static_cast<double>(idx.size());
  }
  return acc / total;
}

}  // namespace scedit

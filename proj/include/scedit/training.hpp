#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scedit/conditions.hpp"
#include "scedit/diffusion.hpp"
#include "scedit/nn.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"

namespace scedit {

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  int steps = 500;
  std::uint64_t seed = 0;
  bool freeze_backbone = true;
  // Probability of replacing a label with the null label.
  double cfg_dropout = 0.1;
  // Run the embedding and encoder without recording history. Ignored when
  // the backbone is trained.
  bool decouple_encoder = true;
  // Feed all-zero condition maps (unconditional control run).
  bool blank_conditions = false;

  void validate() const;
};

// Decoupled weight decay followed by bias-corrected moment updates.
class AdamW {
 public:
  AdamW(ParamList params, const TrainConfig& cfg);

  // Applies one update from the current .grad of every parameter; a
  // parameter without a gradient is treated as having a zero gradient.
  void step();
  void zero_grad();
  int steps_taken() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Marks backbone parameters frozen and tuner/hint parameters trainable;
// returns the trainable list.
ParamList freeze_backbone(const UNet& unet, const TunerStack* stack);

class Trainer {
 public:
  // `stack` may be null only when cfg.freeze_backbone is false.
  Trainer(const UNet& unet, const TunerStack* stack, const NoiseSchedule& schedule, TrainConfig cfg);

  // One optimizer step on the batch; returns the loss. Throws NumericError
  // naming the offending sample for a non-finite loss.
  double train_step(const ToyBatch& batch);

  const ParamList& trainable() const { return optimizer_.params(); }
  std::int64_t last_retained_elements() const { return last_retained_; }
  int steps_taken() const { return optimizer_.steps_taken(); }
  const TrainConfig& config() const { return cfg_; }
  // Condition types the stack consumes, in branch order.
  const std::vector<std::string>& condition_types() const { return condition_types_; }
  // Batch indexes for the next step, drawn from the data stream.
  std::vector<int> draw_batch_indexes(int dataset_size);

 private:
  ScEditModel model_;
  NoiseSchedule schedule_;
  TrainConfig cfg_;
  AdamW optimizer_;
  std::mt19937_64 timestep_rng_, noise_rng_, dropout_rng_, data_rng_;
  std::int64_t last_retained_ = 0;
  std::vector<std::string> condition_types_;
};

// Draws cfg.batch_size random samples per step and runs `steps` updates.
// Returns the loss sequence; `on_step` (optional) sees every (step, loss).
std::vector<double> fit(Trainer& trainer, const ToyDataset& data, int steps,
                        const std::function<void(int, double)>& on_step = {});

// Zeroed copies of the condition maps.
ConditionSet blank(const ConditionSet& conds);

// Mean denoising loss over `data` with timesteps and noise drawn from `seed`,
// so two models evaluated with the same seed see identical (x_t, t, eps).
double evaluate_loss(const ScEditModel& model, const NoiseSchedule& schedule, const ToyDataset& data,
                     const std::vector<std::string>& condition_types, int batch_size,
                     std::uint64_t seed, bool blank_conditions = false, DType dtype = DType::kF32);

}  // namespace scedit

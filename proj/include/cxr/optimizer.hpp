#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "cxr/data.hpp"
#include "cxr/loss.hpp"
#include "cxr/model.hpp"

namespace cxr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers are allocated on first use and
// keyed by parameter order, which must stay stable across steps.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  // theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) for every trainable
  // parameter; `grads` is aligned with `params`.
  void step(const std::vector<ParamRef>& params,
            const std::vector<const std::vector<double>*>& grads, double lr);

  long long step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long long step_count_ = 0;
};

struct TrainConfig {
  int batch_size = 8;
  int epochs = 20;
  double initial_lr = 0.001;
  double lr_decay_factor = 0.5;
  int lr_patience = 1;
  double min_lr = 1e-5;
  std::uint64_t seed = 0;
  double clamp_eps = kDefaultClampEps;
};

struct TrainingData {
  std::vector<Tensor> images;  // [C,H,W], already normalized
  LabelMatrix labels;
};

// Reduce-on-plateau: decays when the latest loss has failed to improve on
// the best prior loss by a relative 1e-3 for more than lr_patience
// consecutive epochs. Never increases, never drops below min_lr.
double lr_schedule_update(const std::vector<double>& history, double current_lr,
                          const TrainConfig& config);

// One pass over the data: epoch-seeded reshuffle, batches of batch_size with
// the final partial batch included, forward / weighted BCE / backward / Adam
// per batch. Returns the mean per-batch loss.
double train_epoch(Model& model, const TrainingData& data, const ClassWeights& weights,
                   const TrainConfig& config, AdamState& adam, double lr,
                   int epoch_index);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
};

// Full run with the adaptive schedule; `on_epoch` fires after every epoch
// (logging, checkpointing).
TrainResult train_model(Model& model, const TrainingData& data,
                        const ClassWeights& weights, const TrainConfig& config,
                        const std::function<void(const EpochStats&)>& on_epoch = nullptr);

// CSV rows: epoch, mean_loss, lr, wall_seconds.
void write_train_log(const std::vector<EpochStats>& rows,
                     const std::filesystem::path& path);

}  // namespace cxr

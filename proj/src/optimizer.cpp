#include "cxr/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "cxr/rng.hpp"

namespace cxr {

namespace {
constexpr double kImprovementRel = 1e-3;
}

void AdamState::step(const std::vector<ParamRef>& params,
                     const std::vector<const std::vector<double>*>& grads, double lr) {
  if (params.size() != grads.size()) {
    throw InvalidArgument("adam: gradient list does not align with parameter list");
  }
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params[i].tensor->size()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params[i].tensor->size()), 0.0);
    }
  }
  ++step_count_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    const std::vector<double>& g = *grads[i];
    if (g.size() != static_cast<std::size_t>(t.size()) || m_[i].size() != g.size()) {
      throw ShapeError("adam: gradient size mismatch for parameter '" + params[i].name + "'");
    }
    double* theta = t.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj)) {
        throw NumericError("adam: non-finite gradient in parameter '" + params[i].name +
                           "' at element " + std::to_string(j));
      }
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

double lr_schedule_update(const std::vector<double>& history, double current_lr,
                          const TrainConfig& config) {
  if (history.empty()) throw InvalidArgument("lr schedule: empty loss history");

  // trailing run of epochs that failed to improve on the best prior loss
  int streak = 0;
  for (std::size_t i = history.size(); i-- > 1;) {
    double best_before = history[0];
    for (std::size_t j = 1; j < i; ++j) best_before = std::min(best_before, history[j]);
    if (history[i] < best_before * (1.0 - kImprovementRel)) break;
    ++streak;
  }
  if (streak > config.lr_patience) {
    return std::max(current_lr * config.lr_decay_factor, config.min_lr);
  }
  return current_lr;
}

double train_epoch(Model& model, const TrainingData& data, const ClassWeights& weights,
                   const TrainConfig& config, AdamState& adam, double lr,
                   int epoch_index) {
  const int n = static_cast<int>(data.images.size());
  if (n == 0) throw InvalidArgument("train_epoch: empty dataset");
  if (data.labels.rows != n) {
    throw InvalidArgument("train_epoch: labels cover " + std::to_string(data.labels.rows) +
                          " rows for " + std::to_string(n) + " images");
  }
  if (config.batch_size < 1) throw InvalidArgument("train_epoch: batch_size must be >= 1");

  model.mode = Mode::Training;
  auto params = model.named_parameters();
  std::vector<ParamRef> trainable;
  for (const ParamRef& p : params) {
    if (p.trainable) trainable.push_back(p);
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch_index)));
  shuffle_rng.shuffle(order);

  const int channels = data.images.front().dim(0);
  const int h = data.images.front().dim(1);
  const int w = data.images.front().dim(2);
  const std::size_t image_len = static_cast<std::size_t>(channels) * h * w;
  const int k = data.labels.cols;

  double loss_sum = 0.0;
  int batch_count = 0;
  for (int start = 0; start < n; start += config.batch_size) {
    const int b = std::min(config.batch_size, n - start);

    Tensor batch({b, channels, h, w});
    LabelMatrix batch_labels;
    batch_labels.rows = b;
    batch_labels.cols = k;
    batch_labels.v.reserve(static_cast<std::size_t>(b) * k);
    for (int i = 0; i < b; ++i) {
      const int src = order[static_cast<std::size_t>(start + i)];
      std::memcpy(batch.data() + static_cast<std::size_t>(i) * image_len,
                  data.images[static_cast<std::size_t>(src)].data(),
                  image_len * sizeof(double));
      for (int c = 0; c < k; ++c) batch_labels.v.push_back(data.labels.at(src, c));
    }

    Graph g(mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch_index)),
                     0xb41c000ULL + static_cast<std::uint64_t>(batch_count)));
    ForwardTrace trace = model_forward_trace(model, g, batch, Mode::Training);
    Tensor loss = weighted_bce(g, trace.probs, batch_labels, weights, config.clamp_eps);
    g.backward(loss);

    std::vector<const std::vector<double>*> grads;
    grads.reserve(trainable.size());
    for (const ParamRef& p : trainable) grads.push_back(&g.grad(*p.tensor));
    adam.step(trainable, grads, lr);

    loss_sum += loss.item();
    ++batch_count;
  }
  return loss_sum / static_cast<double>(batch_count);
}

TrainResult train_model(Model& model, const TrainingData& data,
                        const ClassWeights& weights, const TrainConfig& config,
                        const std::function<void(const EpochStats&)>& on_epoch) {
  if (config.epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (config.min_lr > config.initial_lr) {
    throw InvalidArgument("train: min_lr must not exceed initial_lr");
  }

  TrainResult result;
  std::vector<double> history;
  double lr = config.initial_lr;
  AdamState adam;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double mean_loss = train_epoch(model, data, weights, config, adam, lr, epoch);
    const auto t1 = std::chrono::steady_clock::now();
    history.push_back(mean_loss);

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.mean_loss = mean_loss;
    stats.lr = lr;
    stats.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    result.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);

    lr = lr_schedule_update(history, lr, config);
  }
  model.mode = Mode::Evaluation;
  return result;
}

void write_train_log(const std::vector<EpochStats>& rows,
                     const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("train log: cannot open " + path.string());
  os << "epoch,mean_loss,lr,wall_seconds\n";
  char buf[160];
  for (const EpochStats& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.3f\n", r.epoch, r.mean_loss, r.lr,
                  r.wall_seconds);
    os << buf;
  }
}

}  // namespace cxr

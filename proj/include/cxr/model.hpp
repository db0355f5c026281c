#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cxr/graph.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

// Constants the architecture fixes once. The composite layer order is
// BN -> ReLU -> conv; transitions compress channels by half.
inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.9;
inline constexpr double kTransitionCompression = 0.5;
inline constexpr int kBottleneckFactor = 4;  // 1x1 conv widens to factor*growth

enum class Mode { Training, Evaluation };

struct ModelConfig {
  int input_channels = 1;
  int input_h = 32;
  int input_w = 32;
  int initial_channels = 16;           // channels after the stem conv
  int growth_rate = 8;                 // channels added per dense layer
  std::vector<int> block_layout{2, 2, 2};
  int num_classes = 14;
  double dropout_rate = 0.10;
  bool use_batch_norm = true;
};

// Channel bookkeeping for a config: k0 + L*g inside each block, then
// floor(C/2) at each transition. Throws ConfigError when the spatial size
// underflows or the layout is malformed.
struct ChannelPlan {
  std::vector<int> block_in;    // channels entering each block
  std::vector<int> block_out;   // channels leaving each block
  std::vector<int> trans_out;   // channels after each transition
  int final_channels = 0;       // features entering global average pooling
  int final_h = 0;
  int final_w = 0;
};
ChannelPlan plan_channels(const ModelConfig& config);

struct BnParams {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // state, not trained
};

struct DenseLayerParams {
  BnParams bn1;
  Tensor conv1;  // [factor*g, C_in, 1, 1]
  BnParams bn2;
  Tensor conv2;  // [g, factor*g, 3, 3]
};

struct DenseBlockParams {
  std::vector<DenseLayerParams> layers;
  int in_channels = 0;
};

struct TransitionParams {
  Tensor conv;  // [C_out, C_in, 1, 1]
  int in_channels = 0;
  int out_channels = 0;
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool trainable;
};

struct Model {
  ModelConfig config;
  Tensor stem;  // [initial, input_channels, 3, 3]
  std::vector<DenseBlockParams> blocks;
  std::vector<TransitionParams> transitions;
  Tensor head_weight;  // [F, num_classes]
  Tensor head_bias;    // [num_classes]
  Mode mode = Mode::Evaluation;

  // Deterministic parameter order (also the weight-file order).
  std::vector<ParamRef> named_parameters();
  long long parameter_count();
  // Layers carrying trainable weights: stem + 2 per dense layer +
  // 1 per transition + head. [6,12,24,16] lands on the canonical 121.
  int weighted_layer_count() const;
  int feature_channels() const;
};

// Deterministic from (config, seed): He fan-in init for conv kernels,
// BN scale 1 / shift 0, zero head bias.
Model build_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardTrace {
  Tensor last_block;  // final dense block output, pre-GAP (Grad-CAM target)
  Tensor features;    // after global average pooling
  Tensor logits;
  Tensor probs;
};

Tensor dense_block_forward(Graph& g, const Tensor& block_input,
                           DenseBlockParams& block, const ModelConfig& config,
                           bool training);
Tensor transition_forward(Graph& g, const Tensor& input, TransitionParams& transition);

ForwardTrace model_forward_trace(Model& model, Graph& g, const Tensor& batch, Mode mode);
// Probabilities, one sigmoid per class, using model.mode.
Tensor model_forward(Model& model, Graph& g, const Tensor& batch);

// Weight file: little-endian binary with a config echo and a named-parameter
// manifest ahead of the raw float64 payloads.
void save_weights(Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace cxr

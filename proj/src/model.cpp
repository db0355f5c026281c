#include "cxr/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "cxr/rng.hpp"

namespace cxr {

namespace {

void validate_config(const ModelConfig& c) {
  if (c.input_channels != 1 && c.input_channels != 3) {
    throw ConfigError("config: input_channels must be 1 or 3");
  }
  if (c.input_h < 1 || c.input_w < 1) throw ConfigError("config: input size must be positive");
  if (c.initial_channels < 1) throw ConfigError("config: initial_channels must be positive");
  if (c.growth_rate < 1) throw ConfigError("config: growth_rate must be positive");
  if (c.num_classes < 1) throw ConfigError("config: num_classes must be positive");
  if (c.block_layout.empty()) throw ConfigError("config: block_layout must be non-empty");
  for (int l : c.block_layout) {
    if (l < 1) throw ConfigError("config: every block needs at least one dense layer");
  }
  if (c.dropout_rate < 0.0 || c.dropout_rate >= 1.0) {
    throw ConfigError("config: dropout_rate must lie in [0,1)");
  }
}

Tensor he_init(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (long long i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, std_dev);
  return t;
}

BnParams make_bn(int channels) {
  BnParams bn;
  bn.gamma = Tensor::full({channels}, 1.0);
  bn.beta = Tensor::zeros({channels});
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::full({channels}, 1.0);
  return bn;
}

void collect_bn(std::vector<ParamRef>& out, const std::string& prefix, BnParams& bn) {
  out.push_back({prefix + ".gamma", &bn.gamma, true});
  out.push_back({prefix + ".beta", &bn.beta, true});
  out.push_back({prefix + ".running_mean", &bn.running_mean, false});
  out.push_back({prefix + ".running_var", &bn.running_var, false});
}

}  // namespace

ChannelPlan plan_channels(const ModelConfig& config) {
  validate_config(config);
  ChannelPlan plan;
  int channels = config.initial_channels;
  int h = config.input_h, w = config.input_w;
  const int num_blocks = static_cast<int>(config.block_layout.size());
  for (int b = 0; b < num_blocks; ++b) {
    plan.block_in.push_back(channels);
    channels += config.block_layout[static_cast<std::size_t>(b)] * config.growth_rate;
    plan.block_out.push_back(channels);
    if (b + 1 < num_blocks) {
      if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
        throw ConfigError("config: transition after block " + std::to_string(b) +
                          " needs an even spatial size >= 2x2, got " +
                          std::to_string(h) + "x" + std::to_string(w));
      }
      h /= 2;
      w /= 2;
      channels = static_cast<int>(std::floor(channels * kTransitionCompression));
      if (channels < 1) {
        throw ConfigError("config: transition after block " + std::to_string(b) +
                          " compresses channels to zero");
      }
      plan.trans_out.push_back(channels);
    }
  }
  plan.final_channels = channels;
  plan.final_h = h;
  plan.final_w = w;
  return plan;
}

std::vector<ParamRef> Model::named_parameters() {
  std::vector<ParamRef> out;
  out.push_back({"stem", &stem, true});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t l = 0; l < blocks[b].layers.size(); ++l) {
      const std::string prefix =
          "block" + std::to_string(b) + ".layer" + std::to_string(l);
      DenseLayerParams& layer = blocks[b].layers[l];
      if (config.use_batch_norm) collect_bn(out, prefix + ".bn1", layer.bn1);
      out.push_back({prefix + ".conv1", &layer.conv1, true});
      if (config.use_batch_norm) collect_bn(out, prefix + ".bn2", layer.bn2);
      out.push_back({prefix + ".conv2", &layer.conv2, true});
    }
  }
  for (std::size_t t = 0; t < transitions.size(); ++t) {
    out.push_back({"transition" + std::to_string(t) + ".conv", &transitions[t].conv, true});
  }
  out.push_back({"head.weight", &head_weight, true});
  out.push_back({"head.bias", &head_bias, true});
  return out;
}

long long Model::parameter_count() {
  long long n = 0;
  for (const ParamRef& p : named_parameters()) n += p.tensor->size();
  return n;
}

int Model::weighted_layer_count() const {
  int n = 1;  // stem
  for (const DenseBlockParams& b : blocks) n += 2 * static_cast<int>(b.layers.size());
  n += static_cast<int>(transitions.size());
  n += 1;  // head
  return n;
}

int Model::feature_channels() const { return head_weight.dim(0); }

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  const ChannelPlan plan = plan_channels(config);
  Rng rng(seed);

  Model m;
  m.config = config;
  m.stem = he_init({config.initial_channels, config.input_channels, 3, 3},
                   config.input_channels * 9, rng);

  const int bottleneck = kBottleneckFactor * config.growth_rate;
  const int num_blocks = static_cast<int>(config.block_layout.size());
  for (int b = 0; b < num_blocks; ++b) {
    DenseBlockParams block;
    block.in_channels = plan.block_in[static_cast<std::size_t>(b)];
    int channels = block.in_channels;
    for (int l = 0; l < config.block_layout[static_cast<std::size_t>(b)]; ++l) {
      DenseLayerParams layer;
      if (config.use_batch_norm) layer.bn1 = make_bn(channels);
      layer.conv1 = he_init({bottleneck, channels, 1, 1}, channels, rng);
      if (config.use_batch_norm) layer.bn2 = make_bn(bottleneck);
      layer.conv2 = he_init({config.growth_rate, bottleneck, 3, 3}, bottleneck * 9, rng);
      block.layers.push_back(std::move(layer));
      channels += config.growth_rate;
    }
    m.blocks.push_back(std::move(block));
    if (b + 1 < num_blocks) {
      TransitionParams t;
      t.in_channels = channels;
      t.out_channels = plan.trans_out[static_cast<std::size_t>(b)];
      t.conv = he_init({t.out_channels, t.in_channels, 1, 1}, t.in_channels, rng);
      m.transitions.push_back(std::move(t));
    }
  }

  const int features = plan.final_channels;
  // gentler scale for the sigmoid head: plain fan-in, no ReLU gain
  m.head_weight = Tensor({features, config.num_classes});
  const double head_std = std::sqrt(1.0 / static_cast<double>(features));
  for (long long i = 0; i < m.head_weight.size(); ++i) {
    m.head_weight.data()[i] = rng.normal(0.0, head_std);
  }
  m.head_bias = Tensor::zeros({config.num_classes});
  m.mode = Mode::Evaluation;
  return m;
}

Tensor dense_block_forward(Graph& g, const Tensor& block_input,
                           DenseBlockParams& block, const ModelConfig& config,
                           bool training) {
  if (block_input.ndim() != 4 || block_input.dim(1) != block.in_channels) {
    throw ShapeError("dense_block_forward: expected " +
                     std::to_string(block.in_channels) + " input channels, got " +
                     shape_str(block_input.shape()));
  }
  Tensor x = block_input;
  for (DenseLayerParams& layer : block.layers) {
    Tensor u = x;
    if (config.use_batch_norm) {
      u = g.batch_norm(u, g.var(layer.bn1.gamma), g.var(layer.bn1.beta),
                       &layer.bn1.running_mean.values(),
                       &layer.bn1.running_var.values(), training, kBnEpsilon,
                       kBnMomentum);
    }
    u = g.relu(u);
    u = g.conv2d(u, g.var(layer.conv1), 1, 0);
    if (config.use_batch_norm) {
      u = g.batch_norm(u, g.var(layer.bn2.gamma), g.var(layer.bn2.beta),
                       &layer.bn2.running_mean.values(),
                       &layer.bn2.running_var.values(), training, kBnEpsilon,
                       kBnMomentum);
    }
    u = g.relu(u);
    u = g.conv2d(u, g.var(layer.conv2), 1, 1);
    x = g.concat_channels(x, u);
  }
  return x;
}

Tensor transition_forward(Graph& g, const Tensor& input, TransitionParams& transition) {
  if (input.ndim() != 4 || input.dim(1) != transition.in_channels) {
    throw ShapeError("transition_forward: expected " +
                     std::to_string(transition.in_channels) + " input channels, got " +
                     shape_str(input.shape()));
  }
  if (input.dim(2) % 2 != 0 || input.dim(3) % 2 != 0) {
    throw ShapeError("transition_forward: spatial dims must be even, got " +
                     shape_str(input.shape()));
  }
  Tensor h = g.conv2d(input, g.var(transition.conv), 1, 0);
  return g.avg_pool2d(h, 2, 2);
}

ForwardTrace model_forward_trace(Model& model, Graph& g, const Tensor& batch, Mode mode) {
  const ModelConfig& c = model.config;
  if (batch.ndim() != 4 || batch.dim(1) != c.input_channels ||
      batch.dim(2) != c.input_h || batch.dim(3) != c.input_w) {
    throw ShapeError("model_forward: batch " + shape_str(batch.shape()) +
                     " does not match configured input [N," +
                     std::to_string(c.input_channels) + "," + std::to_string(c.input_h) +
                     "," + std::to_string(c.input_w) + "]");
  }
  const bool training = mode == Mode::Training;

  Tensor h = g.is_recorded(batch) ? batch : g.input(batch);
  h = g.conv2d(h, g.var(model.stem), 1, 1);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    h = dense_block_forward(g, h, model.blocks[b], c, training);
    if (b < model.transitions.size()) h = transition_forward(g, h, model.transitions[b]);
  }
  // the pre-activation composite leaves raw conv outputs at the block
  // boundary; rectify before pooling so the head (and the attention maps)
  // see proper activations
  h = g.relu(h);

  ForwardTrace trace;
  trace.last_block = h;
  Tensor feat = g.global_avg_pool(h);
  feat = g.dropout(feat, c.dropout_rate, training);
  trace.features = feat;
  trace.logits = g.linear(feat, g.var(model.head_weight), g.var(model.head_bias));
  trace.probs = g.sigmoid(trace.logits);
  return trace;
}

Tensor model_forward(Model& model, Graph& g, const Tensor& batch) {
  return model_forward_trace(model, g, batch, model.mode).probs;
}

// --- weight file ------------------------------------------------------
//
//   magic 'CXRW' | u32 version | config | u32 param count
//   per param: u32 name len, bytes | u32 ndim, i64 dims | u64 offset | u8 trainable
//   payload: raw little-endian float64
namespace {

constexpr std::uint32_t kWeightMagic = 0x57525843;  // "CXRW"
constexpr std::uint32_t kWeightVersion = 1;

void require_little_endian() {
  const std::uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw IoError("weight file: big-endian hosts are not supported");
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("weight file: truncated");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  auto len = read_pod<std::uint32_t>(is);
  if (len > 4096) throw FormatError("weight file: implausible string length");
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw FormatError("weight file: truncated");
  return s;
}

void write_config(std::ostream& os, const ModelConfig& c) {
  write_pod<std::int32_t>(os, c.input_channels);
  write_pod<std::int32_t>(os, c.input_h);
  write_pod<std::int32_t>(os, c.input_w);
  write_pod<std::int32_t>(os, c.initial_channels);
  write_pod<std::int32_t>(os, c.growth_rate);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.block_layout.size()));
  for (int l : c.block_layout) write_pod<std::int32_t>(os, l);
  write_pod<std::int32_t>(os, c.num_classes);
  write_pod<double>(os, c.dropout_rate);
  write_pod<std::uint8_t>(os, c.use_batch_norm ? 1 : 0);
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.input_channels = read_pod<std::int32_t>(is);
  c.input_h = read_pod<std::int32_t>(is);
  c.input_w = read_pod<std::int32_t>(is);
  c.initial_channels = read_pod<std::int32_t>(is);
  c.growth_rate = read_pod<std::int32_t>(is);
  auto nblocks = read_pod<std::uint32_t>(is);
  if (nblocks == 0 || nblocks > 64) throw FormatError("weight file: bad block count");
  c.block_layout.clear();
  for (std::uint32_t i = 0; i < nblocks; ++i) c.block_layout.push_back(read_pod<std::int32_t>(is));
  c.num_classes = read_pod<std::int32_t>(is);
  c.dropout_rate = read_pod<double>(is);
  c.use_batch_norm = read_pod<std::uint8_t>(is) != 0;
  return c;
}

}  // namespace

void save_weights(Model& model, const std::filesystem::path& path) {
  require_little_endian();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("weight file: cannot open " + path.string() + " for writing");

  write_pod(os, kWeightMagic);
  write_pod(os, kWeightVersion);
  write_config(os, model.config);

  auto params = model.named_parameters();
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const ParamRef& p : params) {
    write_string(os, p.name);
    const Shape& s = p.tensor->shape();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (int d : s) write_pod<std::int64_t>(os, d);
    write_pod<std::uint64_t>(os, offset);
    write_pod<std::uint8_t>(os, p.trainable ? 1 : 0);
    offset += static_cast<std::uint64_t>(p.tensor->size());
  }
  for (const ParamRef& p : params) {
    os.write(reinterpret_cast<const char*>(p.tensor->data()),
             static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
  }
  if (!os) throw IoError("weight file: write to " + path.string() + " failed");
}

Model load_model(const std::filesystem::path& path) {
  require_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("weight file: cannot open " + path.string());

  if (read_pod<std::uint32_t>(is) != kWeightMagic) {
    throw FormatError("weight file: bad magic in " + path.string());
  }
  if (read_pod<std::uint32_t>(is) != kWeightVersion) {
    throw FormatError("weight file: unsupported version in " + path.string());
  }
  const ModelConfig config = read_config(is);

  // Build the skeleton from the embedded config, then overwrite payloads.
  // Any manifest entry that disagrees with the config-derived shapes is a
  // config mismatch and fails the load.
  Model model = build_model(config, 0);
  auto params = model.named_parameters();

  const auto count = read_pod<std::uint32_t>(is);
  if (count != params.size()) {
    throw FormatError("weight file: manifest lists " + std::to_string(count) +
                      " parameters, config implies " + std::to_string(params.size()));
  }
  struct Entry {
    std::size_t param_index;
    std::uint64_t offset;
    std::uint64_t count;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(is);
    const auto ndim = read_pod<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(read_pod<std::int64_t>(is)));
    }
    const auto offset = read_pod<std::uint64_t>(is);
    read_pod<std::uint8_t>(is);  // trainable flag, implied by the name
    const ParamRef& expect = params[i];
    if (name != expect.name || shape != expect.tensor->shape()) {
      throw FormatError("weight file: parameter '" + name + "' " + shape_str(shape) +
                        " does not match config-derived '" + expect.name + "' " +
                        shape_str(expect.tensor->shape()));
    }
    entries.push_back({i, offset, static_cast<std::uint64_t>(expect.tensor->size())});
  }
  const std::istream::pos_type payload_start = is.tellg();
  for (const Entry& e : entries) {
    Tensor* t = params[e.param_index].tensor;
    is.seekg(payload_start + static_cast<std::istream::off_type>(e.offset * sizeof(double)));
    is.read(reinterpret_cast<char*>(t->data()),
            static_cast<std::streamsize>(e.count * sizeof(double)));
    if (!is) throw FormatError("weight file: payload truncated in " + path.string());
  }
  return model;
}

}  // namespace cxr
